#pragma once

#include "dgpo/policy.hpp"

namespace dgpo {

// Squared Hellinger distance d = 1 - BC(p, q), always in [0, 1].
struct DeviationScore {
  double value = 0.0;
};

struct EntropyValue {
  double raw = 0.0;         // nats
  double normalized = 0.0;  // raw / ln|V|
};

constexpr double kDefaultKlFloor = 1e-30;

double bhattacharyya(const TokenDistribution& p, const TokenDistribution& q);
DeviationScore squared_hellinger(const TokenDistribution& p, const TokenDistribution& q);

// KL(p || q) with q clamped from below at `floor` (> 0).
double reverse_kl(const TokenDistribution& p, const TokenDistribution& q, double floor = kDefaultKlFloor);

// KL(p || q) with no clamping; +inf when p puts mass where q has none.
double reverse_kl_unfloored(const TokenDistribution& p, const TokenDistribution& q);

EntropyValue shannon_entropy(const TokenDistribution& p);

}  // namespace dgpo
