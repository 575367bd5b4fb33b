#include "dgpo/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dgpo/error.hpp"

namespace dgpo {
namespace {

void require_same_vocab(const TokenDistribution& p, const TokenDistribution& q) {
  if (p.size() != q.size()) throw InputError("distributions are over different vocab sizes");
}

}  // namespace

double bhattacharyya(const TokenDistribution& p, const TokenDistribution& q) {
  require_same_vocab(p, q);
  double bc = 0.0;
  for (std::size_t a = 0; a < p.size(); ++a) bc += std::sqrt(p[a] * q[a]);
  return std::clamp(bc, 0.0, 1.0);
}

DeviationScore squared_hellinger(const TokenDistribution& p, const TokenDistribution& q) {
  return {std::clamp(1.0 - bhattacharyya(p, q), 0.0, 1.0)};
}

double reverse_kl(const TokenDistribution& p, const TokenDistribution& q, double floor) {
  require_same_vocab(p, q);
  if (!(floor > 0.0)) throw InputError("reverse_kl floor must be > 0");
  double kl = 0.0;
  for (std::size_t a = 0; a < p.size(); ++a) {
    if (p[a] == 0.0) continue;
    kl += p[a] * (std::log(p[a]) - std::log(std::max(q[a], floor)));
  }
  // Rounding can leave a tiny negative value on p == q.
  return std::max(kl, 0.0);
}

double reverse_kl_unfloored(const TokenDistribution& p, const TokenDistribution& q) {
  require_same_vocab(p, q);
  double kl = 0.0;
  for (std::size_t a = 0; a < p.size(); ++a) {
    if (p[a] == 0.0) continue;
    if (q[a] == 0.0) return std::numeric_limits<double>::infinity();
    kl += p[a] * (std::log(p[a]) - std::log(q[a]));
  }
  return std::max(kl, 0.0);
}

EntropyValue shannon_entropy(const TokenDistribution& p) {
  double h = 0.0;
  for (double x : p.probs()) {
    if (x > 0.0) h -= x * std::log(x);
  }
  const double max_h = std::log(static_cast<double>(p.size()));
  h = std::clamp(h, 0.0, max_h);
  return {h, p.size() > 1 ? std::clamp(h / max_h, 0.0, 1.0) : 0.0};
}

}  // namespace dgpo
