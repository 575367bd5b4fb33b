#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <vector>

#include "dgpo/credit.hpp"
#include "dgpo/divergence.hpp"
#include "dgpo/objective.hpp"
#include "dgpo/policy.hpp"
#include "dgpo/rollout.hpp"

namespace testing {

using namespace dgpo;

// Random point of the simplex; with `sparsity` > 0 some entries are exactly 0.
inline std::vector<double> random_probs(std::size_t n, Rng& rng, double sparsity = 0.0) {
  std::exponential_distribution<double> e(1.0);
  std::bernoulli_distribution drop(sparsity);
  std::vector<double> p(n);
  double sum = 0.0;
  for (double& x : p) {
    x = drop(rng) ? 0.0 : e(rng);
    sum += x;
  }
  if (sum == 0.0) {
    p[0] = 1.0;
    return p;
  }
  for (double& x : p) x /= sum;
  return p;
}

inline std::vector<double> probs_of(const std::vector<double>& log_probs) {
  std::vector<double> p(log_probs.size());
  for (std::size_t a = 0; a < p.size(); ++a) p[a] = std::exp(log_probs[a]);
  return p;
}

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    diff += (a[j] - b[j]) * (a[j] - b[j]);
    na += a[j] * a[j];
    nb += b[j] * b[j];
  }
  return std::sqrt(diff) / std::max(std::sqrt(std::max(na, nb)), 1e-300);
}

// A small policy of either kind with at most 500 parameters.
inline PolicyModel small_model(bool mlp, std::uint64_t seed, double scale = 0.5) {
  const Vocab v{5, 4};
  PolicyModel m = mlp ? PolicyModel::mlp(v, 3, 4, 8) : PolicyModel::tabular(v, 2, 36);
  m.init_gaussian(seed, scale);
  return m;
}

// Rollouts sampled from `old_policy` with cached distributions, rewards drawn
// at random (never all equal within a group), and a credit map per group.
struct Batch {
  std::vector<RolloutGroup> groups;
  std::vector<CreditMap> credit;

  std::vector<BatchItem> items() const {
    std::vector<BatchItem> out;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (std::size_t i = 0; i < groups[g].records.size(); ++i) out.push_back({&groups[g].records[i], &credit[g][i]});
    }
    return out;
  }
};

inline Batch random_batch(const PolicyModel& old_policy, const PolicyModel& reference, std::size_t n_groups,
                          std::size_t group_size, int max_len, const CreditConfig& cfg, Rng& rng) {
  Batch b;
  SampleOptions opts;
  opts.keep_distributions = true;
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(old_policy.vocab().size - 2));
  for (std::size_t g = 0; g < n_groups; ++g) {
    RolloutGroup group;
    group.instance_index = g;
    const std::vector<TokenId> prompt{tok(rng), tok(rng)};
    for (std::size_t i = 0; i < group_size; ++i) {
      const SampledSequence s = sample_sequence(old_policy, prompt, max_len, rng, opts);
      RolloutRecord r;
      r.sequence = s.sequence;
      r.old_log_probs = s.log_probs;
      for (std::size_t t = 0; t < r.length(); ++t) {
        r.old_dists.push_back(probs_of(s.step_log_probs[t]));
        r.ref_dists.push_back(probs_of(reference.log_probs(r.sequence.context_at(t))));
      }
      r.reward = i == 0 ? 1.0 : (i == 1 ? 0.0 : static_cast<double>(rng() % 2));
      group.records.push_back(std::move(r));
    }
    b.credit.push_back(build_credit_map(group, cfg));
    b.groups.push_back(std::move(group));
  }
  return b;
}

// Moves every parameter by N(0, scale^2) so ratios differ from 1.
inline void perturb(PolicyModel& m, double scale, Rng& rng) {
  std::normal_distribution<double> n(0.0, scale);
  for (double& x : m.params()) x += n(rng);
}

}  // namespace testing
