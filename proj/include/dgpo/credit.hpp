#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "dgpo/rollout.hpp"

namespace dgpo {

enum class StdEstimator { population, sample };
enum class DeviationMetric { hellinger, reverse_kl_normalized };

std::string to_string(DeviationMetric m);

struct GroupRewards {
  std::vector<double> rewards;
  double epsilon = 1e-6;
  StdEstimator estimator = StdEstimator::population;
};

struct GateConfig {
  double kappa = 1.0;  // entropy exponent, >= 0
  double tau = 0.5;    // softmax temperature, > 0
  DeviationMetric metric = DeviationMetric::hellinger;
  double kl_floor = 1e-30;  // reverse_kl_normalized only

  void validate() const;
};

struct CreditConfig {
  GateConfig gate;
  double adv_epsilon = 1e-6;
  StdEstimator estimator = StdEstimator::population;
  // Broadcast A_i to every token (GRPO); deviations and entropies are still
  // recorded for diagnostics.
  bool uniform_weights = false;
};

// Token-level credit of one response.
struct SequenceCredit {
  std::vector<TokenId> tokens;
  std::vector<double> deviations;  // d_t
  std::vector<double> entropies;   // normalized entropy of π_old at t
  std::vector<double> scores;      // s_t = d_t * H̃_t^κ
  std::vector<double> weights;     // w_t, mean 1
  std::vector<double> advantages;  // A_t = A * w_t
  double sequence_advantage = 0.0;
  double reward = 0.0;

  std::size_t length() const { return tokens.size(); }
};

// One entry per sequence of a group.
using CreditMap = std::vector<SequenceCredit>;

/// Group-relative advantage A_i = (r_i - mean r) / (std r + ε).
std::vector<double> group_advantage(const GroupRewards& rewards);

// s_t = d_t * h_t^κ, with 0^0 = 1.
std::vector<double> gated_scores(std::span<const double> deviations, std::span<const double> entropies,
                                 double kappa);

// w_t = T * softmax_t(s_t / τ), T = scores.size().
std::vector<double> reallocation_weights(std::span<const double> scores, double tau);

// Deviation of π_old from π_ref under the selected metric, in [0, 1].
double token_deviation(const TokenDistribution& policy, const TokenDistribution& reference,
                       DeviationMetric metric, double kl_floor);

// Full pipeline from precomputed deviations / normalized entropies.
CreditMap credit_from_signals(std::span<const double> rewards,
                              const std::vector<std::vector<TokenId>>& tokens,
                              const std::vector<std::vector<double>>& deviations,
                              const std::vector<std::vector<double>>& entropies,
                              const CreditConfig& config);

// Computes deviations and entropies from the cached snapshot/reference
// distributions of the group, then runs credit_from_signals.
CreditMap build_credit_map(const RolloutGroup& group, const CreditConfig& config);

// One JSON object per line and per sequence:
// {"group","sequence","reward","sequence_advantage","tokens","d","entropy","s","w","advantage"}
void write_credit_jsonl(std::ostream& os, const CreditMap& credit, std::size_t group_index);

}  // namespace dgpo
