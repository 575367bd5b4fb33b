#include "dgpo/credit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "dgpo/divergence.hpp"
#include "dgpo/error.hpp"

namespace dgpo {

std::string to_string(DeviationMetric m) {
  return m == DeviationMetric::hellinger ? "hellinger" : "reverse_kl_normalized";
}

void GateConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InputError("tau must be > 0");
  if (!(kappa >= 0.0) || !std::isfinite(kappa)) throw InputError("kappa must be >= 0");
  if (!(kl_floor > 0.0)) throw InputError("kl_floor must be > 0");
}

std::vector<double> group_advantage(const GroupRewards& g) {
  const std::size_t n = g.rewards.size();
  if (n < 2) throw InputError("group needs at least 2 rewards");
  for (double r : g.rewards) {
    if (!std::isfinite(r)) throw InputError("non-finite reward");
  }
  const double mean = std::accumulate(g.rewards.begin(), g.rewards.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double r : g.rewards) ss += (r - mean) * (r - mean);
  const double denom = g.estimator == StdEstimator::population ? static_cast<double>(n)
                                                                : static_cast<double>(n - 1);
  const double sd = std::sqrt(ss / denom);
  std::vector<double> adv(n);
  if (sd == 0.0) {
    // All-equal rewards carry no signal; ε = 0 would otherwise divide 0 by 0.
    std::fill(adv.begin(), adv.end(), 0.0);
    return adv;
  }
  for (std::size_t i = 0; i < n; ++i) adv[i] = (g.rewards[i] - mean) / (sd + g.epsilon);
  return adv;
}

std::vector<double> gated_scores(std::span<const double> deviations, std::span<const double> entropies,
                                 double kappa) {
  if (deviations.size() != entropies.size()) throw InputError("deviation/entropy length mismatch");
  if (!(kappa >= 0.0)) throw InputError("kappa must be >= 0");
  std::vector<double> s(deviations.size());
  for (std::size_t t = 0; t < s.size(); ++t) {
    const double gate = kappa == 0.0 ? 1.0 : std::pow(std::clamp(entropies[t], 0.0, 1.0), kappa);
    s[t] = std::clamp(deviations[t], 0.0, 1.0) * gate;
  }
  return s;
}

std::vector<double> reallocation_weights(std::span<const double> scores, double tau) {
  if (!(tau > 0.0)) throw InputError("tau must be > 0");
  if (scores.empty()) throw InputError("cannot reallocate over an empty sequence");
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> w(scores.size());
  double sum = 0.0;
  for (std::size_t t = 0; t < w.size(); ++t) {
    w[t] = std::exp((scores[t] - mx) / tau);
    sum += w[t];
  }
  const double scale = static_cast<double>(w.size()) / sum;
  for (double& x : w) x *= scale;
  return w;
}

double token_deviation(const TokenDistribution& policy, const TokenDistribution& reference,
                       DeviationMetric metric, double kl_floor) {
  if (metric == DeviationMetric::hellinger) return squared_hellinger(policy, reference).value;
  const double kl = reverse_kl(policy, reference, kl_floor);
  return kl / (1.0 + kl);
}

CreditMap credit_from_signals(std::span<const double> rewards, const std::vector<std::vector<TokenId>>& tokens,
                              const std::vector<std::vector<double>>& deviations,
                              const std::vector<std::vector<double>>& entropies, const CreditConfig& config) {
  const std::size_t g = rewards.size();
  if (tokens.size() != g || deviations.size() != g || entropies.size() != g) {
    throw InputError("credit inputs disagree on group size");
  }
  config.gate.validate();
  const std::vector<double> adv =
      group_advantage({std::vector<double>(rewards.begin(), rewards.end()), config.adv_epsilon, config.estimator});
  CreditMap out(g);
  for (std::size_t i = 0; i < g; ++i) {
    const std::size_t len = tokens[i].size();
    if (len == 0) throw InputError("sequence " + std::to_string(i) + " is empty");
    if (deviations[i].size() != len || entropies[i].size() != len) {
      throw InputError("sequence " + std::to_string(i) + ": per-token signal length mismatch");
    }
    SequenceCredit& c = out[i];
    c.tokens = tokens[i];
    c.deviations = deviations[i];
    c.entropies = entropies[i];
    c.reward = rewards[i];
    c.sequence_advantage = adv[i];
    c.scores = gated_scores(c.deviations, c.entropies, config.gate.kappa);
    c.weights = config.uniform_weights ? std::vector<double>(len, 1.0)
                                       : reallocation_weights(c.scores, config.gate.tau);
    c.advantages.resize(len);
    for (std::size_t t = 0; t < len; ++t) c.advantages[t] = adv[i] * c.weights[t];
  }
  return out;
}

CreditMap build_credit_map(const RolloutGroup& group, const CreditConfig& config) {
  const std::size_t g = group.records.size();
  std::vector<double> rewards(g);
  std::vector<std::vector<TokenId>> tokens(g);
  std::vector<std::vector<double>> dev(g), ent(g);
  for (std::size_t i = 0; i < g; ++i) {
    const RolloutRecord& r = group.records[i];
    const std::size_t len = r.length();
    if (r.old_dists.size() != len || r.ref_dists.size() != len) {
      throw InputError("rollout " + std::to_string(i) + ": cached distributions do not match length");
    }
    rewards[i] = r.reward;
    tokens[i] = r.sequence.response;
    dev[i].resize(len);
    ent[i].resize(len);
    for (std::size_t t = 0; t < len; ++t) {
      const TokenDistribution p(r.old_dists[t]);
      const TokenDistribution q(r.ref_dists[t]);
      dev[i][t] = token_deviation(p, q, config.gate.metric, config.gate.kl_floor);
      ent[i][t] = shannon_entropy(p).normalized;
    }
  }
  return credit_from_signals(rewards, tokens, dev, ent, config);
}

void write_credit_jsonl(std::ostream& os, const CreditMap& credit, std::size_t group_index) {
  for (std::size_t i = 0; i < credit.size(); ++i) {
    const SequenceCredit& c = credit[i];
    nlohmann::json j;
    j["group"] = group_index;
    j["sequence"] = i;
    j["reward"] = c.reward;
    j["sequence_advantage"] = c.sequence_advantage;
    j["tokens"] = c.tokens;
    j["d"] = c.deviations;
    j["entropy"] = c.entropies;
    j["s"] = c.scores;
    j["w"] = c.weights;
    j["advantage"] = c.advantages;
    os << j.dump() << '\n';
  }
}

}  // namespace dgpo
