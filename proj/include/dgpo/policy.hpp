#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

namespace dgpo {

using TokenId = std::int32_t;
using Rng = std::mt19937_64;

// Token ids live in [0, size). The id `size` is the padding id used to fill
// the left context window; it is never emitted by a policy.
struct Vocab {
  int size = 16;
  TokenId eos = 15;

  TokenId pad() const { return static_cast<TokenId>(size); }
  bool contains(TokenId t) const { return t >= 0 && t < size; }
  void validate() const;
  bool operator==(const Vocab&) const = default;
};

// A probability vector over the vocabulary. Construction validates
// non-negativity, finiteness and unit mass (within 1e-9).
class TokenDistribution {
 public:
  explicit TokenDistribution(std::vector<double> probs);

  static TokenDistribution uniform(int n);
  static TokenDistribution one_hot(int n, TokenId a);
  // Exponentiates a normalized log-probability vector.
  static TokenDistribution from_log_probs(std::span<const double> log_probs);

  std::span<const double> probs() const { return probs_; }
  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_[i]; }

 private:
  std::vector<double> probs_;
};

struct Sequence {
  std::vector<TokenId> prompt;
  std::vector<TokenId> response;

  std::size_t length() const { return response.size(); }
  // prompt followed by response[0, t): the conditioning context of token t.
  std::vector<TokenId> context_at(std::size_t t) const;
};

struct SampleOptions {
  double temperature = 1.0;
  // Keep the full per-step log-probability vectors (temperature applied).
  bool keep_distributions = false;
};

struct SampledSequence {
  Sequence sequence;
  std::vector<double> log_probs;                 // log π(y_t | context_t)
  std::vector<std::vector<double>> step_log_probs;  // only with keep_distributions
};

enum class ModelKind : std::uint32_t { tabular = 0, mlp = 1 };

struct ModelShape {
  ModelKind kind = ModelKind::mlp;
  Vocab vocab;
  int context_window = 6;
  int embed_dim = 8;      // mlp
  int hidden_width = 64;  // mlp
  int buckets = 0;        // tabular

  std::size_t param_count() const;
  void validate() const;
  bool operator==(const ModelShape&) const = default;
};

/// Autoregressive categorical policy over a fixed-width left context.
///
/// Two parameterizations share one interface:
///   * tabular: one logit row per context bucket. The bucket is the mixed-radix
///     code of the padded window (base vocab+1) reduced modulo `buckets`, so
///     it is collision-free whenever (vocab+1)^window <= buckets.
///   * mlp: token embeddings of the window concatenated, one tanh hidden
///     layer, linear readout to logits.
///
/// Parameters are a flat vector; all derived quantities are computed from
/// log-softmax of the logits.
class PolicyModel {
 public:
  explicit PolicyModel(ModelShape shape);

  static PolicyModel tabular(Vocab vocab, int context_window, int buckets);
  static PolicyModel mlp(Vocab vocab, int context_window, int embed_dim, int hidden_width);

  const ModelShape& shape() const { return shape_; }
  const Vocab& vocab() const { return shape_.vocab; }
  std::size_t param_count() const { return params_.size(); }
  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }
  void set_params(std::span<const double> values);

  // Seeded N(0, scale^2) initialization.
  void init_gaussian(std::uint64_t seed, double scale = 0.1);

  std::vector<double> logits(std::span<const TokenId> context) const;
  std::vector<double> log_probs(std::span<const TokenId> context, double temperature = 1.0) const;
  TokenDistribution forward(std::span<const TokenId> context) const;

  // grad += (d logits / d params)^T * dlogits for the given context.
  void backprop_logits(std::span<const TokenId> context, std::span<const double> dlogits,
                       std::span<double> grad) const;

  std::size_t tabular_row(std::span<const TokenId> context) const;

 private:
  void fill_window(std::span<const TokenId> context, std::span<TokenId> window) const;
  void mlp_hidden(std::span<const TokenId> window, std::span<double> hidden) const;

  ModelShape shape_;
  std::vector<double> params_;
};

// Numerically stable log-softmax of z / temperature.
std::vector<double> log_softmax(std::span<const double> z, double temperature = 1.0);

SampledSequence sample_sequence(const PolicyModel& model, std::span<const TokenId> prompt,
                                int max_len, Rng& rng, const SampleOptions& options = {});

// Draws an index from a normalized log-probability vector.
TokenId sample_from_log_probs(std::span<const double> log_probs, Rng& rng);

// grad += ∇θ Σ_t coef[t] · log π(response[t] | context_t)
void accumulate_logprob_gradient(const PolicyModel& model, const Sequence& sequence,
                                 std::span<const double> coefficients, std::span<double> grad);

/// ∇θ Σ_{i,t} c_{i,t} log π_θ(y_{i,t} | x_i, y_{i,<t}).
/// coefficients[i] must have one entry per response token of sequences[i].
std::vector<double> weighted_logprob_gradient(const PolicyModel& model,
                                              std::span<const Sequence> sequences,
                                              const std::vector<std::vector<double>>& coefficients);

using LossEvaluator = std::function<double(const PolicyModel&)>;

// Central differences, one parameter at a time.
std::vector<double> finite_diff_gradient(const PolicyModel& model, const LossEvaluator& loss,
                                         double step = 1e-5);

}  // namespace dgpo
