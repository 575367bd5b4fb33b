#include "dgpo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "dgpo/error.hpp"

namespace dgpo {

void Vocab::validate() const {
  if (size < 2) throw InputError("vocab size must be >= 2, got " + std::to_string(size));
  if (eos < 0 || eos >= size) throw InputError("end-of-sequence id out of vocab range");
}

TokenDistribution::TokenDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw InputError("empty token distribution");
  double total = 0.0;
  for (double p : probs_) {
    if (!std::isfinite(p) || p < 0.0) throw InputError("token distribution entry not a probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw InputError("token distribution does not sum to 1 (sum=" + std::to_string(total) + ")");
  }
}

TokenDistribution TokenDistribution::uniform(int n) {
  return TokenDistribution(std::vector<double>(static_cast<std::size_t>(n), 1.0 / n));
}

TokenDistribution TokenDistribution::one_hot(int n, TokenId a) {
  std::vector<double> p(static_cast<std::size_t>(n), 0.0);
  p.at(static_cast<std::size_t>(a)) = 1.0;
  return TokenDistribution(std::move(p));
}

TokenDistribution TokenDistribution::from_log_probs(std::span<const double> log_probs) {
  std::vector<double> p(log_probs.size());
  std::transform(log_probs.begin(), log_probs.end(), p.begin(), [](double lp) { return std::exp(lp); });
  return TokenDistribution(std::move(p));
}

std::vector<TokenId> Sequence::context_at(std::size_t t) const {
  std::vector<TokenId> ctx;
  ctx.reserve(prompt.size() + t);
  ctx.insert(ctx.end(), prompt.begin(), prompt.end());
  ctx.insert(ctx.end(), response.begin(), response.begin() + static_cast<std::ptrdiff_t>(t));
  return ctx;
}

std::size_t ModelShape::param_count() const {
  const auto v = static_cast<std::size_t>(vocab.size);
  if (kind == ModelKind::tabular) return static_cast<std::size_t>(buckets) * v;
  const auto e = static_cast<std::size_t>(embed_dim);
  const auto h = static_cast<std::size_t>(hidden_width);
  const auto k = static_cast<std::size_t>(context_window);
  return (v + 1) * e + h * k * e + h + v * h + v;
}

void ModelShape::validate() const {
  vocab.validate();
  if (context_window < 1) throw InputError("context window must be >= 1");
  if (kind == ModelKind::tabular) {
    if (buckets < 1) throw InputError("tabular model needs at least one bucket");
  } else if (kind == ModelKind::mlp) {
    if (embed_dim < 1 || hidden_width < 1) throw InputError("mlp dimensions must be >= 1");
  } else {
    throw InputError("unknown model kind");
  }
}

PolicyModel::PolicyModel(ModelShape shape) : shape_(shape) {
  shape_.validate();
  params_.assign(shape_.param_count(), 0.0);
}

PolicyModel PolicyModel::tabular(Vocab vocab, int context_window, int buckets) {
  ModelShape s;
  s.kind = ModelKind::tabular;
  s.vocab = vocab;
  s.context_window = context_window;
  s.buckets = buckets;
  s.embed_dim = 0;
  s.hidden_width = 0;
  return PolicyModel(s);
}

PolicyModel PolicyModel::mlp(Vocab vocab, int context_window, int embed_dim, int hidden_width) {
  ModelShape s;
  s.kind = ModelKind::mlp;
  s.vocab = vocab;
  s.context_window = context_window;
  s.embed_dim = embed_dim;
  s.hidden_width = hidden_width;
  return PolicyModel(s);
}

void PolicyModel::set_params(std::span<const double> values) {
  if (values.size() != params_.size()) throw InputError("parameter count mismatch");
  std::copy(values.begin(), values.end(), params_.begin());
}

void PolicyModel::init_gaussian(std::uint64_t seed, double scale) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (double& p : params_) p = normal(rng);
}

void PolicyModel::fill_window(std::span<const TokenId> context, std::span<TokenId> window) const {
  const auto k = static_cast<std::size_t>(shape_.context_window);
  const std::size_t take = std::min(k, context.size());
  const std::size_t pad = k - take;
  std::fill(window.begin(), window.begin() + static_cast<std::ptrdiff_t>(pad), vocab().pad());
  const auto tail = context.subspan(context.size() - take);
  for (std::size_t j = 0; j < take; ++j) {
    const TokenId t = tail[j];
    if (!vocab().contains(t)) {
      throw InputError("token id " + std::to_string(t) + " out of vocab range [0," +
                       std::to_string(vocab().size) + ")");
    }
    window[pad + j] = t;
  }
}

std::size_t PolicyModel::tabular_row(std::span<const TokenId> context) const {
  std::vector<TokenId> window(static_cast<std::size_t>(shape_.context_window));
  fill_window(context, window);
  const auto base = static_cast<std::uint64_t>(vocab().size + 1);
  const auto buckets = static_cast<std::uint64_t>(shape_.buckets);
  std::uint64_t code = 0;
  for (TokenId t : window) code = (code * base + static_cast<std::uint64_t>(t)) % buckets;
  return static_cast<std::size_t>(code);
}

// Layout: E[(V+1) x e] | W1[h x k*e] | b1[h] | W2[V x h] | b2[V]
namespace {
struct MlpView {
  std::size_t v, e, h, k;
  std::size_t emb() const { return 0; }
  std::size_t w1() const { return (v + 1) * e; }
  std::size_t b1() const { return w1() + h * k * e; }
  std::size_t w2() const { return b1() + h; }
  std::size_t b2() const { return w2() + v * h; }
};

MlpView view_of(const ModelShape& s) {
  return {static_cast<std::size_t>(s.vocab.size), static_cast<std::size_t>(s.embed_dim),
          static_cast<std::size_t>(s.hidden_width), static_cast<std::size_t>(s.context_window)};
}
}  // namespace

void PolicyModel::mlp_hidden(std::span<const TokenId> window, std::span<double> hidden) const {
  const MlpView m = view_of(shape_);
  const double* p = params_.data();
  const std::size_t in = m.k * m.e;
  for (std::size_t i = 0; i < m.h; ++i) {
    const double* row = p + m.w1() + i * in;
    double acc = p[m.b1() + i];
    for (std::size_t j = 0; j < m.k; ++j) {
      const double* emb = p + m.emb() + static_cast<std::size_t>(window[j]) * m.e;
      const double* w = row + j * m.e;
      for (std::size_t c = 0; c < m.e; ++c) acc += w[c] * emb[c];
    }
    hidden[i] = std::tanh(acc);
  }
}

std::vector<double> PolicyModel::logits(std::span<const TokenId> context) const {
  const auto v = static_cast<std::size_t>(vocab().size);
  std::vector<double> z(v);
  if (shape_.kind == ModelKind::tabular) {
    const std::size_t row = tabular_row(context);
    std::copy_n(params_.begin() + static_cast<std::ptrdiff_t>(row * v), v, z.begin());
    return z;
  }
  const MlpView m = view_of(shape_);
  std::vector<TokenId> window(m.k);
  fill_window(context, window);
  std::vector<double> hidden(m.h);
  mlp_hidden(window, hidden);
  const double* p = params_.data();
  for (std::size_t a = 0; a < v; ++a) {
    const double* row = p + m.w2() + a * m.h;
    double acc = p[m.b2() + a];
    for (std::size_t i = 0; i < m.h; ++i) acc += row[i] * hidden[i];
    z[a] = acc;
  }
  return z;
}

std::vector<double> log_softmax(std::span<const double> z, double temperature) {
  if (!(temperature > 0.0)) throw InputError("temperature must be > 0");
  std::vector<double> out(z.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : z) mx = std::max(mx, x / temperature);
  double sum = 0.0;
  for (double x : z) sum += std::exp(x / temperature - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] / temperature - lse;
  return out;
}

std::vector<double> PolicyModel::log_probs(std::span<const TokenId> context, double temperature) const {
  return log_softmax(logits(context), temperature);
}

TokenDistribution PolicyModel::forward(std::span<const TokenId> context) const {
  return TokenDistribution::from_log_probs(log_probs(context));
}

void PolicyModel::backprop_logits(std::span<const TokenId> context, std::span<const double> dlogits,
                                  std::span<double> grad) const {
  const auto v = static_cast<std::size_t>(vocab().size);
  if (dlogits.size() != v || grad.size() != params_.size()) {
    throw InputError("backprop_logits: shape mismatch");
  }
  if (shape_.kind == ModelKind::tabular) {
    const std::size_t row = tabular_row(context);
    for (std::size_t a = 0; a < v; ++a) grad[row * v + a] += dlogits[a];
    return;
  }
  const MlpView m = view_of(shape_);
  std::vector<TokenId> window(m.k);
  fill_window(context, window);
  std::vector<double> hidden(m.h);
  mlp_hidden(window, hidden);
  const double* p = params_.data();

  std::vector<double> dhidden(m.h, 0.0);
  for (std::size_t a = 0; a < v; ++a) {
    const double g = dlogits[a];
    if (g == 0.0) continue;
    grad[m.b2() + a] += g;
    double* gw = grad.data() + m.w2() + a * m.h;
    const double* w = p + m.w2() + a * m.h;
    for (std::size_t i = 0; i < m.h; ++i) {
      gw[i] += g * hidden[i];
      dhidden[i] += g * w[i];
    }
  }
  const std::size_t in = m.k * m.e;
  std::vector<double> dinput(in, 0.0);
  for (std::size_t i = 0; i < m.h; ++i) {
    const double da = dhidden[i] * (1.0 - hidden[i] * hidden[i]);
    if (da == 0.0) continue;
    grad[m.b1() + i] += da;
    double* gw = grad.data() + m.w1() + i * in;
    const double* w = p + m.w1() + i * in;
    for (std::size_t j = 0; j < m.k; ++j) {
      const double* emb = p + m.emb() + static_cast<std::size_t>(window[j]) * m.e;
      for (std::size_t c = 0; c < m.e; ++c) {
        gw[j * m.e + c] += da * emb[c];
        dinput[j * m.e + c] += da * w[j * m.e + c];
      }
    }
  }
  for (std::size_t j = 0; j < m.k; ++j) {
    double* ge = grad.data() + m.emb() + static_cast<std::size_t>(window[j]) * m.e;
    for (std::size_t c = 0; c < m.e; ++c) ge[c] += dinput[j * m.e + c];
  }
}

TokenId sample_from_log_probs(std::span<const double> log_probs, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double cdf = 0.0;
  TokenId last_positive = 0;
  for (std::size_t a = 0; a < log_probs.size(); ++a) {
    const double p = std::exp(log_probs[a]);
    if (p > 0.0) last_positive = static_cast<TokenId>(a);
    cdf += p;
    if (u < cdf) return static_cast<TokenId>(a);
  }
  // Rounding left the cdf just short of 1.
  return last_positive;
}

SampledSequence sample_sequence(const PolicyModel& model, std::span<const TokenId> prompt, int max_len,
                                Rng& rng, const SampleOptions& options) {
  if (max_len < 1) throw InputError("max_len must be >= 1");
  SampledSequence out;
  out.sequence.prompt.assign(prompt.begin(), prompt.end());
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  for (int t = 0; t < max_len; ++t) {
    std::vector<double> lp = model.log_probs(context, options.temperature);
    const TokenId y = sample_from_log_probs(lp, rng);
    out.sequence.response.push_back(y);
    out.log_probs.push_back(lp[static_cast<std::size_t>(y)]);
    if (options.keep_distributions) out.step_log_probs.push_back(std::move(lp));
    context.push_back(y);
    if (y == model.vocab().eos) break;
  }
  return out;
}

void accumulate_logprob_gradient(const PolicyModel& model, const Sequence& sequence,
                                 std::span<const double> coefficients, std::span<double> grad) {
  if (coefficients.size() != sequence.length()) {
    throw InputError("coefficient count " + std::to_string(coefficients.size()) +
                     " does not match sequence length " + std::to_string(sequence.length()));
  }
  std::vector<TokenId> context(sequence.prompt);
  std::vector<double> dlogits(static_cast<std::size_t>(model.vocab().size));
  for (std::size_t t = 0; t < sequence.length(); ++t) {
    const double c = coefficients[t];
    if (c != 0.0) {
      // d/dz log softmax(z)[y] = onehot(y) - π
      const std::vector<double> lp = model.log_probs(context);
      for (std::size_t a = 0; a < dlogits.size(); ++a) dlogits[a] = -c * std::exp(lp[a]);
      dlogits[static_cast<std::size_t>(sequence.response[t])] += c;
      model.backprop_logits(context, dlogits, grad);
    }
    context.push_back(sequence.response[t]);
  }
}

std::vector<double> weighted_logprob_gradient(const PolicyModel& model, std::span<const Sequence> sequences,
                                              const std::vector<std::vector<double>>& coefficients) {
  if (coefficients.size() != sequences.size()) {
    throw InputError("coefficient rows do not match sequence count");
  }
  std::vector<double> grad(model.param_count(), 0.0);
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    accumulate_logprob_gradient(model, sequences[i], coefficients[i], grad);
  }
  return grad;
}

std::vector<double> finite_diff_gradient(const PolicyModel& model, const LossEvaluator& loss, double step) {
  if (!(step > 0.0)) throw InputError("finite-difference step must be > 0");
  PolicyModel probe = model;
  std::vector<double> grad(model.param_count());
  for (std::size_t j = 0; j < grad.size(); ++j) {
    const double orig = probe.params()[j];
    probe.params()[j] = orig + step;
    const double up = loss(probe);
    probe.params()[j] = orig - step;
    const double down = loss(probe);
    probe.params()[j] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("non-finite loss while differencing parameter " + std::to_string(j));
    }
    grad[j] = (up - down) / (2.0 * step);
  }
  return grad;
}

}  // namespace dgpo
