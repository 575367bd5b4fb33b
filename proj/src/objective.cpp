#include "dgpo/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dgpo/error.hpp"
#include "dgpo/parallel.hpp"

namespace dgpo {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::dgpo: return "dgpo";
    case Variant::grpo_uniform: return "grpo_uniform";
    case Variant::grpo_kl_penalized: return "grpo_kl_penalized";
    case Variant::dgpo_no_gate: return "dgpo_no_gate";
    case Variant::dgpo_reverse_kl: return "dgpo_reverse_kl";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::dgpo, Variant::grpo_uniform, Variant::grpo_kl_penalized, Variant::dgpo_no_gate,
                    Variant::dgpo_reverse_kl}) {
    if (to_string(v) == name) return v;
  }
  throw InputError("unknown variant '" + std::string(name) + "'");
}

CreditConfig credit_config_for(Variant v, const GateConfig& gate, double adv_epsilon, StdEstimator estimator) {
  CreditConfig c;
  c.gate = gate;
  c.adv_epsilon = adv_epsilon;
  c.estimator = estimator;
  switch (v) {
    case Variant::dgpo: break;
    case Variant::grpo_uniform:
    case Variant::grpo_kl_penalized: c.uniform_weights = true; break;
    case Variant::dgpo_no_gate: c.gate.kappa = 0.0; break;
    case Variant::dgpo_reverse_kl: c.gate.metric = DeviationMetric::reverse_kl_normalized; break;
  }
  return c;
}

void SurrogateConfig::validate() const {
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw InputError("clip_eps must lie in (0, 1)");
  if (!(kl_beta >= 0.0)) throw InputError("kl_beta must be >= 0");
  if (!(kl_floor >= 0.0)) throw InputError("kl_floor must be >= 0");
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

namespace {

// Fills terms / clipped fraction / sampled coefficients / surrogate for a
// clipped surrogate whose advantage at (i, t) is adv(i, t).
template <typename AdvFn>
void clipped_surrogate(const TokenMatrix& ratios, AdvFn adv, const SurrogateConfig& cfg, LossReport& r) {
  const std::size_t n = ratios.size();
  if (n == 0) throw InputError("empty batch");
  r.terms.resize(n);
  r.sampled_coefficients.resize(n);
  std::size_t clipped = 0;
  std::size_t total = 0;
  double objective = 0.0;
  const double lo = 1.0 - cfg.clip_eps;
  const double hi = 1.0 + cfg.clip_eps;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = ratios[i].size();
    if (len == 0) throw InputError("sequence " + std::to_string(i) + " has no tokens");
    const double scale = 1.0 / (static_cast<double>(n) * static_cast<double>(len));
    r.terms[i].resize(len);
    r.sampled_coefficients[i].resize(len);
    double seq = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      const double rho = ratios[i][t];
      const double a = adv(i, t);
      const double unclipped = rho * a;
      const double clipped_value = std::clamp(rho, lo, hi) * a;
      const bool clip_active = clipped_value < unclipped;
      r.terms[i][t] = clip_active ? clipped_value : unclipped;
      // d(ρA)/d log π = ρA; the clipped branch is constant in θ.
      r.sampled_coefficients[i][t] = clip_active ? 0.0 : -unclipped * scale;
      clipped += clip_active ? 1 : 0;
      seq += r.terms[i][t];
    }
    total += len;
    objective += seq / static_cast<double>(len);
  }
  r.surrogate = objective / static_cast<double>(n);
  r.clipped_fraction = static_cast<double>(clipped) / static_cast<double>(total);
}

}  // namespace

LossReport dgpo_loss(const TokenMatrix& ratios, const TokenMatrix& token_advantages, const SurrogateConfig& cfg) {
  cfg.validate();
  if (ratios.size() != token_advantages.size()) throw InputError("ratios and advantages disagree on batch size");
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    if (ratios[i].size() != token_advantages[i].size()) {
      throw InputError("sequence " + std::to_string(i) + ": ratios and advantages are misaligned");
    }
  }
  LossReport r;
  clipped_surrogate(ratios, [&](std::size_t i, std::size_t t) { return token_advantages[i][t]; }, cfg, r);
  r.loss = -r.surrogate;
  return r;
}

LossReport kl_penalized_loss(const TokenMatrix& ratios, std::span<const double> sequence_advantages,
                             const std::vector<std::vector<std::vector<double>>>& policy_dists,
                             const std::vector<std::vector<std::vector<double>>>& ref_dists,
                             const SurrogateConfig& cfg) {
  cfg.validate();
  const std::size_t n = ratios.size();
  if (sequence_advantages.size() != n || policy_dists.size() != n || ref_dists.size() != n) {
    throw InputError("kl_penalized_loss inputs disagree on batch size");
  }
  LossReport r;
  clipped_surrogate(ratios, [&](std::size_t i, std::size_t) { return sequence_advantages[i]; }, cfg, r);

  r.logit_coefficients.resize(n);
  double penalty = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = ratios[i].size();
    if (policy_dists[i].size() != len || ref_dists[i].size() != len) {
      throw InputError("sequence " + std::to_string(i) + ": distributions misaligned with tokens");
    }
    const double scale = cfg.kl_beta / (static_cast<double>(n) * static_cast<double>(len));
    r.logit_coefficients[i].resize(len);
    double seq = 0.0;
    for (std::size_t t = 0; t < len; ++t) {
      const auto& p = policy_dists[i][t];
      const auto& q = ref_dists[i][t];
      if (p.size() != q.size()) throw InputError("policy/reference vocab mismatch");
      // KL = Σ p_b L_b with L_b = log(p_b / q_b); ∂KL/∂z_b = p_b (L_b - KL).
      std::vector<double> log_ratio(p.size(), 0.0);
      double kl = 0.0;
      for (std::size_t b = 0; b < p.size(); ++b) {
        if (p[b] == 0.0) continue;
        const double qb = cfg.kl_floor > 0.0 ? std::max(q[b], cfg.kl_floor) : q[b];
        log_ratio[b] = std::log(p[b]) - std::log(qb);
        kl += p[b] * log_ratio[b];
      }
      auto& coef = r.logit_coefficients[i][t];
      coef.assign(p.size(), 0.0);
      if (cfg.kl_beta != 0.0) {
        for (std::size_t b = 0; b < p.size(); ++b) {
          if (p[b] != 0.0) coef[b] = scale * p[b] * (log_ratio[b] - kl);
        }
      }
      seq += kl;
    }
    penalty += seq / static_cast<double>(len);
  }
  r.kl_penalty = cfg.kl_beta == 0.0 ? 0.0 : cfg.kl_beta * penalty / static_cast<double>(n);
  r.loss = -r.surrogate + r.kl_penalty;
  return r;
}

LossReport policy_gradient(const PolicyModel& model, std::span<const BatchItem> batch, const SurrogateConfig& cfg,
                           bool with_gradient) {
  cfg.validate();
  const std::size_t n = batch.size();
  if (n == 0) throw InputError("empty batch");
  const bool kl_variant = cfg.variant == Variant::grpo_kl_penalized;

  // Current log-probabilities at every token; computed per item in parallel.
  std::vector<std::vector<std::vector<double>>> log_probs(n);
  TokenMatrix ratios(n);
  parallel_for(n, [&](std::size_t i) {
    const RolloutRecord& rec = *batch[i].record;
    const std::size_t len = rec.length();
    if (rec.old_log_probs.size() != len) throw InputError("rollout old log-probs misaligned with tokens");
    std::vector<TokenId> context(rec.sequence.prompt);
    log_probs[i].resize(len);
    ratios[i].resize(len);
    for (std::size_t t = 0; t < len; ++t) {
      log_probs[i][t] = model.log_probs(context);
      const auto y = static_cast<std::size_t>(rec.sequence.response[t]);
      ratios[i][t] = std::exp(log_probs[i][t][y] - rec.old_log_probs[t]);
      context.push_back(rec.sequence.response[t]);
    }
  });

  LossReport report;
  if (kl_variant) {
    std::vector<double> seq_adv(n);
    std::vector<std::vector<std::vector<double>>> pol(n), ref(n);
    for (std::size_t i = 0; i < n; ++i) {
      seq_adv[i] = batch[i].credit->sequence_advantage;
      ref[i] = batch[i].record->ref_dists;
      pol[i].resize(log_probs[i].size());
      for (std::size_t t = 0; t < log_probs[i].size(); ++t) {
        pol[i][t].resize(log_probs[i][t].size());
        std::transform(log_probs[i][t].begin(), log_probs[i][t].end(), pol[i][t].begin(),
                       [](double lp) { return std::exp(lp); });
      }
    }
    report = kl_penalized_loss(ratios, seq_adv, pol, ref, cfg);
  } else {
    TokenMatrix adv(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (batch[i].credit->advantages.size() != ratios[i].size()) {
        throw InputError("credit map misaligned with rollout " + std::to_string(i));
      }
      adv[i] = batch[i].credit->advantages;
    }
    report = dgpo_loss(ratios, adv, cfg);
  }
  if (!with_gradient) return report;

  // Fixed chunking keeps the reduction order independent of the thread count.
  const std::size_t chunks = std::min<std::size_t>(n, 8);
  std::vector<std::vector<double>> partial(chunks, std::vector<double>(model.param_count(), 0.0));
  const std::size_t vocab = static_cast<std::size_t>(model.vocab().size);
  parallel_for(chunks, [&](std::size_t c) {
    std::vector<double> dlogits(vocab);
    for (std::size_t i = c; i < n; i += chunks) {
      const RolloutRecord& rec = *batch[i].record;
      std::vector<TokenId> context(rec.sequence.prompt);
      for (std::size_t t = 0; t < rec.length(); ++t) {
        const double cs = report.sampled_coefficients[i][t];
        const auto y = static_cast<std::size_t>(rec.sequence.response[t]);
        bool any = cs != 0.0;
        for (std::size_t b = 0; b < vocab; ++b) dlogits[b] = -cs * std::exp(log_probs[i][t][b]);
        dlogits[y] += cs;
        if (kl_variant) {
          const auto& lc = report.logit_coefficients[i][t];
          for (std::size_t b = 0; b < vocab; ++b) {
            dlogits[b] += lc[b];
            any = any || lc[b] != 0.0;
          }
        }
        for (std::size_t b = 0; b < vocab; ++b) {
          if (!std::isfinite(dlogits[b])) {
            throw NumericError("non-finite gradient at sequence " + std::to_string(i) + ", token " +
                               std::to_string(t) + ", vocab entry " + std::to_string(b));
          }
        }
        if (any) model.backprop_logits(context, dlogits, partial[c]);
        context.push_back(rec.sequence.response[t]);
      }
    }
  });
  report.gradient.assign(model.param_count(), 0.0);
  for (const auto& p : partial) {
    for (std::size_t j = 0; j < p.size(); ++j) report.gradient[j] += p[j];
  }
  report.gradient_norm = l2_norm(report.gradient);
  if (!std::isfinite(report.gradient_norm)) throw NumericError("non-finite gradient norm");
  return report;
}

}  // namespace dgpo
