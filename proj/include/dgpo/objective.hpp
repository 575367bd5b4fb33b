#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dgpo/credit.hpp"
#include "dgpo/rollout.hpp"

namespace dgpo {

enum class Variant { dgpo, grpo_uniform, grpo_kl_penalized, dgpo_no_gate, dgpo_reverse_kl };

std::string to_string(Variant v);
Variant parse_variant(std::string_view name);  // throws InputError

// How a variant shapes the credit map it trains on.
CreditConfig credit_config_for(Variant v, const GateConfig& gate, double adv_epsilon,
                               StdEstimator estimator = StdEstimator::population);

struct SurrogateConfig {
  double clip_eps = 0.2;  // ε_c, in (0, 1)
  double kl_beta = 0.0;   // β, grpo_kl_penalized only
  Variant variant = Variant::dgpo;
  // Clamp for π_ref inside the KL penalty; 0 disables clamping (the penalty
  // is then +inf wherever π_ref has no mass under sampled support).
  double kl_floor = 1e-30;

  void validate() const;
};

/// Loss and its sensitivities. The trainer minimizes `loss`, which is the
/// negated clipped surrogate plus the KL penalty (when present):
///
///   loss = -(1/N) Σ_i (1/T_i) Σ_t min(ρ A, clip(ρ, 1-ε_c, 1+ε_c) A)
///          + β (1/N) Σ_i (1/T_i) Σ_t KL(π_θ(·|t) || π_ref(·|t))
struct LossReport {
  double loss = 0.0;
  double surrogate = 0.0;   // the un-negated clipped objective
  double kl_penalty = 0.0;  // β · mean KL
  std::vector<std::vector<double>> terms;  // min(ρA, clip(ρ)A) per token
  double clipped_fraction = 0.0;
  // ∂loss/∂log π_θ(y_t); zero where the clipped branch is selected.
  std::vector<std::vector<double>> sampled_coefficients;
  // ∂loss/∂logits_t of the KL penalty (empty for penalty-free variants).
  std::vector<std::vector<std::vector<double>>> logit_coefficients;
  std::vector<double> gradient;
  double gradient_norm = 0.0;
};

// Per-token importance ratios and advantages, indexed [sequence][token].
using TokenMatrix = std::vector<std::vector<double>>;

// Clipped DGPO surrogate over token-level advantages A_{i,t}. No KL term.
LossReport dgpo_loss(const TokenMatrix& ratios, const TokenMatrix& token_advantages, const SurrogateConfig& cfg);

// Clipped surrogate with A_i broadcast uniformly, minus β·KL(π_θ || π_ref) per
// token. policy_dists / ref_dists are [sequence][token][vocab].
LossReport kl_penalized_loss(const TokenMatrix& ratios, std::span<const double> sequence_advantages,
                             const std::vector<std::vector<std::vector<double>>>& policy_dists,
                             const std::vector<std::vector<std::vector<double>>>& ref_dists,
                             const SurrogateConfig& cfg);

struct BatchItem {
  const RolloutRecord* record = nullptr;
  const SequenceCredit* credit = nullptr;
};

/// Loss of the configured variant at the model's current parameters, and
/// (when requested) its exact gradient. Ratios are formed against the old
/// log-probabilities recorded in each rollout.
LossReport policy_gradient(const PolicyModel& model, std::span<const BatchItem> batch, const SurrogateConfig& cfg,
                           bool with_gradient = true);

double l2_norm(std::span<const double> v);

// ---------------------------------------------------------------------------
// Gradient stability probe

/// One-step scenario: a tabular policy over `vocab` tokens emits a response of
/// `length` tokens. At the first (exploratory) position the policy puts
/// `policy_mass` on token a* = 0 and spreads the rest uniformly; the reference
/// puts `ref_prob` on a* and spreads 1 - ref_prob uniformly. At the remaining
/// positions the policy is confident (0.9 on the emitted token) and the
/// reference matches it exactly. The response carries advantage `advantage`.
struct ProbeConfig {
  int vocab = 8;
  int length = 4;
  double policy_mass = 0.5;
  std::vector<double> ref_probs = {1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9, 1e-10, 1e-11, 1e-12};
  double tau = 0.5;
  double kappa = 1.0;
  double kl_beta = 0.1;
  double advantage = 1.0;
};

struct ProbeRow {
  double ref_prob = 0.0;
  double kl_grad_norm = 0.0;    // ‖∇ β·mean KL(π_θ || π_ref)‖
  double dgpo_grad_norm = 0.0;  // ‖∇ L^DGPO‖
  double w_max = 0.0;
  double d_value = 0.0;         // d at the exploratory position
  double dgpo_bound = 0.0;      // max w · |A| · max_t ‖∇ log π(y_t)‖
};

std::vector<ProbeRow> gradient_stability_probe(const ProbeConfig& cfg);

// Header: ref_prob,kl_grad_norm,dgpo_grad_norm,w_max,d_value
void write_probe_csv(std::ostream& os, std::span<const ProbeRow> rows);

}  // namespace dgpo
