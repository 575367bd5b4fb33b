#include <cmath>
#include <ostream>

#include "dgpo/divergence.hpp"
#include "dgpo/error.hpp"
#include "dgpo/objective.hpp"

namespace dgpo {
namespace {

// Logits that give `mass` to `target` and spread 1 - mass uniformly.
void set_row(PolicyModel& model, std::size_t row, int vocab, TokenId target, double mass) {
  const double rest = (1.0 - mass) / static_cast<double>(vocab - 1);
  auto p = model.params().subspan(row * static_cast<std::size_t>(vocab), static_cast<std::size_t>(vocab));
  for (int a = 0; a < vocab; ++a) p[static_cast<std::size_t>(a)] = std::log(a == target ? mass : rest);
}

}  // namespace

std::vector<ProbeRow> gradient_stability_probe(const ProbeConfig& cfg) {
  if (cfg.vocab < 3 || cfg.length < 2 || cfg.length > cfg.vocab - 1) {
    throw InputError("probe needs vocab >= 3 and 2 <= length < vocab");
  }
  if (!(cfg.policy_mass > 0.0 && cfg.policy_mass < 1.0)) throw InputError("probe policy_mass must be in (0, 1)");

  // Window-1 tabular policy with one exact row per previous token. The prompt
  // is the last token id; the response is 0, 1, ..., length-1, so every
  // position reads its own row.
  const Vocab vocab{cfg.vocab, static_cast<TokenId>(cfg.vocab - 1)};
  PolicyModel model = PolicyModel::tabular(vocab, 1, cfg.vocab + 1);
  RolloutRecord rec;
  rec.sequence.prompt = {static_cast<TokenId>(cfg.vocab - 1)};
  for (int t = 0; t < cfg.length; ++t) rec.sequence.response.push_back(static_cast<TokenId>(t));

  const TokenId explored = 0;
  for (int t = 0; t < cfg.length; ++t) {
    const auto ctx = rec.sequence.context_at(static_cast<std::size_t>(t));
    const double mass = t == 0 ? cfg.policy_mass : 0.9;
    set_row(model, model.tabular_row(ctx), cfg.vocab, rec.sequence.response[static_cast<std::size_t>(t)], mass);
  }
  for (std::size_t t = 0; t < rec.length(); ++t) {
    const auto lp = model.log_probs(rec.sequence.context_at(t));
    rec.old_log_probs.push_back(lp[static_cast<std::size_t>(rec.sequence.response[t])]);
    std::vector<double> p(lp.size());
    for (std::size_t a = 0; a < lp.size(); ++a) p[a] = std::exp(lp[a]);
    rec.old_dists.push_back(p);
    rec.ref_dists.push_back(p);
  }

  // max_t ‖∇ log π(y_t)‖ for the gradient-norm bound.
  double max_score_norm = 0.0;
  for (std::size_t t = 0; t < rec.length(); ++t) {
    std::vector<double> coef(rec.length(), 0.0);
    coef[t] = 1.0;
    std::vector<double> g(model.param_count(), 0.0);
    accumulate_logprob_gradient(model, rec.sequence, coef, g);
    max_score_norm = std::max(max_score_norm, l2_norm(g));
  }

  std::vector<ProbeRow> rows;
  for (double r : cfg.ref_probs) {
    if (!(r > 0.0 && r < 1.0)) throw InputError("probe ref_prob must be in (0, 1)");
    std::vector<double> ref(static_cast<std::size_t>(cfg.vocab), (1.0 - r) / static_cast<double>(cfg.vocab - 1));
    ref[static_cast<std::size_t>(explored)] = r;
    rec.ref_dists[0] = ref;

    std::vector<double> dev(rec.length()), ent(rec.length());
    for (std::size_t t = 0; t < rec.length(); ++t) {
      const TokenDistribution p(rec.old_dists[t]);
      dev[t] = squared_hellinger(p, TokenDistribution(rec.ref_dists[t])).value;
      ent[t] = shannon_entropy(p).normalized;
    }
    SequenceCredit credit;
    credit.tokens = rec.sequence.response;
    credit.deviations = dev;
    credit.entropies = ent;
    credit.scores = gated_scores(dev, ent, cfg.kappa);
    credit.weights = reallocation_weights(credit.scores, cfg.tau);
    credit.sequence_advantage = cfg.advantage;
    for (double w : credit.weights) credit.advantages.push_back(cfg.advantage * w);

    const BatchItem item{&rec, &credit};
    SurrogateConfig dgpo_cfg;
    dgpo_cfg.variant = Variant::dgpo;
    const LossReport dg = policy_gradient(model, std::span(&item, 1), dgpo_cfg);

    // Penalty alone: zero advantage isolates β ∇ KL.
    SequenceCredit penalty_only = credit;
    penalty_only.sequence_advantage = 0.0;
    const BatchItem kl_item{&rec, &penalty_only};
    SurrogateConfig kl_cfg;
    kl_cfg.variant = Variant::grpo_kl_penalized;
    kl_cfg.kl_beta = cfg.kl_beta;
    const LossReport kl = policy_gradient(model, std::span(&kl_item, 1), kl_cfg);

    ProbeRow row;
    row.ref_prob = r;
    row.kl_grad_norm = kl.gradient_norm;
    row.dgpo_grad_norm = dg.gradient_norm;
    row.w_max = *std::max_element(credit.weights.begin(), credit.weights.end());
    row.d_value = dev[0];
    row.dgpo_bound = row.w_max * std::abs(cfg.advantage) * max_score_norm;
    rows.push_back(row);
  }
  return rows;
}

void write_probe_csv(std::ostream& os, std::span<const ProbeRow> rows) {
  os << "ref_prob,kl_grad_norm,dgpo_grad_norm,w_max,d_value\n";
  os.precision(17);
  for (const ProbeRow& r : rows) {
    os << r.ref_prob << ',' << r.kl_grad_norm << ',' << r.dgpo_grad_norm << ',' << r.w_max << ',' << r.d_value
       << '\n';
  }
}

}  // namespace dgpo
