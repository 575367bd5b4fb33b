#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dgpo/error.hpp"
#include "dgpo/parallel.hpp"
#include "helpers.hpp"

using namespace dgpo;
using testing::relative_error;

namespace {

SurrogateConfig surrogate_for(Variant v, double beta = 0.0) {
  SurrogateConfig s;
  s.variant = v;
  s.kl_beta = v == Variant::grpo_kl_penalized ? beta : 0.0;
  return s;
}

CreditConfig credit_for(Variant v, double tau = 0.5) {
  GateConfig g;
  g.tau = tau;
  return credit_config_for(v, g, 1e-6);
}

double loss_at(const PolicyModel& m, const std::vector<BatchItem>& items, const SurrogateConfig& cfg) {
  return policy_gradient(m, items, cfg, false).loss;
}

}  // namespace

TEST_CASE("variant names round trip") {
  for (Variant v : {Variant::dgpo, Variant::grpo_uniform, Variant::grpo_kl_penalized, Variant::dgpo_no_gate,
                    Variant::dgpo_reverse_kl}) {
    CHECK(parse_variant(to_string(v)) == v);
  }
  CHECK_THROWS_AS(parse_variant("ppo"), InputError);
}

TEST_CASE("clipped surrogate") {
  SurrogateConfig cfg;
  SUBCASE("zero advantages") {
    const auto r = dgpo_loss({{1.3, 0.7}, {1.0}}, {{0.0, 0.0}, {0.0}}, cfg);
    CHECK(r.loss == 0.0);
    for (const auto& row : r.sampled_coefficients) {
      for (double c : row) CHECK(c == 0.0);
    }
  }
  SUBCASE("unit ratios give the mean sequence advantage") {
    const std::vector<double> seq_adv{1.5, -0.5};
    const auto w0 = reallocation_weights(std::vector<double>{0.9, 0.1, 0.4}, 0.5);
    const auto w1 = reallocation_weights(std::vector<double>{0.2, 0.6}, 0.5);
    TokenMatrix adv{{}, {}};
    for (double w : w0) adv[0].push_back(seq_adv[0] * w);
    for (double w : w1) adv[1].push_back(seq_adv[1] * w);
    const auto r = dgpo_loss({{1, 1, 1}, {1, 1}}, adv, cfg);
    CHECK(r.surrogate == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(r.loss == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK(r.clipped_fraction == 0.0);
  }
  SUBCASE("clip active on a single token") {
    const auto r = dgpo_loss({{1.5}}, {{1.0}}, cfg);
    CHECK(r.terms[0][0] == doctest::Approx(1.2).epsilon(1e-15));
    CHECK(r.clipped_fraction == 1.0);
    CHECK(r.sampled_coefficients[0][0] == 0.0);
  }
  SUBCASE("negative advantage clips from below") {
    const auto r = dgpo_loss({{0.5, 1.5}}, {{-1.0, -1.0}}, cfg);
    CHECK(r.terms[0][0] == doctest::Approx(-0.8));
    CHECK(r.terms[0][1] == doctest::Approx(-1.5));
    CHECK(r.clipped_fraction == 0.5);
  }
  SUBCASE("terms equal min(rho A, clip(rho) A) on random inputs") {
    Rng rng(4);
    std::uniform_real_distribution<double> rho(0.3, 2.0), a(-2.0, 2.0);
    for (int trial = 0; trial < 200; ++trial) {
      TokenMatrix ratios(3), adv(3);
      for (std::size_t i = 0; i < 3; ++i) {
        for (int t = 0; t < 5; ++t) {
          ratios[i].push_back(rho(rng));
          adv[i].push_back(a(rng));
        }
      }
      const auto r = dgpo_loss(ratios, adv, cfg);
      std::size_t clipped = 0;
      for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t t = 0; t < 5; ++t) {
          const double x = ratios[i][t] * adv[i][t];
          const double y = std::clamp(ratios[i][t], 0.8, 1.2) * adv[i][t];
          CHECK(r.terms[i][t] == std::min(x, y));
          clipped += y < x ? 1 : 0;
        }
      }
      CHECK(r.clipped_fraction == doctest::Approx(clipped / 15.0));
    }
  }
}

TEST_CASE("kl penalized loss") {
  SurrogateConfig cfg;
  cfg.variant = Variant::grpo_kl_penalized;
  SUBCASE("zero beta equals the uniform surrogate") {
    cfg.kl_beta = 0.0;
    const TokenMatrix ratios{{1.1, 0.9}, {1.3}};
    const std::vector<double> seq{0.7, -0.7};
    const std::vector<std::vector<std::vector<double>>> p{{{0.5, 0.5}, {0.2, 0.8}}, {{0.9, 0.1}}};
    const std::vector<std::vector<std::vector<double>>> q{{{0.1, 0.9}, {0.6, 0.4}}, {{0.3, 0.7}}};
    const auto a = kl_penalized_loss(ratios, seq, p, q, cfg);
    const auto b = dgpo_loss(ratios, {{0.7, 0.7}, {-0.7}}, cfg);
    CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-15));
  }
  SUBCASE("policy equal to reference adds no penalty") {
    cfg.kl_beta = 0.5;
    const std::vector<std::vector<std::vector<double>>> p{{{0.3, 0.7}, {0.25, 0.75}}};
    const auto r = kl_penalized_loss({{1.0, 1.0}}, std::vector<double>{0.4}, p, p, cfg);
    CHECK(r.kl_penalty == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("near-disjoint support gives a large penalty") {
    // β KL with π_θ = [1-1e-9, 1e-9], π_ref = [1e-12, 1-1e-12].
    cfg.kl_beta = 0.1;
    const std::vector<std::vector<std::vector<double>>> p{{{1.0 - 1e-9, 1e-9}}};
    const std::vector<std::vector<std::vector<double>>> q{{{1e-12, 1.0 - 1e-12}}};
    const auto r = kl_penalized_loss({{1.0}}, std::vector<double>{0.0}, p, q, cfg);
    CHECK(r.kl_penalty == doctest::Approx(2.763102106657426).epsilon(1e-9));
    CHECK(r.loss == doctest::Approx(2.763102106657426).epsilon(1e-9));
  }
}

TEST_CASE("policy gradient matches finite differences") {
  const Variant variants[] = {Variant::dgpo, Variant::grpo_uniform, Variant::grpo_kl_penalized,
                              Variant::dgpo_no_gate, Variant::dgpo_reverse_kl};
  for (Variant v : variants) {
    CAPTURE(to_string(v));
    for (int seed = 0; seed < 20; ++seed) {
      Rng rng(static_cast<std::uint64_t>(seed) * 7 + 1);
      const bool mlp = seed % 2 == 1;
      const PolicyModel old_policy = testing::small_model(mlp, 1000 + static_cast<std::uint64_t>(seed));
      const PolicyModel reference = testing::small_model(mlp, 2000 + static_cast<std::uint64_t>(seed));
      PolicyModel current = old_policy;
      testing::perturb(current, 0.05, rng);
      const auto batch = testing::random_batch(old_policy, reference, 2, 3, 6, credit_for(v), rng);
      const auto items = batch.items();
      const SurrogateConfig cfg = surrogate_for(v, 0.3);
      const auto analytic = policy_gradient(current, items, cfg);
      const auto numeric = finite_diff_gradient(current, [&](const PolicyModel& m) { return loss_at(m, items, cfg); });
      if (analytic.gradient_norm > 1e-8) CHECK(relative_error(analytic.gradient, numeric) <= 1e-4);
    }
  }
}

TEST_CASE("policy gradient basics") {
  Rng rng(12);
  const PolicyModel m = testing::small_model(true, 44);
  auto batch = testing::random_batch(m, m, 2, 4, 6, credit_for(Variant::dgpo), rng);
  SUBCASE("zero advantages give a zero gradient") {
    for (auto& cm : batch.credit) {
      for (auto& c : cm) std::fill(c.advantages.begin(), c.advantages.end(), 0.0);
    }
    const auto r = policy_gradient(m, batch.items(), SurrogateConfig{});
    CHECK(r.loss == 0.0);
    CHECK(r.gradient_norm == 0.0);
  }
  SUBCASE("ratios are exactly one at the snapshot") {
    const auto r = policy_gradient(m, batch.items(), SurrogateConfig{});
    CHECK(r.clipped_fraction == 0.0);
    double expected = 0.0;
    std::size_t n = 0;
    for (const auto& cm : batch.credit) {
      for (const auto& c : cm) {
        expected += c.sequence_advantage;
        ++n;
      }
    }
    CHECK(r.surrogate == doctest::Approx(expected / static_cast<double>(n)).epsilon(1e-12));
  }
  SUBCASE("thread count does not change the gradient") {
    set_thread_count(1);
    const auto a = policy_gradient(m, batch.items(), SurrogateConfig{});
    set_thread_count(4);
    const auto b = policy_gradient(m, batch.items(), SurrogateConfig{});
    set_thread_count(0);
    CHECK(a.gradient == b.gradient);
  }
}

TEST_CASE("dgpo gradient norm bound at the snapshot") {
  for (int seed = 0; seed < 50; ++seed) {
    Rng rng(static_cast<std::uint64_t>(seed) + 300);
    const PolicyModel m = testing::small_model(seed % 2 == 0, 3000 + static_cast<std::uint64_t>(seed));
    const PolicyModel ref = testing::small_model(seed % 2 == 0, 4000 + static_cast<std::uint64_t>(seed), 2.0);
    const auto batch = testing::random_batch(m, ref, 2, 4, 6, credit_for(Variant::dgpo, 0.1), rng);
    const auto r = policy_gradient(m, batch.items(), SurrogateConfig{});
    double max_w = 0.0, max_a = 0.0, max_score = 0.0;
    for (std::size_t g = 0; g < batch.groups.size(); ++g) {
      for (std::size_t i = 0; i < batch.groups[g].records.size(); ++i) {
        const auto& c = batch.credit[g][i];
        max_w = std::max(max_w, *std::max_element(c.weights.begin(), c.weights.end()));
        max_a = std::max(max_a, std::abs(c.sequence_advantage));
        const auto& seq = batch.groups[g].records[i].sequence;
        for (std::size_t t = 0; t < seq.length(); ++t) {
          std::vector<double> coef(seq.length(), 0.0);
          coef[t] = 1.0;
          std::vector<double> grad(m.param_count(), 0.0);
          accumulate_logprob_gradient(m, seq, coef, grad);
          max_score = std::max(max_score, l2_norm(grad));
        }
      }
    }
    CHECK(r.gradient_norm <= max_w * max_a * max_score * (1 + 1e-12));
  }
}

TEST_CASE("zero reference mass on sampled tokens") {
  Rng rng(6);
  const PolicyModel m = testing::small_model(false, 55);
  auto batch = testing::random_batch(m, m, 1, 4, 5, credit_for(Variant::dgpo), rng);
  for (auto& r : batch.groups[0].records) {
    for (std::size_t t = 0; t < r.length(); ++t) {
      const auto y = static_cast<std::size_t>(r.sequence.response[t]);
      auto& q = r.ref_dists[t];
      q.assign(q.size(), 0.0);
      q[(y + 1) % q.size()] = 1.0;
    }
  }
  batch.credit[0] = build_credit_map(batch.groups[0], credit_for(Variant::dgpo));
  const auto items = batch.items();

  const auto dg = policy_gradient(m, items, SurrogateConfig{});
  CHECK(std::isfinite(dg.loss));
  CHECK(std::isfinite(dg.gradient_norm));

  SurrogateConfig floored = surrogate_for(Variant::grpo_kl_penalized, 0.1);
  const auto kl = policy_gradient(m, items, floored);
  CHECK(std::isfinite(kl.loss));
  CHECK(kl.kl_penalty > 1.0);
  CHECK(std::isfinite(kl.gradient_norm));

  SurrogateConfig unfloored = floored;
  unfloored.kl_floor = 0.0;
  CHECK(policy_gradient(m, items, unfloored, false).loss == std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(policy_gradient(m, items, unfloored), NumericError);
}

TEST_CASE("gradient stability probe") {
  const auto rows = gradient_stability_probe(ProbeConfig{});
  REQUIRE(rows.size() == 11);
  CHECK(rows.front().ref_prob == 1e-2);
  CHECK(rows.back().ref_prob == 1e-12);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].kl_grad_norm > rows[i - 1].kl_grad_norm);
    CHECK(rows[i].d_value >= rows[i - 1].d_value);
  }
  CHECK(rows.back().kl_grad_norm >= 5 * rows.front().kl_grad_norm);
  CHECK(rows.back().dgpo_grad_norm <= 2 * rows.front().dgpo_grad_norm);
  for (const auto& r : rows) {
    CHECK(std::isfinite(r.dgpo_grad_norm));
    CHECK(r.d_value <= 1.0);
    CHECK(r.dgpo_grad_norm <= r.dgpo_bound * (1 + 1e-12));
  }
  std::ostringstream os;
  write_probe_csv(os, rows);
  const std::string csv = os.str();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 12);

  SUBCASE("matched reference leaves no deviation") {
    ProbeConfig pc;
    pc.ref_probs = {pc.policy_mass};
    const auto r = gradient_stability_probe(pc);
    CHECK(r[0].d_value == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r[0].kl_grad_norm < 1e-12);
  }
  SUBCASE("a concentrated policy drives d toward 1") {
    ProbeConfig pc;
    pc.policy_mass = 1.0 - 1e-9;
    const auto r = gradient_stability_probe(pc);
    for (std::size_t i = 1; i < r.size(); ++i) CHECK(r[i].d_value > r[i - 1].d_value);
    CHECK(r.back().d_value <= 1.0);
    CHECK(r.back().d_value > 0.9999);
  }
}

TEST_CASE("dgpo gradient on a two-parameter table is the weighted score composition") {
  PolicyModel m = PolicyModel::tabular({2, 1}, 1, 1);
  REQUIRE(m.param_count() == 2);
  m.params()[0] = 0.3;
  m.params()[1] = -0.2;
  Rng rng(17);
  const PolicyModel ref = [] {
    PolicyModel r = PolicyModel::tabular({2, 1}, 1, 1);
    r.params()[0] = -0.5;
    return r;
  }();
  const auto batch = testing::random_batch(m, ref, 1, 4, 5, credit_for(Variant::dgpo), rng);
  const auto items = batch.items();
  const auto r = policy_gradient(m, items, SurrogateConfig{});
  // At the snapshot every ratio is 1, so the loss gradient is
  // -(1/G) Σ_i (1/T_i) Σ_t A_{i,t} ∇log π(y_t).
  std::vector<Sequence> seqs;
  std::vector<std::vector<double>> coef;
  const double G = static_cast<double>(items.size());
  for (const BatchItem& it : items) {
    seqs.push_back(it.record->sequence);
    std::vector<double> c;
    for (double a : it.credit->advantages) c.push_back(-a / (G * static_cast<double>(it.record->length())));
    coef.push_back(c);
  }
  const auto expected = weighted_logprob_gradient(m, seqs, coef);
  REQUIRE(l2_norm(expected) > 1e-8);
  CHECK(relative_error(r.gradient, expected) <= 1e-4);
}

TEST_CASE("a vanishing reference mass inflates the kl gradient but not dgpo") {
  Rng rng(23);
  const PolicyModel m = testing::small_model(true, 808);
  REQUIRE(m.param_count() >= 150);
  auto batch = testing::random_batch(m, m, 2, 4, 6, credit_for(Variant::dgpo), rng);
  for (auto& g : batch.groups) {
    for (auto& r : g.records) {
      // The first response token is the explored one; the reference all but
      // rules it out.
      auto& q = r.ref_dists[0];
      const auto y = static_cast<std::size_t>(r.sequence.response[0]);
      const double rest = 1.0 - q[y];
      for (std::size_t a = 0; a < q.size(); ++a) q[a] = a == y ? 1e-12 : q[a] * (1.0 - 1e-12) / rest;
    }
  }
  for (std::size_t g = 0; g < batch.groups.size(); ++g) {
    batch.credit[g] = build_credit_map(batch.groups[g], credit_for(Variant::dgpo));
  }
  const auto items = batch.items();
  const double dgpo = policy_gradient(m, items, SurrogateConfig{}).gradient_norm;
  CHECK(std::isfinite(dgpo));
  // The factor scales with β; at β = 1 the penalty dominates.
  double previous = 0.0;
  for (double beta : {0.1, 0.3, 0.5, 1.0}) {
    const double kl = policy_gradient(m, items, surrogate_for(Variant::grpo_kl_penalized, beta)).gradient_norm;
    CHECK(kl > previous);
    previous = kl;
  }
  CHECK(previous >= 5.0 * dgpo);
}
