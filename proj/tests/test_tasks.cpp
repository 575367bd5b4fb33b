#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "dgpo/error.hpp"
#include "dgpo/evaluate.hpp"
#include "dgpo/tasks.hpp"

using namespace dgpo;

namespace {

TaskFamily chain(int d, Split split = Split::train) {
  TaskFamily f;
  f.difficulty = d;
  f.split = split;
  return f;
}

// Window-3 table for modular_chain with D = 1. The first response token is
// correct with probability `p_correct`; otherwise it is off by one, and the
// rest of the response copies whatever was emitted.
PolicyModel chain_table(double p_correct) {
  const TaskFamily f = chain(1);
  PolicyModel m = PolicyModel::tabular(f.vocab, 3, 17 * 17 * 17);
  const auto V = static_cast<std::size_t>(f.vocab.size);
  for (double& x : m.params()) x = -60.0;
  auto set = [&](std::vector<TokenId> ctx, TokenId tok, double logit) {
    m.params()[m.tabular_row(ctx) * V + static_cast<std::size_t>(tok)] = logit;
  };
  const double odds = std::log(p_correct / (1.0 - p_correct));
  for (TokenId a = 0; a < 10; ++a) {
    for (TokenId b = 0; b < 10; ++b) {
      const auto s = static_cast<TokenId>((a + b) % 10);
      set({b, f.sep(), a}, s, p_correct == 1.0 ? 0.0 : odds);
      if (p_correct < 1.0) set({b, f.sep(), a}, static_cast<TokenId>((s + 1) % 10), 0.0);
      set({f.sep(), a, b}, f.ans(), 0.0);
      set({a, b, f.ans()}, b, 0.0);
    }
    set({a, f.ans(), a}, f.eos(), 0.0);
  }
  return m;
}

}  // namespace

TEST_CASE("modular chain encoding") {
  const TaskFamily f = chain(3);
  CHECK(f.bos() == 12);
  CHECK(f.sep() == 13);
  CHECK(f.ans() == 14);
  CHECK(f.eos() == 15);
  CHECK(f.response_length() == 6);
  CHECK(f.required_window() == 5);
  const auto inst = generate_instances(chain(1), 50, 4);
  for (const TaskInstance& i : inst) {
    REQUIRE(i.prompt.size() == 4);
    const TokenId s = static_cast<TokenId>((i.prompt[3] + i.prompt[1]) % 10);
    CHECK(i.prompt[0] == 12);
    CHECK(i.prompt[2] == 13);
    CHECK(i.solution == std::vector<TokenId>{s, 14, s, 15});
    CHECK(i.answer == std::vector<TokenId>{s});
  }
}

TEST_CASE("instance generation is deterministic per seed") {
  const auto a = generate_instances(chain(3), 64, 11);
  const auto b = generate_instances(chain(3), 64, 11);
  const auto c = generate_instances(chain(3), 64, 12);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].prompt == b[i].prompt);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs |= a[i].prompt != c[i].prompt;
  CHECK(differs);
}

TEST_CASE("verifier") {
  for (FamilyName name : {FamilyName::modular_chain, FamilyName::copy_reverse, FamilyName::sorted_emit}) {
    TaskFamily f = chain(3);
    f.name = name;
    const auto inst = generate_instances(f, 1000, 5);
    Rng rng(1);
    for (const TaskInstance& i : inst) {
      CHECK(verify(i, i.solution) == 1.0);
      CHECK(verify(i, demonstration(f, i, true, rng)) == 1.0);
      CHECK(verify(i, demonstration(f, i, false, rng)) == 0.0);
      CHECK(verify(i, std::vector<TokenId>{}) == 0.0);
    }
  }
  const auto i = generate_instances(chain(1), 1, 2).front();
  const TokenId s = i.answer[0];
  const auto wrong = static_cast<TokenId>((s + 3) % 10);
  CHECK(verify(i, std::vector<TokenId>{wrong, 14, wrong, 15}) == 0.0);
  CHECK(verify(i, std::vector<TokenId>{s, 14, wrong, 15}) == 0.0);
  CHECK(verify(i, std::vector<TokenId>{wrong, 14, s, 15}) == 1.0);
  CHECK(verify(i, std::vector<TokenId>{s, 14, s}) == 1.0);
  CHECK(verify(i, std::vector<TokenId>{s, s, 15}) == 0.0);
  CHECK(verify(i, std::vector<TokenId>{14, s, s, 15}) == 0.0);
  CHECK(!answer_span(std::vector<TokenId>{1, 2, 15}, 14, 15));
}

TEST_CASE("train and eval splits are disjoint") {
  for (int d : {1, 2, 3}) {
    std::set<std::vector<TokenId>> train, eval;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      for (const auto& i : generate_instances(chain(d, Split::train), 300, seed)) train.insert(i.prompt);
      for (const auto& i : generate_instances(chain(d, Split::eval), 300, seed)) eval.insert(i.prompt);
    }
    for (const auto& p : eval) CHECK(train.count(p) == 0);
    for (const auto& p : eval) CHECK(split_of(chain(d), p) == Split::eval);
  }
}

TEST_CASE("instances round-trip through jsonl") {
  const TaskFamily f = chain(2);
  const auto inst = generate_instances(f, 20, 3);
  std::stringstream ss;
  write_instances_jsonl(ss, inst);
  const auto back = read_instances_jsonl(ss, f);
  REQUIRE(back.size() == inst.size());
  for (std::size_t i = 0; i < inst.size(); ++i) {
    CHECK(back[i].prompt == inst[i].prompt);
    CHECK(back[i].answer == inst[i].answer);
    CHECK(back[i].solution == inst[i].solution);
    CHECK(verify(back[i], inst[i].solution) == 1.0);
  }
  std::istringstream bad("{\"family\": \"modular_chain\"}\n");
  CHECK_THROWS_AS(read_instances_jsonl(bad, f), InputError);
}

TEST_CASE("summary metrics on a hand case") {
  auto inst = generate_instances(chain(1), 3, 9);
  inst[0].answer = {3};
  inst[1].answer = {1};
  inst[2].answer = {2};
  using A = std::optional<std::vector<TokenId>>;
  auto o = [&](std::size_t i, A a) { return SampleOutcome{a, a && *a == inst[i].answer}; };
  const std::vector<std::vector<SampleOutcome>> outcomes{
      // majority answer is wrong
      {o(0, A{{3}}), o(0, A{{5}}), o(0, A{{5}}), o(0, std::nullopt)},
      // malformed ties the right answer and was seen first
      {o(1, std::nullopt), o(1, std::nullopt), o(1, A{{1}}), o(1, A{{1}})},
      // tie broken in favor of the first-seen correct answer
      {o(2, A{{2}}), o(2, A{{4}}), o(2, A{{4}}), o(2, A{{2}})}};
  const EvalResult r = summarize_outcomes(outcomes, inst);
  CHECK(r.avg_at_k == doctest::Approx(5.0 / 12.0).epsilon(1e-15));
  CHECK(r.pass_at_k == 1.0);
  CHECK(r.cons_at_k == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("evaluation of fixed policies") {
  const auto inst = generate_instances(chain(1, Split::eval), 128, 7);
  SUBCASE("a deterministic correct policy scores one") {
    const EvalResult r = evaluate(chain_table(1.0), inst, 1, 1.0, 3);
    CHECK(r.avg_at_k == 1.0);
    CHECK(r.pass_at_k == 1.0);
    CHECK(r.cons_at_k == 1.0);
  }
  SUBCASE("avg@k of a coin-flip policy is binomial") {
    const EvalResult r = evaluate(chain_table(0.3), inst, 16, 1.0, 3);
    const double se = std::sqrt(0.3 * 0.7 / (128.0 * 16.0));
    CHECK(std::abs(r.avg_at_k - 0.3) < 3 * se);
    CHECK(r.pass_at_k >= r.avg_at_k);
    CHECK(r.cons_at_k <= r.pass_at_k);
  }
  SUBCASE("same seed, same result") {
    const PolicyModel m = chain_table(0.5);
    const EvalResult a = evaluate(m, inst, 8, 1.0, 42);
    const EvalResult b = evaluate(m, inst, 8, 1.0, 42);
    CHECK(a.avg_at_k == b.avg_at_k);
    CHECK(a.cons_at_k == b.cons_at_k);
  }
}

TEST_CASE("reference pretraining") {
  TaskFamily f = chain(1);
  PretrainConfig cfg;
  cfg.corpus_size = 1000;
  cfg.eval_instances = 32;
  SUBCASE("zero epochs returns the initialization") {
    PolicyModel init = PolicyModel::tabular(f.vocab, 3, 4913);
    init.init_gaussian(3, 0.1);
    cfg.epochs = 0;
    const FrozenPolicy ref = pretrain_reference(f, init, cfg);
    CHECK(std::equal(ref->params().begin(), ref->params().end(), init.params().begin()));
  }
  SUBCASE("a table fit on correct demonstrations solves seen prompts") {
    const PolicyModel init = PolicyModel::tabular(f.vocab, 3, 4913);
    cfg.epochs = 20;
    cfg.learning_rate = 0.05;
    cfg.demo_correct_rate = 1.0;
    PretrainReport report;
    const FrozenPolicy ref = pretrain_reference(f, init, cfg, &report);
    const auto seen = generate_instances(f, 64, cfg.seed);
    CHECK(evaluate(*ref, seen, 4, 1.0, 1).avg_at_k > 0.9);
    CHECK(report.final_nll < 0.2);
  }
  SUBCASE("accuracy floor") {
    cfg.epochs = 0;
    cfg.accuracy_floor = 0.99;
    CHECK_THROWS_AS(pretrain_reference(f, PolicyModel::tabular(f.vocab, 3, 4913), cfg), SetupError);
  }
}
