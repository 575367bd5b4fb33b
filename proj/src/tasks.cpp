#include "dgpo/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "dgpo/error.hpp"
#include "dgpo/evaluate.hpp"
#include "dgpo/optimizer.hpp"
#include "dgpo/seeding.hpp"

namespace dgpo {

std::string to_string(FamilyName f) {
  switch (f) {
    case FamilyName::modular_chain: return "modular_chain";
    case FamilyName::copy_reverse: return "copy_reverse";
    case FamilyName::sorted_emit: return "sorted_emit";
  }
  return "unknown";
}

FamilyName parse_family(std::string_view name) {
  for (FamilyName f : {FamilyName::modular_chain, FamilyName::copy_reverse, FamilyName::sorted_emit}) {
    if (to_string(f) == name) return f;
  }
  throw InputError("unknown task family '" + std::string(name) + "'");
}

int TaskFamily::response_length() const {
  return name == FamilyName::modular_chain ? difficulty + 3 : difficulty + 2;
}

int TaskFamily::required_window() const {
  // copy_reverse / sorted_emit need the whole prompt plus the emitted prefix.
  return name == FamilyName::modular_chain ? difficulty + 2 : 2 * difficulty + 2;
}

void TaskFamily::validate() const {
  vocab.validate();
  if (vocab.eos != vocab.size - 1) throw InputError("task vocab must use V-1 as end-of-sequence");
  if (difficulty < 1) throw InputError("difficulty must be >= 1");
  if (modulus < 2 || modulus > vocab.size - 4) {
    throw InputError("modulus must lie in [2, vocab_size - 4]");
  }
}

std::optional<std::vector<TokenId>> answer_span(std::span<const TokenId> response, TokenId ans, TokenId eos) {
  const auto it = std::find(response.begin(), response.end(), ans);
  if (it == response.end()) return std::nullopt;
  const auto end = std::find(it + 1, response.end(), eos);
  return std::vector<TokenId>(it + 1, end);
}

double verify(const TaskInstance& instance, std::span<const TokenId> response) {
  const auto span = answer_span(response, instance.ans_token, instance.eos_token);
  return span && *span == instance.answer ? 1.0 : 0.0;
}

Split split_of(const TaskFamily& family, std::span<const TokenId> prompt) {
  // FNV-1a over the family tag and prompt tokens; one in five goes to eval.
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](std::uint64_t x) {
    h ^= x;
    h *= 1099511628211ULL;
  };
  feed(static_cast<std::uint64_t>(family.name));
  for (TokenId t : prompt) feed(static_cast<std::uint64_t>(t) + 1);
  return mix64(h) % 5 == 0 ? Split::eval : Split::train;
}

namespace {

TaskInstance make_instance(const TaskFamily& f, const std::vector<TokenId>& symbols) {
  TaskInstance inst;
  inst.family = f.name;
  inst.difficulty = f.difficulty;
  inst.ans_token = f.ans();
  inst.eos_token = f.eos();
  const auto d = static_cast<std::size_t>(f.difficulty);
  if (f.name == FamilyName::modular_chain) {
    // symbols = x0, x1, ..., xD
    inst.prompt.push_back(f.bos());
    inst.prompt.insert(inst.prompt.end(), symbols.begin() + 1, symbols.end());
    inst.prompt.push_back(f.sep());
    inst.prompt.push_back(symbols[0]);
    TokenId s = symbols[0];
    for (std::size_t j = 1; j <= d; ++j) {
      s = static_cast<TokenId>((s + symbols[j]) % f.modulus);
      inst.solution.push_back(s);
    }
    inst.answer = {s};
  } else {
    inst.prompt.push_back(f.bos());
    inst.prompt.insert(inst.prompt.end(), symbols.begin(), symbols.end());
    inst.prompt.push_back(f.sep());
    inst.answer = symbols;
    if (f.name == FamilyName::copy_reverse) {
      std::reverse(inst.answer.begin(), inst.answer.end());
    } else {
      std::sort(inst.answer.begin(), inst.answer.end());
    }
  }
  inst.solution.push_back(f.ans());
  inst.solution.insert(inst.solution.end(), inst.answer.begin(), inst.answer.end());
  inst.solution.push_back(f.eos());
  return inst;
}

std::size_t symbol_count(const TaskFamily& f) {
  return f.name == FamilyName::modular_chain ? static_cast<std::size_t>(f.difficulty) + 1
                                             : static_cast<std::size_t>(f.difficulty);
}

}  // namespace

std::vector<TaskInstance> generate_instances(const TaskFamily& family, std::size_t n, std::uint64_t seed) {
  family.validate();
  if (n < 1) throw InputError("generate_instances needs n >= 1");
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(family.name), static_cast<std::uint64_t>(family.split)}));
  std::uniform_int_distribution<TokenId> symbol(0, static_cast<TokenId>(family.modulus - 1));
  std::vector<TaskInstance> out;
  out.reserve(n);
  std::vector<TokenId> symbols(symbol_count(family));
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 1000 * n + 100000) throw InputError("instance space too small for the requested split");
    for (TokenId& s : symbols) s = symbol(rng);
    TaskInstance inst = make_instance(family, symbols);
    if (split_of(family, inst.prompt) != family.split) continue;
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<TokenId> demonstration(const TaskFamily& family, const TaskInstance& instance, bool correct, Rng& rng) {
  if (correct) return instance.solution;
  std::vector<TokenId> resp = instance.solution;
  const auto d = static_cast<std::size_t>(family.difficulty);
  auto wrong_symbol = [&](TokenId right) {
    std::uniform_int_distribution<TokenId> pick(0, static_cast<TokenId>(family.modulus - 2));
    const TokenId x = pick(rng);
    return x >= right ? static_cast<TokenId>(x + 1) : x;
  };
  if (family.name == FamilyName::modular_chain) {
    // Corrupt step j; later partial sums follow the wrong value.
    std::uniform_int_distribution<std::size_t> step(0, d - 1);
    const std::size_t j = step(rng);
    const TokenId offset = static_cast<TokenId>(wrong_symbol(resp[j]) - resp[j] + family.modulus);
    for (std::size_t k = j; k < d; ++k) resp[k] = static_cast<TokenId>((resp[k] + offset) % family.modulus);
    resp[d + 1] = resp[d - 1];
  } else {
    std::uniform_int_distribution<std::size_t> pos(1, d);
    const std::size_t j = pos(rng);
    resp[j] = wrong_symbol(resp[j]);
  }
  return resp;
}

void write_instances_jsonl(std::ostream& os, std::span<const TaskInstance> instances) {
  for (const TaskInstance& inst : instances) {
    nlohmann::json j;
    j["family"] = to_string(inst.family);
    j["difficulty"] = inst.difficulty;
    j["prompt"] = inst.prompt;
    j["answer"] = inst.answer;
    j["solution"] = inst.solution;
    os << j.dump() << '\n';
  }
}

std::vector<TaskInstance> read_instances_jsonl(std::istream& is, const TaskFamily& family) {
  std::vector<TaskInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TaskInstance inst;
      inst.family = parse_family(j.at("family").get<std::string>());
      inst.difficulty = j.at("difficulty").get<int>();
      inst.prompt = j.at("prompt").get<std::vector<TokenId>>();
      inst.answer = j.at("answer").get<std::vector<TokenId>>();
      inst.solution = j.at("solution").get<std::vector<TokenId>>();
      inst.ans_token = family.ans();
      inst.eos_token = family.eos();
      out.push_back(std::move(inst));
    } catch (const nlohmann::json::exception& e) {
      throw InputError("instance line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

FrozenPolicy pretrain_reference(const TaskFamily& family, const PolicyModel& init, const PretrainConfig& cfg,
                                PretrainReport* report) {
  family.validate();
  if (init.vocab().size != family.vocab.size) throw SetupError("model vocab does not match task family vocab");
  if (!(cfg.demo_correct_rate >= 0.0 && cfg.demo_correct_rate <= 1.0)) {
    throw SetupError("demo_correct_rate must lie in [0, 1]");
  }
  auto model = std::make_shared<PolicyModel>(init);

  TaskFamily train_family = family;
  train_family.split = Split::train;
  double nll = 0.0;
  if (cfg.epochs > 0 && cfg.corpus_size > 0) {
    const auto instances = generate_instances(train_family, cfg.corpus_size, derive_seed(cfg.seed, {1}));
    Rng demo_rng(derive_seed(cfg.seed, {2}));
    std::bernoulli_distribution correct(cfg.demo_correct_rate);
    std::vector<Sequence> corpus;
    corpus.reserve(instances.size());
    for (const TaskInstance& inst : instances) {
      corpus.push_back({inst.prompt, demonstration(family, inst, correct(demo_rng), demo_rng)});
    }

    OptimizerConfig ocfg;
    ocfg.learning_rate = cfg.learning_rate;
    ocfg.weight_decay = 0.0;
    Optimizer opt(ocfg, model->param_count());
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(cfg.seed, {3}));
    const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double epoch_nll = 0.0;
      std::size_t epoch_tokens = 0;
      for (std::size_t start = 0; start < order.size(); start += batch) {
        const std::size_t stop = std::min(order.size(), start + batch);
        std::size_t tokens = 0;
        for (std::size_t b = start; b < stop; ++b) tokens += corpus[order[b]].length();
        std::vector<double> grad(model->param_count(), 0.0);
        for (std::size_t b = start; b < stop; ++b) {
          const Sequence& seq = corpus[order[b]];
          std::vector<TokenId> ctx(seq.prompt);
          for (std::size_t t = 0; t < seq.length(); ++t) {
            epoch_nll -= model->log_probs(ctx)[static_cast<std::size_t>(seq.response[t])];
            ctx.push_back(seq.response[t]);
          }
          // Minimizing mean NLL: coefficient -1/tokens on every log π.
          const std::vector<double> coef(seq.length(), -1.0 / static_cast<double>(tokens));
          accumulate_logprob_gradient(*model, seq, coef, grad);
        }
        epoch_tokens += tokens;
        opt.step(model->params(), grad);
      }
      nll = epoch_nll / static_cast<double>(std::max<std::size_t>(1, epoch_tokens));
    }
  }

  TaskFamily eval_family = family;
  eval_family.split = Split::eval;
  const auto eval_set = generate_instances(eval_family, std::max<std::size_t>(1, cfg.eval_instances),
                                           derive_seed(cfg.seed, {4}));
  const EvalResult acc = evaluate(*model, eval_set, std::max(1, cfg.eval_k), 1.0, derive_seed(cfg.seed, {5}),
                                  cfg.max_response_len);
  if (report) {
    report->final_nll = nll;
    report->eval_accuracy = acc.avg_at_k;
  }
  if (acc.avg_at_k < cfg.accuracy_floor) {
    throw SetupError("reference accuracy " + std::to_string(acc.avg_at_k) + " below floor " +
                     std::to_string(cfg.accuracy_floor) + " (final nll " + std::to_string(nll) + ")");
  }
  return model;
}

}  // namespace dgpo
