#include <algorithm>
#include <map>
#include <ostream>
#include <sstream>

#include "dgpo/error.hpp"
#include "dgpo/trainer.hpp"

namespace dgpo {

double median(std::vector<double> values) {
  if (values.empty()) throw InputError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

SweepSpec default_sweep(std::vector<std::uint64_t> seeds) {
  SweepSpec s;
  s.seeds = std::move(seeds);
  s.cells = {
      {"dgpo", {"variant=dgpo"}},
      {"dgpo_no_gate", {"variant=dgpo_no_gate"}},
      {"dgpo_reverse_kl", {"variant=dgpo_reverse_kl"}},
      {"grpo_uniform", {"variant=grpo_uniform"}},
      {"grpo_kl_penalized", {"variant=grpo_kl_penalized"}},
  };
  for (const char* tau : {"0.1", "0.5", "1", "5"}) {
    s.cells.push_back({std::string("tau=") + tau, {"variant=dgpo", std::string("tau=") + tau}});
  }
  for (const char* kappa : {"0", "0.5", "1", "2", "5"}) {
    s.cells.push_back({std::string("kappa=") + kappa, {"variant=dgpo", std::string("kappa=") + kappa}});
  }
  return s;
}

namespace {

// Fields the pretrained reference depends on.
std::string reference_key(const TrainConfig& c) {
  const auto j = to_json(c);
  nlohmann::json k;
  for (const char* key : {"family", "vocab_size", "modulus", "difficulty", "model_kind", "context_window",
                          "embed_dim", "hidden_width", "tabular_buckets", "init_scale", "pretrain_corpus",
                          "pretrain_epochs", "pretrain_lr", "pretrain_batch", "demo_correct_rate",
                          "ref_accuracy_floor", "eval_instances", "max_response_len", "seed"}) {
    k[key] = j.at(key);
  }
  return k.dump();
}

}  // namespace

std::vector<CellResult> run_ablation_suite(const TrainConfig& base, const SweepSpec& spec, const SweepLog& log) {
  if (spec.seeds.empty()) throw InputError("sweep needs at least one seed");
  std::map<std::string, FrozenPolicy> references;
  std::map<std::string, std::string> reference_errors;
  std::vector<CellResult> out;
  for (const SweepCell& cell : spec.cells) {
    CellResult res;
    res.cell = cell;
    std::vector<double> ok;
    for (std::uint64_t seed : spec.seeds) {
      try {
        TrainConfig cfg = base;
        for (const std::string& o : cell.overrides) apply_override(cfg, o);
        cfg.seed = seed;
        cfg.checkpoint_every = 0;
        cfg.export_rollouts = false;
        const auto issues = check_config(cfg);
        if (!issues.empty()) throw ConfigError(issues.front().key, issues.front().message);
        const std::string key = reference_key(cfg);
        if (auto e = reference_errors.find(key); e != reference_errors.end()) throw SetupError(e->second);
        auto it = references.find(key);
        if (it == references.end()) {
          try {
            it = references.emplace(key, build_reference(cfg)).first;
          } catch (const Error& e) {
            reference_errors.emplace(key, e.what());
            throw;
          }
        }
        const TrainResult r = train(cfg, *it->second);
        res.final_avg.push_back(r.final_eval.avg_at_k);
        res.errors.emplace_back();
        ok.push_back(r.final_eval.avg_at_k);
        if (log) {
          std::ostringstream os;
          os << cell.name << " seed " << seed << ": avg@" << cfg.eval_k << " = " << r.final_eval.avg_at_k;
          log(os.str());
        }
      } catch (const std::exception& e) {
        res.final_avg.push_back(std::nullopt);
        res.errors.emplace_back(e.what());
        if (log) log(cell.name + " seed " + std::to_string(seed) + " failed: " + e.what());
      }
    }
    if (!ok.empty()) res.median = median(ok);
    out.push_back(std::move(res));
  }
  return out;
}

void write_ablation_csv(std::ostream& os, std::span<const CellResult> results) {
  os << "name,overrides,seeds,failed,median_avg_at_k,per_seed\n";
  const auto precision = os.precision(10);
  for (const CellResult& r : results) {
    std::string overrides;
    for (const std::string& o : r.cell.overrides) overrides += (overrides.empty() ? "" : ";") + o;
    const auto failed = std::count(r.final_avg.begin(), r.final_avg.end(), std::nullopt);
    os << r.cell.name << ',' << overrides << ',' << r.final_avg.size() << ',' << failed << ',';
    if (r.median) os << *r.median;
    os << ',';
    for (std::size_t i = 0; i < r.final_avg.size(); ++i) {
      if (i) os << ';';
      if (r.final_avg[i]) {
        os << *r.final_avg[i];
      } else {
        os << "nan";
      }
    }
    os << '\n';
  }
  os.precision(precision);
}

}  // namespace dgpo
