// dgpo: train, evaluate, probe and ablate distribution-guided policy optimization
// on synthetic verifiable tasks.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dgpo/checkpoint.hpp"
#include "dgpo/config.hpp"
#include "dgpo/error.hpp"
#include "dgpo/objective.hpp"
#include "dgpo/parallel.hpp"
#include "dgpo/seeding.hpp"
#include "dgpo/trainer.hpp"

#ifndef DGPO_BUILD_ID
#define DGPO_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out = "dgpo_out";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON config file (keys mirror TrainConfig fields)");
  sub->add_option("--set", c.overrides, "key=value override, repeatable")->take_all();
  sub->add_option("--out", c.out, "output directory");
  sub->add_option("--seed", c.seed, "root seed");
  sub->add_option("--variant", c.variant, "dgpo|grpo_uniform|grpo_kl_penalized|dgpo_no_gate|dgpo_reverse_kl");
}

dgpo::TrainConfig resolve(const Common& c) {
  std::vector<std::string> overrides = c.overrides;
  if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
  if (c.variant) overrides.push_back("variant=\"" + *c.variant + "\"");
  dgpo::ConfigValidation v = c.config.empty() ? dgpo::validate_config_text("", overrides)
                                              : dgpo::validate_config(c.config, overrides);
  if (!v.ok()) throw dgpo::ConfigError(v.issues.front().key, v.issues.front().message);
  if (v.config.threads > 0) dgpo::set_thread_count(v.config.threads);
  return v.config;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw dgpo::FileError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw dgpo::FileError("cannot write " + path.string());
  return os;
}

// Resolved config, seed and build id next to every run's outputs.
void write_provenance(const fs::path& out, const dgpo::TrainConfig& cfg) {
  fs::create_directories(out);
  json j = dgpo::to_json(cfg);
  write_json(out / "config.resolved.json", j);
}

json eval_json(const dgpo::EvalResult& e) {
  return {{"avg_at_k", e.avg_at_k}, {"pass_at_k", e.pass_at_k}, {"cons_at_k", e.cons_at_k}};
}

dgpo::FrozenPolicy reference_for(const dgpo::TrainConfig& cfg, const std::string& path, json& info) {
  if (!path.empty()) {
    auto ref = std::make_shared<const dgpo::PolicyModel>(dgpo::load_checkpoint(path));
    if (!(ref->shape() == cfg.model_shape())) {
      throw dgpo::SetupError("reference checkpoint shape does not match the config");
    }
    info["reference"] = path;
    return ref;
  }
  dgpo::PretrainReport report;
  auto ref = dgpo::build_reference(cfg, &report);
  info["reference_nll"] = report.final_nll;
  info["reference_accuracy"] = report.eval_accuracy;
  return ref;
}

int cmd_train(const Common& c, const std::string& reference_path) {
  const dgpo::TrainConfig cfg = resolve(c);
  const fs::path out = c.out;
  write_provenance(out, cfg);
  json summary;
  auto ref = reference_for(cfg, reference_path, summary);
  dgpo::save_checkpoint(*ref, out / "reference.ckpt");

  std::ofstream metrics = open_out(out / "metrics.csv");
  std::optional<std::ofstream> rollouts;
  dgpo::TrainHooks hooks;
  hooks.metrics_csv = &metrics;
  if (cfg.export_rollouts) {
    rollouts = open_out(out / "rollouts.jsonl");
    hooks.rollouts_jsonl = &*rollouts;
  }
  hooks.checkpoint_dir = out / "checkpoints";
  hooks.diagnostic_path = out / "diagnostic.json";
  hooks.on_record = [&](const dgpo::MetricsRecord& r) {
    if (r.eval) {
      std::cerr << "step " << r.step << " avg@" << cfg.eval_k << " " << r.eval->avg_at_k << " pass@" << cfg.eval_k
                << " " << r.eval->pass_at_k << '\n';
    }
  };
  const dgpo::TrainResult result = dgpo::train(cfg, *ref, hooks);

  summary["final"] = eval_json(result.final_eval);
  summary["steps"] = result.step_losses.size();
  summary["config_hash"] = dgpo::config_hash(cfg);
  summary["seeds"] = {cfg.seed};
  summary["build_id"] = DGPO_BUILD_ID;
  summary["wall_time"] = result.metrics.back().wall_time;
  write_json(out / "summary.json", summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
  const dgpo::TrainConfig cfg = resolve(c);
  const dgpo::PolicyModel policy = dgpo::load_checkpoint(checkpoint);
  if (!(policy.shape() == cfg.model_shape())) throw dgpo::SetupError("checkpoint shape does not match the config");
  write_provenance(c.out, cfg);
  json j = eval_json(dgpo::evaluate_policy(cfg, policy));
  j["k"] = cfg.eval_k;
  j["instances"] = cfg.eval_instances;
  j["checkpoint"] = checkpoint;
  j["seeds"] = {cfg.seed};
  j["build_id"] = DGPO_BUILD_ID;
  write_json(fs::path(c.out) / "eval.json", j);
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_probe(const Common& c, double kl_beta) {
  fs::create_directories(c.out);
  dgpo::ProbeConfig pc;
  pc.kl_beta = kl_beta;
  const auto rows = dgpo::gradient_stability_probe(pc);
  std::ofstream os = open_out(fs::path(c.out) / "probe.csv");
  dgpo::write_probe_csv(os, rows);
  dgpo::write_probe_csv(std::cout, rows);
  return 0;
}

int cmd_ablate(const Common& c, const std::vector<std::uint64_t>& seeds, const std::vector<std::string>& only) {
  const dgpo::TrainConfig cfg = resolve(c);
  write_provenance(c.out, cfg);
  dgpo::SweepSpec spec = dgpo::default_sweep(seeds);
  if (!only.empty()) {
    std::vector<dgpo::SweepCell> kept;
    for (const auto& cell : spec.cells) {
      if (std::find(only.begin(), only.end(), cell.name) != only.end()) kept.push_back(cell);
    }
    if (kept.empty()) throw dgpo::InputError("--cells selects no sweep cell");
    spec.cells = kept;
  }
  const auto results = dgpo::run_ablation_suite(cfg, spec, [](const std::string& line) { std::cerr << line << '\n'; });
  std::ofstream os = open_out(fs::path(c.out) / "ablation.csv");
  dgpo::write_ablation_csv(os, results);
  dgpo::write_ablation_csv(std::cout, results);
  json summary;
  summary["config_hash"] = dgpo::config_hash(cfg);
  summary["seeds"] = seeds;
  summary["build_id"] = DGPO_BUILD_ID;
  for (const auto& r : results) summary["cells"][r.cell.name] = r.median ? json(*r.median) : json(nullptr);
  write_json(fs::path(c.out) / "summary.json", summary);
  return 0;
}

int cmd_export_credit(const Common& c, const std::string& checkpoint, const std::string& reference,
                      const std::string& instances_path, int count) {
  const dgpo::TrainConfig cfg = resolve(c);
  const dgpo::PolicyModel policy = dgpo::load_checkpoint(checkpoint);
  const dgpo::PolicyModel ref = dgpo::load_checkpoint(reference);
  if (!(policy.shape() == cfg.model_shape()) || !(ref.shape() == cfg.model_shape())) {
    throw dgpo::SetupError("checkpoint shape does not match the config");
  }
  std::vector<dgpo::TaskInstance> instances;
  if (!instances_path.empty()) {
    std::ifstream is(instances_path);
    if (!is) throw dgpo::FileError("cannot read " + instances_path);
    instances = dgpo::read_instances_jsonl(is, cfg.task_family());
  } else {
    instances = dgpo::generate_instances(cfg.task_family(), static_cast<std::size_t>(count),
                                         dgpo::derive_seed(cfg.seed, {7}));
  }
  write_provenance(c.out, cfg);
  const auto groups = dgpo::collect_rollouts(policy, ref, instances, cfg.group_size, cfg.max_response_len,
                                             dgpo::derive_seed(cfg.seed, {8}));
  std::ofstream os = open_out(fs::path(c.out) / "credit.jsonl");
  const dgpo::CreditConfig cc = cfg.credit();
  for (std::size_t g = 0; g < groups.size(); ++g) dgpo::write_credit_jsonl(os, dgpo::build_credit_map(groups[g], cc), g);
  std::cout << "wrote " << groups.size() * static_cast<std::size_t>(cfg.group_size) << " sequences\n";
  return 0;
}

int cmd_pretrain(const Common& c) {
  const dgpo::TrainConfig cfg = resolve(c);
  write_provenance(c.out, cfg);
  dgpo::PretrainReport report;
  auto ref = dgpo::build_reference(cfg, &report);
  dgpo::save_checkpoint(*ref, fs::path(c.out) / "reference.ckpt");
  json j{{"final_nll", report.final_nll},
         {"eval_accuracy", report.eval_accuracy},
         {"config_hash", dgpo::config_hash(cfg)},
         {"seeds", {cfg.seed}},
         {"build_id", DGPO_BUILD_ID}};
  write_json(fs::path(c.out) / "summary.json", j);
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_validate(const Common& c) {
  std::vector<std::string> overrides = c.overrides;
  if (c.seed) overrides.push_back("seed=" + std::to_string(*c.seed));
  if (c.variant) overrides.push_back("variant=\"" + *c.variant + "\"");
  const dgpo::ConfigValidation v = c.config.empty() ? dgpo::validate_config_text("", overrides)
                                                    : dgpo::validate_config(c.config, overrides);
  if (!v.ok()) {
    json issues = json::array();
    for (const auto& i : v.issues) issues.push_back({{"key", i.key}, {"message", i.message}});
    for (const auto& i : v.issues) std::cerr << i.key << ": " << i.message << '\n';
    throw dgpo::ConfigError(v.issues.front().key, v.issues.front().message);
  }
  std::cout << dgpo::to_json(v.config).dump(2) << '\n';
  return 0;
}

void write_error(const fs::path& out, const std::string& cls, const std::string& message,
                 const std::string& key = {}) {
  std::cerr << "error[" << cls << "]: " << message << '\n';
  try {
    fs::create_directories(out);
    json j{{"error_class", cls}, {"message", message}, {"build_id", DGPO_BUILD_ID}};
    if (!key.empty()) j["key"] = key;
    std::ofstream(out / "error.json") << j.dump(2) << '\n';
  } catch (...) {
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Group policy optimization with Hellinger-guided token credit on synthetic verifiable tasks"};
  app.require_subcommand(1);
  Common c;
  std::string checkpoint, reference, instances;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<std::string> cells;
  double probe_beta = 0.1;
  int count = 16;

  auto* train = app.add_subcommand("train", "run RL training and write metrics, checkpoints and a summary");
  add_common(train, c);
  train->add_option("--reference", reference, "reference checkpoint (pretrained when omitted)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on eval-split instances");
  add_common(eval, c);
  eval->add_option("--checkpoint", checkpoint, "policy checkpoint")->required();

  auto* probe = app.add_subcommand("probe-gradients", "KL vs DGPO gradient norms as the reference mass vanishes");
  add_common(probe, c);
  probe->add_option("--kl-beta", probe_beta, "penalty coefficient of the KL baseline");

  auto* ablate = app.add_subcommand("ablate", "variant, tau and kappa sweep; median final avg@k per cell");
  add_common(ablate, c);
  ablate->add_option("--seeds", seeds, "seeds shared by every cell")->take_all();
  ablate->add_option("--cells", cells, "restrict to these cell names")->take_all();

  auto* credit = app.add_subcommand("export-credit", "per-token credit map of fresh rollouts as JSONL");
  add_common(credit, c);
  credit->add_option("--checkpoint", checkpoint, "policy checkpoint")->required();
  credit->add_option("--reference", reference, "reference checkpoint")->required();
  credit->add_option("--instances", instances, "instance JSONL (generated from the train split when omitted)");
  credit->add_option("--count", count, "number of generated instances");

  auto* pretrain = app.add_subcommand("pretrain-ref", "fit and freeze the reference policy");
  add_common(pretrain, c);

  auto* validate = app.add_subcommand("validate-config", "resolve a config and report every violation");
  add_common(validate, c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    write_error(c.out, "usage", e.what());
    return 2;
  }

  try {
    if (*train) return cmd_train(c, reference);
    if (*eval) return cmd_eval(c, checkpoint);
    if (*probe) return cmd_probe(c, probe_beta);
    if (*ablate) return cmd_ablate(c, seeds, cells);
    if (*credit) return cmd_export_credit(c, checkpoint, reference, instances, count);
    if (*pretrain) return cmd_pretrain(c);
    if (*validate) return cmd_validate(c);
  } catch (const dgpo::ConfigError& e) {
    write_error(c.out, e.error_class(), e.what(), e.key());
    return 1;
  } catch (const dgpo::Error& e) {
    write_error(c.out, e.error_class(), e.what());
    return 1;
  } catch (const std::exception& e) {
    write_error(c.out, "internal", e.what());
    return 1;
  }
  return 0;
}
