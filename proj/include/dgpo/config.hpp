#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dgpo/credit.hpp"
#include "dgpo/objective.hpp"
#include "dgpo/optimizer.hpp"
#include "dgpo/policy.hpp"
#include "dgpo/tasks.hpp"

namespace dgpo {

// Every hyperparameter of a run. Field names double as config-file keys.
struct TrainConfig {
  // task
  FamilyName family = FamilyName::modular_chain;
  int vocab_size = 16;
  int modulus = 10;
  int difficulty = 3;

  // policy model
  ModelKind model_kind = ModelKind::mlp;
  int context_window = 6;
  int embed_dim = 8;
  int hidden_width = 64;
  int tabular_buckets = 4096;
  double init_scale = 0.1;

  // rollouts and batching
  int group_size = 8;
  int prompts_per_batch = 32;
  int minibatch_prompts = 8;
  int inner_epochs = 1;
  int max_response_len = 32;

  // optimizer
  OptimizerKind optimizer = OptimizerKind::adamw;
  double learning_rate = 1e-3;
  double weight_decay = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // credit assignment and objective
  Variant variant = Variant::dgpo;
  double tau = 0.5;
  double kappa = 1.0;
  double adv_epsilon = 1e-6;
  StdEstimator std_estimator = StdEstimator::population;
  double clip_eps = 0.2;
  double kl_beta = 0.04;
  double kl_floor = 1e-30;

  // schedule and evaluation
  int total_steps = 500;
  int eval_every = 50;
  int eval_k = 16;
  int eval_instances = 128;
  double eval_temperature = 1.0;
  int checkpoint_every = 0;

  // reference policy
  int pretrain_corpus = 4000;
  int pretrain_epochs = 30;
  double pretrain_lr = 3e-3;
  int pretrain_batch = 32;
  double demo_correct_rate = 0.5;
  double ref_accuracy_floor = 0.05;

  std::uint64_t seed = 1;
  int threads = 0;
  bool export_rollouts = false;

  TaskFamily task_family(Split split = Split::train) const;
  ModelShape model_shape() const;
  GateConfig gate() const;
  CreditConfig credit() const;
  SurrogateConfig surrogate() const;
  OptimizerConfig optimizer_config() const;
  PretrainConfig pretrain_config() const;
};

struct ConfigIssue {
  std::string key;
  std::string message;
};

nlohmann::json to_json(const TrainConfig& cfg);
std::vector<std::string> config_keys();

// Sets one key from a JSON value; throws ConfigError naming the key for
// unknown keys and type errors.
void set_config_value(TrainConfig& cfg, const std::string& key, const nlohmann::json& value);

// `key=value`; the value is read as JSON when it parses, as a string otherwise.
void apply_override(TrainConfig& cfg, const std::string& assignment);

// Invariant violations, one per offending key.
std::vector<ConfigIssue> check_config(const TrainConfig& cfg);

struct ConfigValidation {
  TrainConfig config;
  std::vector<ConfigIssue> issues;
  bool ok() const { return issues.empty(); }
};

// Parses a JSON object of config keys (an empty file is an empty object),
// applies overrides in order, fills defaults and checks invariants.
ConfigValidation validate_config_text(const std::string& text, const std::vector<std::string>& overrides = {});
ConfigValidation validate_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// validate_config that throws ConfigError on the first issue.
TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

// Stable hex digest of the resolved config.
std::string config_hash(const TrainConfig& cfg);

}  // namespace dgpo
