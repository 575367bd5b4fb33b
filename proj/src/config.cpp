#include "dgpo/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "dgpo/error.hpp"

namespace dgpo {

using nlohmann::json;

TaskFamily TrainConfig::task_family(Split split) const {
  TaskFamily f;
  f.name = family;
  f.vocab = Vocab{vocab_size, static_cast<TokenId>(vocab_size - 1)};
  f.split = split;
  f.difficulty = difficulty;
  f.modulus = modulus;
  return f;
}

ModelShape TrainConfig::model_shape() const {
  ModelShape s;
  s.kind = model_kind;
  s.vocab = Vocab{vocab_size, static_cast<TokenId>(vocab_size - 1)};
  s.context_window = context_window;
  if (model_kind == ModelKind::mlp) {
    s.embed_dim = embed_dim;
    s.hidden_width = hidden_width;
    s.buckets = 0;
  } else {
    s.embed_dim = 0;
    s.hidden_width = 0;
    s.buckets = tabular_buckets;
  }
  return s;
}

GateConfig TrainConfig::gate() const { return {kappa, tau, DeviationMetric::hellinger, kl_floor}; }

CreditConfig TrainConfig::credit() const { return credit_config_for(variant, gate(), adv_epsilon, std_estimator); }

SurrogateConfig TrainConfig::surrogate() const {
  SurrogateConfig s;
  s.clip_eps = clip_eps;
  s.kl_beta = variant == Variant::grpo_kl_penalized ? kl_beta : 0.0;
  s.variant = variant;
  s.kl_floor = kl_floor;
  return s;
}

OptimizerConfig TrainConfig::optimizer_config() const {
  return {optimizer, learning_rate, adam_beta1, adam_beta2, adam_eps, weight_decay};
}

PretrainConfig TrainConfig::pretrain_config() const {
  PretrainConfig p;
  p.corpus_size = static_cast<std::size_t>(pretrain_corpus);
  p.epochs = pretrain_epochs;
  p.batch_size = static_cast<std::size_t>(pretrain_batch);
  p.learning_rate = pretrain_lr;
  p.demo_correct_rate = demo_correct_rate;
  p.seed = seed;
  p.accuracy_floor = ref_accuracy_floor;
  p.eval_instances = static_cast<std::size_t>(eval_instances);
  p.max_response_len = max_response_len;
  return p;
}

namespace {

struct Field {
  std::string name;
  std::function<void(TrainConfig&, const json&)> set;
  std::function<json(const TrainConfig&)> get;
};

template <typename T>
Field member(std::string name, T TrainConfig::*m) {
  return {name,
          [m, name](TrainConfig& c, const json& v) {
            if constexpr (std::is_same_v<T, bool>) {
              if (!v.is_boolean()) throw ConfigError(name, "expected a boolean");
            } else if constexpr (std::is_integral_v<T>) {
              if (!v.is_number_integer()) throw ConfigError(name, "expected an integer");
              if constexpr (std::is_unsigned_v<T>) {
                if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
                  throw ConfigError(name, "expected a non-negative integer");
                }
              }
            } else {
              if (!v.is_number()) throw ConfigError(name, "expected a number");
            }
            c.*m = v.get<T>();
          },
          [m](const TrainConfig& c) { return json(c.*m); }};
}

template <typename E>
Field enumerated(std::string name, E TrainConfig::*m, std::function<E(std::string_view)> parse,
                 std::function<std::string(E)> print) {
  return {name,
          [m, name, parse](TrainConfig& c, const json& v) {
            if (!v.is_string()) throw ConfigError(name, "expected a string");
            try {
              c.*m = parse(v.get<std::string>());
            } catch (const InputError& e) {
              throw ConfigError(name, e.what());
            }
          },
          [m, print](const TrainConfig& c) { return json(print(c.*m)); }};
}

ModelKind parse_model_kind(std::string_view s) {
  if (s == "mlp") return ModelKind::mlp;
  if (s == "tabular") return ModelKind::tabular;
  throw InputError("unknown model kind '" + std::string(s) + "' (tabular|mlp)");
}

std::string model_kind_name(ModelKind k) { return k == ModelKind::mlp ? "mlp" : "tabular"; }

StdEstimator parse_estimator(std::string_view s) {
  if (s == "population") return StdEstimator::population;
  if (s == "sample") return StdEstimator::sample;
  throw InputError("unknown std estimator '" + std::string(s) + "' (population|sample)");
}

std::string estimator_name(StdEstimator e) { return e == StdEstimator::population ? "population" : "sample"; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      enumerated<FamilyName>("family", &TrainConfig::family, parse_family,
                             [](FamilyName f) { return to_string(f); }),
      member("vocab_size", &TrainConfig::vocab_size),
      member("modulus", &TrainConfig::modulus),
      member("difficulty", &TrainConfig::difficulty),
      enumerated<ModelKind>("model_kind", &TrainConfig::model_kind, parse_model_kind, model_kind_name),
      member("context_window", &TrainConfig::context_window),
      member("embed_dim", &TrainConfig::embed_dim),
      member("hidden_width", &TrainConfig::hidden_width),
      member("tabular_buckets", &TrainConfig::tabular_buckets),
      member("init_scale", &TrainConfig::init_scale),
      member("group_size", &TrainConfig::group_size),
      member("prompts_per_batch", &TrainConfig::prompts_per_batch),
      member("minibatch_prompts", &TrainConfig::minibatch_prompts),
      member("inner_epochs", &TrainConfig::inner_epochs),
      member("max_response_len", &TrainConfig::max_response_len),
      enumerated<OptimizerKind>("optimizer", &TrainConfig::optimizer, parse_optimizer,
                                [](OptimizerKind k) { return to_string(k); }),
      member("learning_rate", &TrainConfig::learning_rate),
      member("weight_decay", &TrainConfig::weight_decay),
      member("adam_beta1", &TrainConfig::adam_beta1),
      member("adam_beta2", &TrainConfig::adam_beta2),
      member("adam_eps", &TrainConfig::adam_eps),
      enumerated<Variant>("variant", &TrainConfig::variant, parse_variant, [](Variant v) { return to_string(v); }),
      member("tau", &TrainConfig::tau),
      member("kappa", &TrainConfig::kappa),
      member("adv_epsilon", &TrainConfig::adv_epsilon),
      enumerated<StdEstimator>("std_estimator", &TrainConfig::std_estimator, parse_estimator, estimator_name),
      member("clip_eps", &TrainConfig::clip_eps),
      member("kl_beta", &TrainConfig::kl_beta),
      member("kl_floor", &TrainConfig::kl_floor),
      member("total_steps", &TrainConfig::total_steps),
      member("eval_every", &TrainConfig::eval_every),
      member("eval_k", &TrainConfig::eval_k),
      member("eval_instances", &TrainConfig::eval_instances),
      member("eval_temperature", &TrainConfig::eval_temperature),
      member("checkpoint_every", &TrainConfig::checkpoint_every),
      member("pretrain_corpus", &TrainConfig::pretrain_corpus),
      member("pretrain_epochs", &TrainConfig::pretrain_epochs),
      member("pretrain_lr", &TrainConfig::pretrain_lr),
      member("pretrain_batch", &TrainConfig::pretrain_batch),
      member("demo_correct_rate", &TrainConfig::demo_correct_rate),
      member("ref_accuracy_floor", &TrainConfig::ref_accuracy_floor),
      member("seed", &TrainConfig::seed),
      member("threads", &TrainConfig::threads),
      member("export_rollouts", &TrainConfig::export_rollouts),
  };
  return table;
}

std::string fmt(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

}  // namespace

json to_json(const TrainConfig& cfg) {
  json j = json::object();
  for (const Field& f : fields()) j[f.name] = f.get(cfg);
  return j;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(f.name);
  return keys;
}

void set_config_value(TrainConfig& cfg, const std::string& key, const json& value) {
  for (const Field& f : fields()) {
    if (f.name == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError(key, "unknown config key");
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must have the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  set_config_value(cfg, key, value);
}

std::vector<ConfigIssue> check_config(const TrainConfig& c) {
  std::vector<ConfigIssue> issues;
  auto require = [&](bool ok, const char* key, const std::string& constraint, const std::string& got) {
    if (!ok) issues.push_back({key, "must satisfy " + constraint + " (got " + got + ")"});
  };
  auto ri = [&](bool ok, const char* key, const std::string& constraint, long long v) {
    require(ok, key, constraint, std::to_string(v));
  };
  auto rd = [&](bool ok, const char* key, const std::string& constraint, double v) {
    require(ok && std::isfinite(v), key, constraint, fmt(v));
  };

  ri(c.vocab_size >= c.modulus + 4 && c.vocab_size <= 256, "vocab_size", "modulus + 4 <= vocab_size <= 256",
     c.vocab_size);
  ri(c.modulus >= 2, "modulus", "modulus >= 2", c.modulus);
  ri(c.difficulty >= 1, "difficulty", "difficulty >= 1", c.difficulty);
  ri(c.context_window >= 1, "context_window", "context_window >= 1", c.context_window);
  if (c.model_kind == ModelKind::mlp) {
    ri(c.embed_dim >= 1, "embed_dim", "embed_dim >= 1", c.embed_dim);
    ri(c.hidden_width >= 1, "hidden_width", "hidden_width >= 1", c.hidden_width);
    if (c.context_window >= 1 && c.difficulty >= 1) {
      const int need = c.task_family().required_window();
      ri(c.context_window >= need, "context_window",
         "context_window >= " + std::to_string(need) + " for this family and difficulty", c.context_window);
    }
    if (c.embed_dim >= 1 && c.hidden_width >= 1 && c.context_window >= 1 && c.vocab_size >= 2) {
      const auto n = static_cast<long long>(c.model_shape().param_count());
      ri(n <= 5000, "hidden_width", "mlp parameter count <= 5000", n);
    }
  } else {
    ri(c.tabular_buckets >= 1, "tabular_buckets", "tabular_buckets >= 1", c.tabular_buckets);
  }
  rd(c.init_scale >= 0.0, "init_scale", "init_scale >= 0", c.init_scale);
  ri(c.group_size >= 2, "group_size", "group_size >= 2", c.group_size);
  ri(c.prompts_per_batch >= 1, "prompts_per_batch", "prompts_per_batch >= 1", c.prompts_per_batch);
  ri(c.minibatch_prompts >= 1 && c.minibatch_prompts <= c.prompts_per_batch, "minibatch_prompts",
     "1 <= minibatch_prompts <= prompts_per_batch", c.minibatch_prompts);
  ri(c.inner_epochs >= 1, "inner_epochs", "inner_epochs >= 1", c.inner_epochs);
  ri(c.max_response_len >= 1, "max_response_len", "max_response_len >= 1", c.max_response_len);
  rd(c.learning_rate > 0.0, "learning_rate", "learning_rate > 0", c.learning_rate);
  rd(c.weight_decay >= 0.0, "weight_decay", "weight_decay >= 0", c.weight_decay);
  rd(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0, "adam_beta1", "0 <= adam_beta1 < 1", c.adam_beta1);
  rd(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0, "adam_beta2", "0 <= adam_beta2 < 1", c.adam_beta2);
  rd(c.adam_eps > 0.0, "adam_eps", "adam_eps > 0", c.adam_eps);
  rd(c.tau > 0.0, "tau", "tau > 0", c.tau);
  rd(c.kappa >= 0.0, "kappa", "kappa >= 0", c.kappa);
  rd(c.adv_epsilon >= 0.0, "adv_epsilon", "adv_epsilon >= 0", c.adv_epsilon);
  rd(c.clip_eps > 0.0 && c.clip_eps < 1.0, "clip_eps", "0 < clip_eps < 1", c.clip_eps);
  rd(c.kl_beta >= 0.0, "kl_beta", "kl_beta >= 0", c.kl_beta);
  rd(c.kl_floor > 0.0, "kl_floor", "kl_floor > 0", c.kl_floor);
  ri(c.total_steps >= 0, "total_steps", "total_steps >= 0", c.total_steps);
  ri(c.eval_every >= 1, "eval_every", "eval_every >= 1", c.eval_every);
  ri(c.eval_k >= 1, "eval_k", "eval_k >= 1", c.eval_k);
  ri(c.eval_instances >= 1, "eval_instances", "eval_instances >= 1", c.eval_instances);
  rd(c.eval_temperature > 0.0, "eval_temperature", "eval_temperature > 0", c.eval_temperature);
  ri(c.checkpoint_every >= 0, "checkpoint_every", "checkpoint_every >= 0", c.checkpoint_every);
  ri(c.pretrain_corpus >= 0, "pretrain_corpus", "pretrain_corpus >= 0", c.pretrain_corpus);
  ri(c.pretrain_epochs >= 0, "pretrain_epochs", "pretrain_epochs >= 0", c.pretrain_epochs);
  rd(c.pretrain_lr > 0.0, "pretrain_lr", "pretrain_lr > 0", c.pretrain_lr);
  ri(c.pretrain_batch >= 1, "pretrain_batch", "pretrain_batch >= 1", c.pretrain_batch);
  rd(c.demo_correct_rate >= 0.0 && c.demo_correct_rate <= 1.0, "demo_correct_rate", "0 <= demo_correct_rate <= 1",
     c.demo_correct_rate);
  rd(c.ref_accuracy_floor >= 0.0 && c.ref_accuracy_floor <= 1.0, "ref_accuracy_floor",
     "0 <= ref_accuracy_floor <= 1", c.ref_accuracy_floor);
  ri(c.threads >= 0, "threads", "threads >= 0", c.threads);
  return issues;
}

ConfigValidation validate_config_text(const std::string& text, const std::vector<std::string>& overrides) {
  ConfigValidation out;
  json doc = json::object();
  if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
    doc = json::parse(text, nullptr, false, true);
    if (doc.is_discarded()) {
      out.issues.push_back({"<file>", "not valid JSON"});
      return out;
    }
    if (!doc.is_object()) {
      out.issues.push_back({"<file>", "top level must be an object of config keys"});
      return out;
    }
  }
  for (const auto& [key, value] : doc.items()) {
    try {
      set_config_value(out.config, key, value);
    } catch (const ConfigError& e) {
      out.issues.push_back({e.key(), std::string(e.what()).substr(e.key().size() + 2)});
    }
  }
  for (const std::string& o : overrides) {
    try {
      apply_override(out.config, o);
    } catch (const ConfigError& e) {
      out.issues.push_back({e.key(), std::string(e.what()).substr(e.key().size() + 2)});
    }
  }
  if (out.issues.empty()) out.issues = check_config(out.config);
  return out;
}

ConfigValidation validate_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw FileError("cannot read config file: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return validate_config_text(ss.str(), overrides);
}

TrainConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  ConfigValidation v = validate_config(path, overrides);
  if (!v.ok()) throw ConfigError(v.issues.front().key, v.issues.front().message);
  return v.config;
}

std::string config_hash(const TrainConfig& cfg) {
  const std::string text = to_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace dgpo
