#include "dgpo/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "dgpo/checkpoint.hpp"
#include "dgpo/error.hpp"
#include "dgpo/optimizer.hpp"
#include "dgpo/parallel.hpp"
#include "dgpo/seeding.hpp"

namespace dgpo {

namespace {

// Stream tags under the root seed.
enum : std::uint64_t {
  kInitTag = 1,
  kPretrainTag = 2,
  kEvalSetTag = 3,
  kEvalSampleTag = 4,
  kPromptTag = 5,
  kRolloutTag = 6,
};

void put(std::ostream& os, const std::optional<double>& v) {
  if (v) os << *v;
}

std::vector<double> exp_all(std::span<const double> lp) {
  std::vector<double> p(lp.size());
  for (std::size_t a = 0; a < lp.size(); ++a) p[a] = std::exp(lp[a]);
  return p;
}

// Writes the offending batch; items without credit (a failure during
// collection) carry only the rollout fields.
void dump_batch(const std::filesystem::path& path, int step, const std::string& reason,
                std::span<const BatchItem> batch) {
  if (path.empty()) return;
  nlohmann::json j;
  j["step"] = step;
  j["error"] = reason;
  j["sequences"] = nlohmann::json::array();
  auto finite_or_null = [](const std::vector<double>& v) {
    nlohmann::json out = nlohmann::json::array();
    for (double x : v) out.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
    return out;
  };
  for (const BatchItem& item : batch) {
    nlohmann::json s;
    s["prompt"] = item.record->sequence.prompt;
    s["response"] = item.record->sequence.response;
    s["old_log_probs"] = finite_or_null(item.record->old_log_probs);
    s["reward"] = item.record->reward;
    if (item.credit) {
      s["sequence_advantage"] = item.credit->sequence_advantage;
      s["d"] = finite_or_null(item.credit->deviations);
      s["w"] = finite_or_null(item.credit->weights);
      s["advantage"] = finite_or_null(item.credit->advantages);
    }
    j["sequences"].push_back(std::move(s));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream(path) << j.dump(1) << '\n';
}

}  // namespace

void write_metrics_header(std::ostream& os) {
  os << "step,mean_reward,eval_avg_at_k,eval_pass_at_k,eval_cons_at_k,loss,gradient_norm,clipped_fraction,"
        "mean_w,max_w,mean_d,mean_entropy,wall_time\n";
}

void write_metrics_row(std::ostream& os, const MetricsRecord& r) {
  const auto flags = os.flags();
  const auto precision = os.precision(10);
  auto u = [&](double UpdateStats::*m) -> std::optional<double> {
    if (!r.update) return std::nullopt;
    return (*r.update).*m;
  };
  auto e = [&](double EvalResult::*m) -> std::optional<double> {
    if (!r.eval) return std::nullopt;
    return (*r.eval).*m;
  };
  os << r.step << ',';
  put(os, u(&UpdateStats::mean_reward));
  os << ',';
  put(os, e(&EvalResult::avg_at_k));
  os << ',';
  put(os, e(&EvalResult::pass_at_k));
  os << ',';
  put(os, e(&EvalResult::cons_at_k));
  for (auto m : {&UpdateStats::loss, &UpdateStats::gradient_norm, &UpdateStats::clipped_fraction,
                 &UpdateStats::mean_w, &UpdateStats::max_w, &UpdateStats::mean_d, &UpdateStats::mean_entropy}) {
    os << ',';
    put(os, u(m));
  }
  os << ',' << r.wall_time << '\n';
  os.precision(precision);
  os.flags(flags);
}

std::vector<RolloutGroup> collect_rollouts(const PolicyModel& snapshot, const PolicyModel& reference,
                                           std::span<const TaskInstance> prompts, int group_size,
                                           int max_response_len, std::uint64_t seed) {
  if (group_size < 1) throw InputError("group_size must be >= 1");
  if (!(snapshot.shape().vocab == reference.shape().vocab)) {
    throw SetupError("policy and reference vocabularies differ");
  }
  const auto g = static_cast<std::size_t>(group_size);
  std::vector<RolloutGroup> groups(prompts.size());
  for (std::size_t p = 0; p < prompts.size(); ++p) {
    groups[p].instance_index = p;
    groups[p].records.resize(g);
  }
  SampleOptions opts;
  opts.keep_distributions = true;
  parallel_for(prompts.size() * g, [&](std::size_t job) {
    const std::size_t p = job / g;
    const std::size_t m = job % g;
    Rng rng(derive_seed(seed, {p, m}));
    SampledSequence s = sample_sequence(snapshot, prompts[p].prompt, max_response_len, rng, opts);
    RolloutRecord& rec = groups[p].records[m];
    rec.sequence = std::move(s.sequence);
    rec.old_log_probs = std::move(s.log_probs);
    rec.old_dists.reserve(rec.length());
    rec.ref_dists.reserve(rec.length());
    for (std::size_t t = 0; t < rec.length(); ++t) {
      rec.old_dists.push_back(exp_all(s.step_log_probs[t]));
      rec.ref_dists.push_back(exp_all(reference.log_probs(rec.sequence.context_at(t))));
    }
    rec.reward = verify(prompts[p], rec.sequence.response);
  });
  return groups;
}

FrozenPolicy build_reference(const TrainConfig& cfg, PretrainReport* report) {
  PolicyModel init(cfg.model_shape());
  init.init_gaussian(derive_seed(cfg.seed, {kInitTag}), cfg.init_scale);
  PretrainConfig pc = cfg.pretrain_config();
  pc.seed = derive_seed(cfg.seed, {kPretrainTag});
  return pretrain_reference(cfg.task_family(), init, pc, report);
}

std::vector<TaskInstance> eval_instances(const TrainConfig& cfg) {
  return generate_instances(cfg.task_family(Split::eval), static_cast<std::size_t>(cfg.eval_instances),
                            derive_seed(cfg.seed, {kEvalSetTag}));
}

std::uint64_t eval_seed(const TrainConfig& cfg) { return derive_seed(cfg.seed, {kEvalSampleTag}); }

EvalResult evaluate_policy(const TrainConfig& cfg, const PolicyModel& policy) {
  const auto set = eval_instances(cfg);
  return evaluate(policy, set, cfg.eval_k, cfg.eval_temperature, eval_seed(cfg), cfg.max_response_len);
}

TrainResult train(const TrainConfig& cfg, const PolicyModel& reference, const TrainHooks& hooks) {
  const auto issues = check_config(cfg);
  if (!issues.empty()) throw ConfigError(issues.front().key, issues.front().message);
  if (!(reference.shape() == cfg.model_shape())) throw SetupError("reference shape does not match the config");
  if (cfg.threads > 0) set_thread_count(cfg.threads);

  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  TrainResult result{reference, {}, {}, {}};
  PolicyModel& policy = result.policy;
  const auto eval_set = eval_instances(cfg);
  const std::uint64_t eseed = eval_seed(cfg);
  auto run_eval = [&] {
    return evaluate(policy, eval_set, cfg.eval_k, cfg.eval_temperature, eseed, cfg.max_response_len);
  };

  if (hooks.metrics_csv) write_metrics_header(*hooks.metrics_csv);
  auto emit = [&](MetricsRecord rec) {
    rec.wall_time = elapsed();
    if (hooks.metrics_csv) {
      write_metrics_row(*hooks.metrics_csv, rec);
      hooks.metrics_csv->flush();
    }
    if (hooks.on_record) hooks.on_record(rec);
    result.metrics.push_back(std::move(rec));
  };
  auto save = [&](const std::string& name) {
    if (hooks.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(hooks.checkpoint_dir);
    save_checkpoint(policy, hooks.checkpoint_dir / name);
  };

  MetricsRecord initial;
  initial.eval = run_eval();
  result.final_eval = *initial.eval;
  emit(initial);

  const SurrogateConfig surrogate = cfg.surrogate();
  const CreditConfig credit_cfg = cfg.credit();
  Optimizer opt(cfg.optimizer_config(), policy.param_count());
  const TaskFamily train_family = cfg.task_family(Split::train);
  const auto per_batch = static_cast<std::size_t>(cfg.prompts_per_batch);
  const auto per_minibatch = static_cast<std::size_t>(cfg.minibatch_prompts);

  int step = 0;
  std::uint64_t batch_index = 0;
  std::size_t group_counter = 0;
  while (step < cfg.total_steps) {
    const auto prompts = generate_instances(train_family, per_batch, derive_seed(cfg.seed, {kPromptTag, batch_index}));
    const PolicyModel snapshot = policy;
    const auto groups = collect_rollouts(snapshot, reference, prompts, cfg.group_size, cfg.max_response_len,
                                         derive_seed(cfg.seed, {kRolloutTag, batch_index}));
    for (const RolloutGroup& g : groups) {
      for (const RolloutRecord& r : g.records) {
        const bool finite = std::all_of(r.old_log_probs.begin(), r.old_log_probs.end(),
                                        [](double x) { return !std::isnan(x); });
        if (!finite) {
          std::vector<BatchItem> all;
          for (const RolloutGroup& h : groups) {
            for (const RolloutRecord& q : h.records) all.push_back({&q, nullptr});
          }
          const std::string what = "non-finite policy output while collecting rollouts after step " +
                                   std::to_string(step);
          dump_batch(hooks.diagnostic_path, step, what, all);
          throw NumericError(what);
        }
      }
    }
    std::vector<CreditMap> credit(groups.size());
    parallel_for(groups.size(), [&](std::size_t p) { credit[p] = build_credit_map(groups[p], credit_cfg); });
    double batch_reward = 0.0;
    std::size_t batch_count = 0;
    for (const RolloutGroup& g : groups) {
      for (const RolloutRecord& r : g.records) {
        batch_reward += r.reward;
        ++batch_count;
      }
    }
    batch_reward /= static_cast<double>(batch_count);
    if (hooks.rollouts_jsonl) {
      for (const CreditMap& c : credit) write_credit_jsonl(*hooks.rollouts_jsonl, c, group_counter++);
    }

    for (int epoch = 0; epoch < cfg.inner_epochs && step < cfg.total_steps; ++epoch) {
      for (std::size_t lo = 0; lo < groups.size() && step < cfg.total_steps; lo += per_minibatch) {
        const std::size_t hi = std::min(groups.size(), lo + per_minibatch);
        std::vector<BatchItem> items;
        UpdateStats stats;
        stats.mean_reward = batch_reward;
        std::size_t tokens = 0;
        for (std::size_t p = lo; p < hi; ++p) {
          for (std::size_t m = 0; m < groups[p].records.size(); ++m) {
            const SequenceCredit& c = credit[p][m];
            items.push_back({&groups[p].records[m], &c});
            for (std::size_t t = 0; t < c.length(); ++t) {
              stats.mean_w += c.weights[t];
              stats.max_w = std::max(stats.max_w, c.weights[t]);
              stats.mean_d += c.deviations[t];
              stats.mean_entropy += c.entropies[t];
            }
            tokens += c.length();
          }
        }
        stats.mean_w /= static_cast<double>(tokens);
        stats.mean_d /= static_cast<double>(tokens);
        stats.mean_entropy /= static_cast<double>(tokens);

        LossReport report;
        try {
          report = policy_gradient(policy, items, surrogate);
        } catch (const NumericError& e) {
          dump_batch(hooks.diagnostic_path, step + 1, e.what(), items);
          throw;
        }
        if (!std::isfinite(report.loss) || !std::isfinite(report.gradient_norm)) {
          const std::string what = "non-finite loss " + std::to_string(report.loss) + " at step " +
                                   std::to_string(step + 1);
          dump_batch(hooks.diagnostic_path, step + 1, what, items);
          throw NumericError(what);
        }
        opt.step(policy.params(), report.gradient);
        ++step;
        result.step_losses.push_back(report.loss);
        stats.loss = report.loss;
        stats.gradient_norm = report.gradient_norm;
        stats.clipped_fraction = report.clipped_fraction;

        MetricsRecord rec;
        rec.step = step;
        rec.update = stats;
        if (step % cfg.eval_every == 0 || step == cfg.total_steps) {
          rec.eval = run_eval();
          result.final_eval = *rec.eval;
        }
        emit(std::move(rec));
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
          std::ostringstream name;
          name << "step_" << std::setw(6) << std::setfill('0') << step << ".ckpt";
          save(name.str());
        }
      }
    }
    ++batch_index;
  }
  save("final.ckpt");
  return result;
}

}  // namespace dgpo
