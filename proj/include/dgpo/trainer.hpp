#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dgpo/config.hpp"
#include "dgpo/evaluate.hpp"
#include "dgpo/rollout.hpp"
#include "dgpo/tasks.hpp"

namespace dgpo {

// Statistics of one optimizer step.
struct UpdateStats {
  double mean_reward = 0.0;  // over the rollout batch the step trained on
  double loss = 0.0;
  double gradient_norm = 0.0;
  double clipped_fraction = 0.0;
  double mean_w = 0.0;
  double max_w = 0.0;
  double mean_d = 0.0;
  double mean_entropy = 0.0;
};

// One row of metrics.csv. Step 0 carries only the initial evaluation; later
// rows carry update statistics and, on the eval cadence, an evaluation.
struct MetricsRecord {
  int step = 0;
  std::optional<UpdateStats> update;
  std::optional<EvalResult> eval;
  double wall_time = 0.0;  // seconds since train() started
};

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const MetricsRecord& record);

// G samples per prompt from `snapshot`, with the snapshot's and the
// reference's full distributions cached per token and rewards verified.
// Sample (p, g) draws from its own stream derived from (seed, p, g).
std::vector<RolloutGroup> collect_rollouts(const PolicyModel& snapshot, const PolicyModel& reference,
                                           std::span<const TaskInstance> prompts, int group_size,
                                           int max_response_len, std::uint64_t seed);

// Fresh model of the configured shape, then maximum-likelihood pretraining.
FrozenPolicy build_reference(const TrainConfig& cfg, PretrainReport* report = nullptr);

// Eval-split instances and sampling seed used for every in-training
// evaluation; `eval` on a checkpoint reuses them.
std::vector<TaskInstance> eval_instances(const TrainConfig& cfg);
std::uint64_t eval_seed(const TrainConfig& cfg);
EvalResult evaluate_policy(const TrainConfig& cfg, const PolicyModel& policy);

struct TrainHooks {
  std::ostream* metrics_csv = nullptr;     // header plus one flushed row per record
  std::ostream* rollouts_jsonl = nullptr;  // credit map of every collected group
  std::filesystem::path checkpoint_dir;    // empty: no checkpoints
  std::filesystem::path diagnostic_path;   // dump target when a loss goes non-finite
  std::function<void(const MetricsRecord&)> on_record;
};

struct TrainResult {
  PolicyModel policy;
  std::vector<MetricsRecord> metrics;
  std::vector<double> step_losses;
  EvalResult final_eval;
};

// The policy starts from the reference parameters. Throws NumericError after
// writing the diagnostic dump when a loss or gradient goes non-finite.
TrainResult train(const TrainConfig& cfg, const PolicyModel& reference, const TrainHooks& hooks = {});

// ---------------------------------------------------------------------------
// Ablation sweeps

struct SweepCell {
  std::string name;
  std::vector<std::string> overrides;  // key=value, applied to the base config
};

struct SweepSpec {
  std::vector<SweepCell> cells;
  std::vector<std::uint64_t> seeds;
};

// Variant ablations, the τ grid {0.1, 0.5, 1, 5} and the κ grid {0, 0.5, 1, 2, 5}.
SweepSpec default_sweep(std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5});

struct CellResult {
  SweepCell cell;
  std::vector<std::optional<double>> final_avg;  // per seed; nullopt when the run failed
  std::vector<std::string> errors;
  std::optional<double> median;                  // over successful seeds
};

using SweepLog = std::function<void(const std::string&)>;

// Every cell trains on the same seeds and budget. References are pretrained
// once per seed and shared across cells. A failing cell is recorded and the
// suite moves on.
std::vector<CellResult> run_ablation_suite(const TrainConfig& base, const SweepSpec& spec,
                                           const SweepLog& log = {});

// name,overrides,seeds,failed,median_avg_at_k,per_seed
void write_ablation_csv(std::ostream& os, std::span<const CellResult> results);

double median(std::vector<double> values);

}  // namespace dgpo
