#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dgpo/policy.hpp"
#include "dgpo/tasks.hpp"

namespace dgpo {

struct EvalResult {
  double avg_at_k = 0.0;   // mean per-sample correctness
  double pass_at_k = 0.0;  // fraction of instances with at least one correct sample
  double cons_at_k = 0.0;  // fraction whose most frequent answer is correct
};

struct SampleOutcome {
  std::optional<std::vector<TokenId>> answer;  // nullopt: no answer delimiter emitted
  bool correct = false;
};

// outcomes[i] holds the k samples of instance i. For cons@k, malformed samples
// form their own answer class; ties go to the answer seen first.
EvalResult summarize_outcomes(const std::vector<std::vector<SampleOutcome>>& outcomes,
                              std::span<const TaskInstance> instances);

EvalResult evaluate(const PolicyModel& policy, std::span<const TaskInstance> instances, int k, double temperature,
                    std::uint64_t seed, int max_response_len = 32);

}  // namespace dgpo
