#include "dgpo/evaluate.hpp"

#include "dgpo/error.hpp"
#include "dgpo/parallel.hpp"
#include "dgpo/seeding.hpp"

namespace dgpo {

EvalResult summarize_outcomes(const std::vector<std::vector<SampleOutcome>>& outcomes,
                              std::span<const TaskInstance> instances) {
  if (outcomes.size() != instances.size()) throw InputError("outcomes do not match instance count");
  if (outcomes.empty()) throw InputError("no instances to summarize");
  EvalResult r;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& samples = outcomes[i];
    if (samples.empty()) throw InputError("instance without samples");
    std::size_t correct = 0;
    // Distinct answers in first-seen order with their counts.
    std::vector<std::pair<std::optional<std::vector<TokenId>>, std::size_t>> votes;
    for (const SampleOutcome& s : samples) {
      correct += s.correct ? 1 : 0;
      auto it = std::find_if(votes.begin(), votes.end(), [&](const auto& v) { return v.first == s.answer; });
      if (it == votes.end()) {
        votes.emplace_back(s.answer, 1);
      } else {
        ++it->second;
      }
    }
    std::size_t best = 0;
    for (std::size_t v = 1; v < votes.size(); ++v) {
      if (votes[v].second > votes[best].second) best = v;
    }
    r.avg_at_k += static_cast<double>(correct) / static_cast<double>(samples.size());
    r.pass_at_k += correct > 0 ? 1.0 : 0.0;
    r.cons_at_k += votes[best].first && *votes[best].first == instances[i].answer ? 1.0 : 0.0;
  }
  const auto n = static_cast<double>(outcomes.size());
  r.avg_at_k /= n;
  r.pass_at_k /= n;
  r.cons_at_k /= n;
  return r;
}

EvalResult evaluate(const PolicyModel& policy, std::span<const TaskInstance> instances, int k, double temperature,
                    std::uint64_t seed, int max_response_len) {
  if (k < 1) throw InputError("evaluate needs k >= 1");
  std::vector<std::vector<SampleOutcome>> outcomes(instances.size());
  SampleOptions opts;
  opts.temperature = temperature;
  parallel_for(instances.size(), [&](std::size_t i) {
    Rng rng(derive_seed(seed, {i}));
    const TaskInstance& inst = instances[i];
    outcomes[i].resize(static_cast<std::size_t>(k));
    for (int s = 0; s < k; ++s) {
      const SampledSequence seq = sample_sequence(policy, inst.prompt, max_response_len, rng, opts);
      SampleOutcome& o = outcomes[i][static_cast<std::size_t>(s)];
      o.answer = answer_span(seq.sequence.response, inst.ans_token, inst.eos_token);
      o.correct = verify(inst, seq.sequence.response) == 1.0;
    }
  });
  return summarize_outcomes(outcomes, instances);
}

}  // namespace dgpo
