#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dgpo/policy.hpp"

namespace dgpo {

enum class FamilyName { modular_chain, copy_reverse, sorted_emit };
enum class Split { train, eval };

std::string to_string(FamilyName f);
FamilyName parse_family(std::string_view name);

/// Synthetic task family. All families share one token layout over a vocab of
/// size V: symbols 0..modulus-1, then BOS = V-4, SEP = V-3 (end of prompt),
/// ANS = V-2 (answer delimiter), EOS = V-1.
///
/// modular_chain, difficulty D, modulus m. Operands x0..xD:
///   prompt   BOS x1 .. xD SEP x0
///   response s1 .. sD ANS sD EOS        with s_j = (s_{j-1} + x_j) mod m, s0 = x0
/// While generating s_j the previous partial sum sits one token back and x_j
/// sits D+2 tokens back, so a window of D+2 tokens suffices.
///
/// copy_reverse, difficulty n:  prompt BOS x1..xn SEP, response ANS xn..x1 EOS
/// sorted_emit,  difficulty n:  prompt BOS x1..xn SEP, response ANS sort(x) EOS
struct TaskFamily {
  FamilyName name = FamilyName::modular_chain;
  Vocab vocab{16, 15};
  Split split = Split::train;
  int difficulty = 3;
  int modulus = 10;

  TokenId bos() const { return vocab.size - 4; }
  TokenId sep() const { return vocab.size - 3; }
  TokenId ans() const { return vocab.size - 2; }
  TokenId eos() const { return vocab.size - 1; }
  // Length of a correct response.
  int response_length() const;
  // Smallest context window under which every answer token is a function of
  // the visible window.
  int required_window() const;
  void validate() const;
};

struct TaskInstance {
  FamilyName family = FamilyName::modular_chain;
  int difficulty = 0;
  std::vector<TokenId> prompt;
  std::vector<TokenId> answer;    // ground-truth answer span
  std::vector<TokenId> solution;  // full correct response
  TokenId ans_token = 0;
  TokenId eos_token = 0;
};

// Tokens after the first answer delimiter up to (excluding) the first EOS;
// nullopt when the response never emits the delimiter.
std::optional<std::vector<TokenId>> answer_span(std::span<const TokenId> response, TokenId ans, TokenId eos);

// Outcome reward: 1 iff the answer span equals the ground truth, else 0.
double verify(const TaskInstance& instance, std::span<const TokenId> response);

// Split membership is a pure function of the prompt content, so train and eval
// sets are disjoint for every pair of seeds.
Split split_of(const TaskFamily& family, std::span<const TokenId> prompt);

std::vector<TaskInstance> generate_instances(const TaskFamily& family, std::size_t n, std::uint64_t seed);

// A demonstration response: the solution, or (correct == false) one with a
// single wrong step whose error propagates to the answer.
std::vector<TokenId> demonstration(const TaskFamily& family, const TaskInstance& instance, bool correct, Rng& rng);

// {"family","difficulty","prompt","answer","solution"} per line.
void write_instances_jsonl(std::ostream& os, std::span<const TaskInstance> instances);
std::vector<TaskInstance> read_instances_jsonl(std::istream& is, const TaskFamily& family);

// ---------------------------------------------------------------------------
// Reference policy

using FrozenPolicy = std::shared_ptr<const PolicyModel>;

struct PretrainConfig {
  std::size_t corpus_size = 4000;
  int epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;
  double demo_correct_rate = 0.5;
  std::uint64_t seed = 1;
  // Accuracy floor on eval-split instances; below it pretraining fails.
  double accuracy_floor = 0.0;
  std::size_t eval_instances = 128;
  int eval_k = 4;
  int max_response_len = 32;
};

struct PretrainReport {
  double final_nll = 0.0;      // mean per-token negative log-likelihood, last epoch
  double eval_accuracy = 0.0;  // avg@k on eval-split instances
};

// Maximum-likelihood fit of `init` on a demonstration corpus. The returned
// model is an immutable snapshot.
FrozenPolicy pretrain_reference(const TaskFamily& family, const PolicyModel& init, const PretrainConfig& cfg,
                                PretrainReport* report = nullptr);

}  // namespace dgpo
