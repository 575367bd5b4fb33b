#pragma once

#include <vector>

#include "dgpo/policy.hpp"

namespace dgpo {

// One sampled response together with everything the update phase needs from
// the snapshot that produced it. Per-token vectors are indexed by response
// position t in [0, T).
struct RolloutRecord {
  Sequence sequence;
  std::vector<double> old_log_probs;                // log π_old(y_t | ·)
  std::vector<std::vector<double>> old_dists;       // π_old(· | ·), full vocab
  std::vector<std::vector<double>> ref_dists;       // π_ref(· | ·), full vocab
  double reward = 0.0;

  std::size_t length() const { return sequence.length(); }
};

// G responses to the same prompt.
struct RolloutGroup {
  std::size_t instance_index = 0;  // index into the prompt pool it was drawn from
  std::vector<RolloutRecord> records;
};

}  // namespace dgpo
