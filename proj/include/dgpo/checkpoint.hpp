#pragma once

#include <filesystem>

#include "dgpo/policy.hpp"

namespace dgpo {

// Binary checkpoint, all fields little-endian:
//
//   offset  size  field
//   0       8     magic "DGPOCKPT"
//   8       4     u32 format version (1)
//   12      4     u32 kind (0 = tabular, 1 = mlp)
//   16      4     u32 vocab size
//   20      4     u32 end-of-sequence id
//   24      4     u32 context window
//   28      4     u32 hidden width (0 for tabular)
//   32      4     u32 embedding dim (0 for tabular)
//   36      4     u32 bucket count (0 for mlp)
//   40      8     u64 parameter count N
//   48      8*N   f64 parameters
void save_checkpoint(const PolicyModel& model, const std::filesystem::path& path);
PolicyModel load_checkpoint(const std::filesystem::path& path);

}  // namespace dgpo
