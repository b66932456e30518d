#pragma once

// Checkpoint format (little-endian throughout):
//   bytes 0..3   magic "RSVM"
//   u32          format version (1)
//   i32 x 15     config: stage_depths[4], stage_dims[4], state_size,
//                expansion, num_classes, variant (0 plain / 1 res),
//                input_h, input_w, scan_chunk
//   u32          tensor count
//   per tensor:  u32 name length, name bytes, u32 rank, i64 extents...,
//                raw float32 data
// Save/load round-trips are bitwise stable.

#include <filesystem>
#include <map>

#include "rsvm/backbone.hpp"

namespace rsvm {

void save_checkpoint(const std::filesystem::path& file, VMambaModel<float>& model);

struct LoadedCheckpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, std::vector<float>>> tensors;
  std::map<std::string, size_t> by_name;
};

LoadedCheckpoint read_checkpoint(const std::filesystem::path& file);

// Builds a model from the stored config and installs the stored weights.
VMambaModel<float> load_checkpoint(const std::filesystem::path& file);

}  // namespace rsvm
