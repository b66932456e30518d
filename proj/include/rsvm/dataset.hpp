#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "rsvm/common.hpp"

namespace rsvm {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

std::optional<Split> split_from_name(const std::string& name);

struct DatasetRecord {
  std::string rel_path;  // "class_dir/file.png"
  int64_t class_id = 0;
  Split split = Split::train;
};

// Class-labeled image catalog. Class ids are dense 0..n-1 in lexicographic
// class-directory order; records are sorted by path.
struct DatasetIndex {
  std::filesystem::path root;
  std::vector<std::string> class_names;
  std::vector<DatasetRecord> records;
  int64_t skipped_files = 0;

  int64_t num_classes() const { return static_cast<int64_t>(class_names.size()); }
  std::vector<int64_t> class_counts() const;
  std::vector<int64_t> class_counts(Split s) const;
  int64_t count(Split s) const;
};

// Walks root/<class_dir>/<image files>; classes and files sorted
// lexicographically, files restricted to the png/jpg/jpeg allowlist,
// unopenable files counted in skipped_files. All records start as train.
DatasetIndex scan_image_directory(const std::filesystem::path& root);

// Per class: seeded shuffle, first round(ratio * count) records to train,
// remainder to val. Classes with fewer than two images stay whole in train
// (reported via the return value). Records marked test are untouched.
int64_t stratified_split(DatasetIndex& idx, double ratio, uint64_t seed);

// One record per line, "rel_path<TAB>split_name", sorted by path.
void write_split_list(const DatasetIndex& idx, const std::filesystem::path& file);
void apply_split_list(DatasetIndex& idx, const std::filesystem::path& file);

// Shannon entropy of the class distribution over log2, normalized by
// log2(n). Exactly 1 for a uniform distribution, approaches 0 as mass
// degenerates onto one class. Requires n >= 2.
double normalized_entropy(const std::vector<int64_t>& counts);

struct SizeStats {
  int64_t n_images = 0;
  int64_t max_h = 0, min_h = 0, max_w = 0, min_w = 0;
  double mean_h = 0, std_h = 0, mean_w = 0, std_w = 0;  // population std
  std::vector<std::string> undecodable;
};

// Header-only dimension reads; undecodable files are listed and excluded.
SizeStats image_size_stats(const DatasetIndex& idx);

// Synthetic fine-grained dataset: oriented gratings whose frequency steps by
// a small delta between neighboring classes, with per-image phase jitter and
// pixel noise. Deterministic per seed. Writes PNG files under
// out/class_XXX/ and returns the scanned index.
DatasetIndex synth_dataset_generate(int64_t classes, int64_t per_class, int64_t size,
                                    uint64_t seed, const std::filesystem::path& out);

}  // namespace rsvm
