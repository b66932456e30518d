#pragma once

// End-to-end training/eval runner shared by the CLI and the acceptance
// suite. A run directory holds the effective config, line-delimited JSON
// log, CSV metrics, rendered curves and checkpoints, and is sufficient to
// reproduce the run.

#include <filesystem>
#include <optional>
#include <string>

#include "rsvm/backbone.hpp"
#include "rsvm/dataset.hpp"

namespace rsvm {

struct RunConfig {
  // model
  std::string model = "nano";    // nano | nano-micro | small
  std::string variant = "plain";  // plain | res
  int64_t num_classes = 0;        // 0: taken from the dataset
  int64_t input_size = 32;
  int64_t state_size = 0;         // 0: preset default
  int64_t expansion = 0;          // 0: preset default
  int64_t scan_chunk = 16;

  // recipe
  int64_t epochs = 150;
  int64_t warmup_epochs = 20;
  int64_t batch_size = 32;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double warmup_init = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.05;
  double label_smoothing = 0.1;
  double ema_decay = 0.9999;
  uint64_t seed = 1;

  // optional early stop: both thresholds must be met (0 disables each)
  double stop_train_top1 = 0.0;
  double stop_loss_ratio = 0.0;

  // data
  std::string data_root;
  std::string split_list;
  double split_ratio = 0.0;  // > 0: stratified split in memory
  uint64_t split_seed = 42;
  bool synth = false;
  int64_t synth_classes = 4;
  int64_t synth_per_class = 64;
  int64_t synth_size = 32;

  std::string run_dir;  // empty: $RSVM_RUN_DIR or ./runs, plus a run name
  std::string eval_split = "val";
  std::string checkpoint;  // for eval
};

// Plain-text config file: one `key = value` per line, '#' comments.
// Unknown keys are rejected by name.
RunConfig load_run_config(const std::filesystem::path& file);
void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value);
std::string dump_config(const RunConfig& cfg);  // sorted key = value lines

ModelConfig make_model_config(const RunConfig& cfg, int64_t dataset_classes);

struct EpochRecord {
  int64_t epoch = 0;
  int64_t step = 0;  // global optimizer steps so far
  double lr = 0;
  double loss = 0;        // mean smoothed training loss over the epoch
  double train_top1 = 0;  // running accuracy over the epoch's batches
  bool has_val = false;
  double val_top1 = 0, val_top5 = 0;
  double ema_top1 = 0, ema_top5 = 0;
  double wall_s = 0;
};

struct TrainSummary {
  std::vector<EpochRecord> epochs;
  int64_t total_steps = 0;
  double initial_train_ce = 0;  // hard-label CE on the train split, untrained
  double final_train_ce = 0;    // same after training
  double final_train_top1 = 0, final_train_top5 = 0;
  double final_val_top1 = 0, final_val_top5 = 0;
  double final_ema_top1 = 0, final_ema_top5 = 0;
  double best_val_top1 = 0;
  int64_t best_epoch = -1;
  bool stopped_early = false;
  std::filesystem::path run_dir;
};

TrainSummary run_training(const RunConfig& cfg);

// Decoded, normalized images of one split held in memory.
struct LoadedSplit {
  int64_t n = 0, size = 0;
  std::vector<float> pixels;  // n * 3 * size * size, normalized to [-1, 1]
  std::vector<int64_t> labels;

  Tensor<float> batch(const std::vector<int64_t>& indices) const;
};

LoadedSplit load_split(const DatasetIndex& idx, Split split, int64_t size);

struct EvalMetrics {
  double top1 = 0, top5 = 0;
  double ce = 0;  // hard-label cross entropy
  int64_t n = 0;
};

EvalMetrics evaluate_model(VMambaModel<float>& model, const LoadedSplit& data, int64_t batch_size);

}  // namespace rsvm
