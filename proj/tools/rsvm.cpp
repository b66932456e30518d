// Command-line surface: train, eval, analyze, split, synth, verify,
// bench-scan. Exit codes: 0 success, 1 usage/config error, 2 verification
// failure, 3 I/O error.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "rsvm/checkpoint.hpp"
#include "rsvm/dataset.hpp"
#include "rsvm/train_runner.hpp"
#include "rsvm/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace rsvm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerifyFailed = 2;
constexpr int kExitIo = 3;

struct CommonTrainFlags {
  std::string config_file;
  std::vector<std::string> overrides;  // key=value
};

RunConfig build_config(const CommonTrainFlags& flags) {
  RunConfig cfg;
  if (!flags.config_file.empty()) cfg = load_run_config(flags.config_file);
  for (const auto& kv : flags.overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    apply_config_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

int cmd_train(const RunConfig& cfg) {
  auto summary = run_training(cfg);
  std::printf("run directory: %s\n", summary.run_dir.c_str());
  std::printf("epochs run: %zu (%lld optimizer steps)%s\n", summary.epochs.size(),
              static_cast<long long>(summary.total_steps), summary.stopped_early ? ", stopped early" : "");
  std::printf("train: top-1 %.4f  top-5 %.4f  ce %.4f (initial ce %.4f)\n", summary.final_train_top1,
              summary.final_train_top5, summary.final_train_ce, summary.initial_train_ce);
  if (!summary.epochs.empty() && summary.epochs.back().has_val) {
    std::printf("val:   top-1 %.4f  top-5 %.4f\n", summary.final_val_top1, summary.final_val_top5);
    std::printf("ema:   top-1 %.4f  top-5 %.4f\n", summary.final_ema_top1, summary.final_ema_top5);
  }
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_root,
             const std::string& split_list, const std::string& split, int64_t batch,
             const std::string& out_file) {
  auto model = load_checkpoint(checkpoint);
  auto idx = scan_image_directory(data_root);
  if (!split_list.empty()) apply_split_list(idx, split_list);
  auto which = split_from_name(split);
  if (!which) throw ConfigError("unknown split '" + split + "'");
  auto data = load_split(idx, *which, model.cfg.input_h);
  if (data.n == 0) throw ConfigError("split '" + split + "' is empty under " + data_root);
  auto m = evaluate_model(model, data, batch);
  std::printf("%s: n=%lld  top-1 %.4f  top-5 %.4f  ce %.4f\n", split.c_str(),
              static_cast<long long>(m.n), m.top1, m.top5, m.ce);
  if (!out_file.empty()) {
    json j{{"split", split}, {"n", m.n}, {"top1", m.top1}, {"top5", m.top5}, {"ce", m.ce}};
    std::ofstream(out_file) << j.dump(2) << "\n";
  }
  return kExitOk;
}

int cmd_analyze(const std::string& root, const std::string& out_file) {
  auto idx = scan_image_directory(root);
  auto counts = idx.class_counts();
  auto stats = image_size_stats(idx);
  double entropy = idx.num_classes() >= 2 ? normalized_entropy(counts) : 0.0;

  json per_class = json::object();
  for (int64_t c = 0; c < idx.num_classes(); ++c) per_class[idx.class_names[c]] = counts[c];
  char size_fmt[128];
  std::snprintf(size_fmt, sizeof size_fmt, "%.2f±%.2f x %.2f±%.2f", stats.mean_h, stats.std_h,
                stats.mean_w, stats.std_w);
  json report{{"root", root},
              {"classes", idx.num_classes()},
              {"images", idx.records.size()},
              {"skipped_files", idx.skipped_files},
              {"class_counts", per_class},
              {"normalized_entropy", entropy},
              {"size_stats",
               {{"n", stats.n_images},
                {"max_h", stats.max_h},
                {"min_h", stats.min_h},
                {"max_w", stats.max_w},
                {"min_w", stats.min_w},
                {"mean_std", size_fmt},
                {"mean_h", stats.mean_h},
                {"std_h", stats.std_h},
                {"mean_w", stats.mean_w},
                {"std_w", stats.std_w}}},
              {"undecodable", stats.undecodable}};
  std::string text = report.dump(2) + "\n";
  std::cout << text;
  if (!out_file.empty()) {
    std::ofstream out(out_file, std::ios::binary);
    if (!out) throw IoError("cannot write report " + out_file);
    out << text;
  }
  return kExitOk;
}

int cmd_split(const std::string& root, double ratio, uint64_t seed, const std::string& out_file) {
  auto idx = scan_image_directory(root);
  int64_t whole = stratified_split(idx, ratio, seed);
  if (whole > 0)
    std::fprintf(stderr, "warning: %lld classes had fewer than 2 images; kept whole in train\n",
                 static_cast<long long>(whole));
  write_split_list(idx, out_file);
  std::printf("wrote %s: %lld train / %lld val over %lld classes\n", out_file.c_str(),
              static_cast<long long>(idx.count(Split::train)), static_cast<long long>(idx.count(Split::val)),
              static_cast<long long>(idx.num_classes()));
  return kExitOk;
}

int cmd_synth(int64_t classes, int64_t per_class, int64_t size, uint64_t seed, const std::string& out) {
  auto idx = synth_dataset_generate(classes, per_class, size, seed, out);
  std::printf("wrote %zu images across %lld classes under %s\n", idx.records.size(),
              static_cast<long long>(idx.num_classes()), out.c_str());
  return kExitOk;
}

int cmd_verify(bool fast) {
  auto results = run_verification(!fast);
  bool all_pass = true;
  for (const auto& r : results) {
    all_pass = all_pass && r.pass;
    std::printf("%-24s %s  max err %.3e (threshold %.1e)%s%s\n", r.name.c_str(),
                r.pass ? "PASS" : "FAIL", r.measure, r.threshold, r.detail.empty() ? "" : "  ",
                r.detail.c_str());
  }
  std::printf("%s\n", all_pass ? "all verification suites passed" : "VERIFICATION FAILED");
  return all_pass ? kExitOk : kExitVerifyFailed;
}

int cmd_bench_scan(int64_t batch, int64_t length, int64_t dim, int64_t state,
                   const std::vector<int64_t>& chunks, int reps) {
  std::mt19937_64 eng(1);
  std::uniform_real_distribution<double> dist(-1, 1);
  DiscretizedStep<float> step;
  step.a_bar = Tensor<float>::zeros({batch, length, dim, state});
  step.b_bar_x = Tensor<float>::zeros({batch, length, dim, state});
  for (auto& v : step.a_bar.data()) v = static_cast<float>(0.05 + 0.9 * std::abs(dist(eng)));
  for (auto& v : step.b_bar_x.data()) v = static_cast<float>(dist(eng));
  auto c_sel = Tensor<float>::zeros({batch, length, state});
  auto d_skip = Tensor<float>::ones({dim});
  auto x = Tensor<float>::zeros({batch, length, dim});
  for (auto& v : c_sel.data()) v = static_cast<float>(dist(eng));
  for (auto& v : x.data()) v = static_cast<float>(dist(eng));

  NoGradGuard ng;
  auto time_it = [&](auto&& fn) {
    fn();  // warm up
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / reps;
  };

  double ref_ms = time_it([&] { selective_scan_ref(step, c_sel, d_skip, x); });
  std::printf("B=%lld L=%lld D=%lld N=%lld, %d reps\n", static_cast<long long>(batch),
              static_cast<long long>(length), static_cast<long long>(dim),
              static_cast<long long>(state), reps);
  std::printf("%-14s %8.3f ms\n", "reference", ref_ms);
  for (int64_t chunk : chunks) {
    double ms = time_it([&] { selective_scan_fast(step, c_sel, d_skip, x, chunk); });
    std::printf("fast chunk=%-4lld %8.3f ms  (%.2fx)\n", static_cast<long long>(chunk), ms, ref_ms / ms);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"selective state-space vision classifier toolkit"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a model and write a run directory");
  CommonTrainFlags train_flags;
  train->add_option("--config", train_flags.config_file, "config file (key = value lines)");
  train->add_option("--set", train_flags.overrides, "override any config key, key=value")->take_all();
  bool synth_flag = false;
  std::string model_flag, variant_flag, data_flag, run_dir_flag;
  int64_t epochs_flag = -1, seed_flag = -1, batch_flag = -1;
  train->add_flag("--synth", synth_flag, "train on a generated synthetic dataset");
  train->add_option("--model", model_flag, "model preset: nano | nano-micro | small");
  train->add_option("--variant", variant_flag, "plain | res");
  train->add_option("--data", data_flag, "dataset root (class directories)");
  train->add_option("--run-dir", run_dir_flag, "run directory (default $RSVM_RUN_DIR or ./runs)");
  train->add_option("--epochs", epochs_flag, "training epochs");
  train->add_option("--seed", seed_flag, "seed for init, shuffling and synth data");
  train->add_option("--batch", batch_flag, "batch size");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  std::string eval_ckpt, eval_data, eval_split_list, eval_split = "val", eval_out;
  int64_t eval_batch = 32;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset root")->required();
  eval->add_option("--split-list", eval_split_list, "split list file");
  eval->add_option("--split", eval_split, "train | val | test (default val)");
  eval->add_option("--batch", eval_batch, "batch size");
  eval->add_option("--out", eval_out, "write metrics JSON here");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "class counts, normalized entropy, size stats");
  std::string an_root, an_out;
  analyze->add_option("root", an_root, "dataset root")->required();
  analyze->add_option("--out", an_out, "write the JSON report here");

  // split
  auto* split = app.add_subcommand("split", "write a stratified train/val split list");
  std::string sp_root, sp_out = "split_list.tsv";
  double sp_ratio = 0.7;
  uint64_t sp_seed = 42;
  split->add_option("root", sp_root, "dataset root")->required();
  split->add_option("--ratio", sp_ratio, "train fraction (default 0.7)");
  split->add_option("--seed", sp_seed, "shuffle seed");
  split->add_option("--out", sp_out, "output file");

  // synth
  auto* synth = app.add_subcommand("synth", "generate the synthetic grating dataset");
  int64_t sy_classes = 4, sy_per = 64, sy_size = 32;
  uint64_t sy_seed = 1;
  std::string sy_out = "synth_data";
  synth->add_option("--classes", sy_classes, "number of classes");
  synth->add_option("--per-class", sy_per, "images per class");
  synth->add_option("--size", sy_size, "image side (multiple of 32)");
  synth->add_option("--seed", sy_seed, "generator seed");
  synth->add_option("--out", sy_out, "output directory");

  // verify
  auto* verify = app.add_subcommand("verify", "run the numerical verification suites");
  bool verify_fast = false;
  verify->add_flag("--fast", verify_fast, "skip the whole-model finite-difference suite");

  // bench-scan
  auto* bench = app.add_subcommand("bench-scan", "time the reference vs chunked scan");
  int64_t bn_batch = 2, bn_len = 1024, bn_dim = 32, bn_state = 16;
  int bn_reps = 5;
  std::vector<int64_t> bn_chunks{1, 8, 16, 64, 256};
  bench->add_option("--batch", bn_batch, "batch size");
  bench->add_option("--length", bn_len, "sequence length");
  bench->add_option("--dim", bn_dim, "channel count");
  bench->add_option("--state", bn_state, "state size");
  bench->add_option("--chunks", bn_chunks, "chunk sizes to time")->take_all();
  bench->add_option("--reps", bn_reps, "repetitions per timing");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      RunConfig cfg = build_config(train_flags);
      if (synth_flag) cfg.synth = true;
      if (!model_flag.empty()) cfg.model = model_flag;
      if (!variant_flag.empty()) cfg.variant = variant_flag;
      if (!data_flag.empty()) cfg.data_root = data_flag;
      if (!run_dir_flag.empty()) cfg.run_dir = run_dir_flag;
      if (epochs_flag >= 0) cfg.epochs = epochs_flag;
      if (seed_flag >= 0) cfg.seed = static_cast<uint64_t>(seed_flag);
      if (batch_flag >= 0) cfg.batch_size = batch_flag;
      return cmd_train(cfg);
    }
    if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_split_list, eval_split, eval_batch, eval_out);
    if (*analyze) return cmd_analyze(an_root, an_out);
    if (*split) return cmd_split(sp_root, sp_ratio, sp_seed, sp_out);
    if (*synth) return cmd_synth(sy_classes, sy_per, sy_size, sy_seed, sy_out);
    if (*verify) return cmd_verify(verify_fast);
    if (*bench) return cmd_bench_scan(bn_batch, bn_len, bn_dim, bn_state, bn_chunks, bn_reps);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "invalid argument: %s\n", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
