#include "rsvm/train_runner.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>

#include "rsvm/checkpoint.hpp"
#include "rsvm/image_io.hpp"
#include "rsvm/plot.hpp"
#include "rsvm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace rsvm {

namespace {

using Setter = std::function<void(RunConfig&, const std::string&)>;

int64_t to_int(const std::string& v) { return std::stoll(v); }
double to_double(const std::string& v) { return std::stod(v); }
bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected boolean, got '" + v + "'");
}

const std::map<std::string, Setter>& config_keys() {
  static const std::map<std::string, Setter> keys = {
      {"model", [](RunConfig& c, const std::string& v) { c.model = v; }},
      {"variant", [](RunConfig& c, const std::string& v) { c.variant = v; }},
      {"num_classes", [](RunConfig& c, const std::string& v) { c.num_classes = to_int(v); }},
      {"input_size", [](RunConfig& c, const std::string& v) { c.input_size = to_int(v); }},
      {"state_size", [](RunConfig& c, const std::string& v) { c.state_size = to_int(v); }},
      {"expansion", [](RunConfig& c, const std::string& v) { c.expansion = to_int(v); }},
      {"scan_chunk", [](RunConfig& c, const std::string& v) { c.scan_chunk = to_int(v); }},
      {"epochs", [](RunConfig& c, const std::string& v) { c.epochs = to_int(v); }},
      {"warmup_epochs", [](RunConfig& c, const std::string& v) { c.warmup_epochs = to_int(v); }},
      {"batch_size", [](RunConfig& c, const std::string& v) { c.batch_size = to_int(v); }},
      {"lr_max", [](RunConfig& c, const std::string& v) { c.lr_max = to_double(v); }},
      {"lr_min", [](RunConfig& c, const std::string& v) { c.lr_min = to_double(v); }},
      {"warmup_init", [](RunConfig& c, const std::string& v) { c.warmup_init = to_double(v); }},
      {"beta1", [](RunConfig& c, const std::string& v) { c.beta1 = to_double(v); }},
      {"beta2", [](RunConfig& c, const std::string& v) { c.beta2 = to_double(v); }},
      {"weight_decay", [](RunConfig& c, const std::string& v) { c.weight_decay = to_double(v); }},
      {"label_smoothing", [](RunConfig& c, const std::string& v) { c.label_smoothing = to_double(v); }},
      {"ema_decay", [](RunConfig& c, const std::string& v) { c.ema_decay = to_double(v); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = static_cast<uint64_t>(to_int(v)); }},
      {"stop_train_top1", [](RunConfig& c, const std::string& v) { c.stop_train_top1 = to_double(v); }},
      {"stop_loss_ratio", [](RunConfig& c, const std::string& v) { c.stop_loss_ratio = to_double(v); }},
      {"data_root", [](RunConfig& c, const std::string& v) { c.data_root = v; }},
      {"split_list", [](RunConfig& c, const std::string& v) { c.split_list = v; }},
      {"split_ratio", [](RunConfig& c, const std::string& v) { c.split_ratio = to_double(v); }},
      {"split_seed", [](RunConfig& c, const std::string& v) { c.split_seed = static_cast<uint64_t>(to_int(v)); }},
      {"synth", [](RunConfig& c, const std::string& v) { c.synth = to_bool(v); }},
      {"synth_classes", [](RunConfig& c, const std::string& v) { c.synth_classes = to_int(v); }},
      {"synth_per_class", [](RunConfig& c, const std::string& v) { c.synth_per_class = to_int(v); }},
      {"synth_size", [](RunConfig& c, const std::string& v) { c.synth_size = to_int(v); }},
      {"run_dir", [](RunConfig& c, const std::string& v) { c.run_dir = v; }},
      {"eval_split", [](RunConfig& c, const std::string& v) { c.eval_split = v; }},
      {"checkpoint", [](RunConfig& c, const std::string& v) { c.checkpoint = v; }},
  };
  return keys;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto it = config_keys().find(key);
  if (it == config_keys().end()) throw ConfigError("unknown configuration key '" + key + "'");
  try {
    it->second(cfg, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("invalid value '" + value + "' for key '" + key + "'");
  }
}

RunConfig load_run_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read config file " + file.string());
  RunConfig cfg;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(file.string() + ":" + std::to_string(line_no) + ": expected 'key = value'");
    apply_config_kv(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

std::string dump_config(const RunConfig& c) {
  std::map<std::string, std::string> kv = {
      {"model", c.model},
      {"variant", c.variant},
      {"num_classes", std::to_string(c.num_classes)},
      {"input_size", std::to_string(c.input_size)},
      {"state_size", std::to_string(c.state_size)},
      {"expansion", std::to_string(c.expansion)},
      {"scan_chunk", std::to_string(c.scan_chunk)},
      {"epochs", std::to_string(c.epochs)},
      {"warmup_epochs", std::to_string(c.warmup_epochs)},
      {"batch_size", std::to_string(c.batch_size)},
      {"lr_max", fmt_double(c.lr_max)},
      {"lr_min", fmt_double(c.lr_min)},
      {"warmup_init", fmt_double(c.warmup_init)},
      {"beta1", fmt_double(c.beta1)},
      {"beta2", fmt_double(c.beta2)},
      {"weight_decay", fmt_double(c.weight_decay)},
      {"label_smoothing", fmt_double(c.label_smoothing)},
      {"ema_decay", fmt_double(c.ema_decay)},
      {"seed", std::to_string(c.seed)},
      {"stop_train_top1", fmt_double(c.stop_train_top1)},
      {"stop_loss_ratio", fmt_double(c.stop_loss_ratio)},
      {"data_root", c.data_root},
      {"split_list", c.split_list},
      {"split_ratio", fmt_double(c.split_ratio)},
      {"split_seed", std::to_string(c.split_seed)},
      {"synth", c.synth ? "true" : "false"},
      {"synth_classes", std::to_string(c.synth_classes)},
      {"synth_per_class", std::to_string(c.synth_per_class)},
      {"synth_size", std::to_string(c.synth_size)},
      {"run_dir", c.run_dir},
      {"eval_split", c.eval_split},
      {"checkpoint", c.checkpoint},
  };
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

ModelConfig make_model_config(const RunConfig& cfg, int64_t dataset_classes) {
  int64_t classes = cfg.num_classes > 0 ? cfg.num_classes : dataset_classes;
  if (classes < 2) throw ConfigError("could not determine a class count >= 2");
  Variant v;
  if (cfg.variant == "plain")
    v = Variant::plain;
  else if (cfg.variant == "res")
    v = Variant::global_residual;
  else
    throw ConfigError("unknown variant '" + cfg.variant + "' (expected plain or res)");

  ModelConfig mc;
  if (cfg.model == "nano")
    mc = ModelConfig::nano(classes, cfg.input_size, v);
  else if (cfg.model == "nano-micro")
    mc = ModelConfig::nano_micro(classes, v);
  else if (cfg.model == "small")
    mc = ModelConfig::small_preset();
  else
    throw ConfigError("unknown model preset '" + cfg.model + "'");
  mc.num_classes = classes;
  mc.input_h = mc.input_w = cfg.input_size;
  mc.variant = v;
  if (cfg.state_size > 0) mc.state_size = cfg.state_size;
  if (cfg.expansion > 0) mc.expansion = cfg.expansion;
  mc.scan_chunk = cfg.scan_chunk;
  mc.validate();
  return mc;
}

Tensor<float> LoadedSplit::batch(const std::vector<int64_t>& indices) const {
  const int64_t stride = 3 * size * size;
  auto out = Tensor<float>::zeros({static_cast<int64_t>(indices.size()), 3, size, size});
  for (size_t i = 0; i < indices.size(); ++i)
    std::copy(pixels.begin() + indices[i] * stride, pixels.begin() + (indices[i] + 1) * stride,
              out.data().begin() + static_cast<int64_t>(i) * stride);
  return out;
}

LoadedSplit load_split(const DatasetIndex& idx, Split split, int64_t size) {
  LoadedSplit out;
  out.size = size;
  const int64_t stride = 3 * size * size;
  for (const auto& r : idx.records) {
    if (r.split != split) continue;
    ImageU8 img = decode_image(idx.root / r.rel_path);
    if (img.width != size || img.height != size)
      img = resize_bilinear(img, static_cast<int>(size), static_cast<int>(size));
    out.pixels.resize(out.pixels.size() + stride);
    float* dst = out.pixels.data() + out.n * stride;
    // HWC bytes -> normalized CHW floats
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x)
          dst[(c * size + y) * size + x] =
              static_cast<float>(img.pixels[(y * size + x) * 3 + c]) / 127.5f - 1.0f;
    out.labels.push_back(r.class_id);
    out.n++;
  }
  return out;
}

EvalMetrics evaluate_model(VMambaModel<float>& model, const LoadedSplit& data, int64_t batch_size) {
  EvalMetrics m;
  m.n = data.n;
  if (data.n == 0) return m;
  NoGradGuard ng;
  const int64_t k5 = std::min<int64_t>(5, model.cfg.num_classes);
  double ce_sum = 0, top1_hits = 0, top5_hits = 0;
  for (int64_t start = 0; start < data.n; start += batch_size) {
    const int64_t end = std::min(data.n, start + batch_size);
    std::vector<int64_t> ids(end - start);
    std::iota(ids.begin(), ids.end(), start);
    auto logits = vmamba_forward(model, data.batch(ids));
    std::vector<int64_t> labels(data.labels.begin() + start, data.labels.begin() + end);
    top1_hits += top_k_accuracy(logits, labels, 1) * static_cast<double>(end - start);
    top5_hits += top_k_accuracy(logits, labels, k5) * static_cast<double>(end - start);
    auto lsm = log_softmax(logits);
    for (int64_t i = 0; i < end - start; ++i)
      ce_sum -= lsm.data()[i * model.cfg.num_classes + labels[i]];
  }
  m.top1 = top1_hits / static_cast<double>(data.n);
  m.top5 = top5_hits / static_cast<double>(data.n);
  m.ce = ce_sum / static_cast<double>(data.n);
  return m;
}

namespace {

fs::path resolve_run_dir(const RunConfig& cfg) {
  if (!cfg.run_dir.empty()) return cfg.run_dir;
  const char* env = std::getenv("RSVM_RUN_DIR");
  fs::path base = env && *env ? fs::path(env) : fs::path("runs");
  auto stamp = std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::system_clock::now().time_since_epoch())
                   .count();
  return base / ("run_" + std::to_string(stamp) + "_seed" + std::to_string(cfg.seed));
}

json record_to_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch}, {"step", r.step},   {"lr", r.lr},
         {"loss", r.loss},   {"train_top1", r.train_top1}, {"wall_s", r.wall_s}};
  if (r.has_val) {
    j["val_top1"] = r.val_top1;
    j["val_top5"] = r.val_top5;
    j["ema_top1"] = r.ema_top1;
    j["ema_top5"] = r.ema_top5;
  }
  return j;
}

}  // namespace

TrainSummary run_training(const RunConfig& cfg) {
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");

  TrainSummary summary;
  fs::path run_dir = resolve_run_dir(cfg);
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run directory " + run_dir.string());
  summary.run_dir = run_dir;

  // dataset
  DatasetIndex idx;
  if (cfg.synth) {
    idx = synth_dataset_generate(cfg.synth_classes, cfg.synth_per_class, cfg.synth_size,
                                 cfg.seed, run_dir / "data");
    if (cfg.split_ratio > 0) stratified_split(idx, cfg.split_ratio, cfg.split_seed);
  } else {
    if (cfg.data_root.empty()) throw ConfigError("data_root is required unless synth = true");
    idx = scan_image_directory(cfg.data_root);
    if (!cfg.split_list.empty())
      apply_split_list(idx, cfg.split_list);
    else if (cfg.split_ratio > 0)
      stratified_split(idx, cfg.split_ratio, cfg.split_seed);
  }
  write_split_list(idx, run_dir / "split_list.tsv");

  LoadedSplit train = load_split(idx, Split::train, cfg.input_size);
  LoadedSplit val = load_split(idx, Split::val, cfg.input_size);
  if (train.n == 0) throw ConfigError("training split is empty");

  ModelConfig mc = make_model_config(cfg, idx.num_classes());
  auto model = VMambaModel<float>::init(mc, cfg.seed);

  // effective config (with the resolved run dir) makes the run reproducible
  {
    RunConfig echo = cfg;
    echo.run_dir = run_dir.string();
    echo.num_classes = mc.num_classes;
    std::ofstream(run_dir / "config.txt") << dump_config(echo);
  }

  auto named = model.named_params();
  std::vector<Tensor<float>*> params;
  for (auto& [name, t] : named) params.push_back(t);

  OptimConfig oc;
  oc.lr_max = cfg.lr_max;
  oc.beta1 = cfg.beta1;
  oc.beta2 = cfg.beta2;
  oc.weight_decay = cfg.weight_decay;
  AdamW<float> opt(oc, params);
  Ema<float> ema(cfg.ema_decay, params);

  Schedule sched;
  sched.warmup_epochs = cfg.warmup_epochs;
  sched.total_epochs = cfg.epochs;
  sched.steps_per_epoch = (train.n + cfg.batch_size - 1) / cfg.batch_size;
  sched.lr_max = cfg.lr_max;
  sched.lr_min = cfg.lr_min;
  sched.warmup_init = cfg.warmup_init;
  sched.validate();

  summary.initial_train_ce = evaluate_model(model, train, cfg.batch_size).ce;

  std::ofstream log(run_dir / "train_log.jsonl");
  std::ofstream csv(run_dir / "metrics.csv");
  csv << "epoch,step,lr,loss,train_top1,val_top1,val_top5,ema_top1,ema_top5\n";

  const auto t0 = std::chrono::steady_clock::now();
  int64_t global_step = 0;
  std::vector<int64_t> order(train.n);
  std::iota(order.begin(), order.end(), 0);

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 shuffle_eng(cfg.seed * 1000003ULL + static_cast<uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_eng);

    double loss_sum = 0;
    double hit_sum = 0;
    int64_t seen = 0;
    for (int64_t start = 0; start < train.n; start += cfg.batch_size) {
      const int64_t end = std::min(train.n, start + cfg.batch_size);
      std::vector<int64_t> ids(order.begin() + start, order.begin() + end);
      std::vector<int64_t> labels(ids.size());
      for (size_t i = 0; i < ids.size(); ++i) labels[i] = train.labels[ids[i]];

      for (auto* p : params) p->zero_grad();
      auto logits = vmamba_forward(model, train.batch(ids));
      auto loss = label_smoothed_ce(logits, labels, cfg.label_smoothing);
      backward(loss);
      double lr = lr_at(global_step, sched);
      opt.step(params, lr);
      ema.update(params);
      ++global_step;

      loss_sum += loss.item() * static_cast<double>(ids.size());
      hit_sum += top_k_accuracy(logits, labels, 1) * static_cast<double>(ids.size());
      seen += static_cast<int64_t>(ids.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.step = global_step;
    rec.lr = lr_at(global_step - 1, sched);
    rec.loss = loss_sum / static_cast<double>(seen);
    rec.train_top1 = hit_sum / static_cast<double>(seen);
    rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (val.n > 0) {
      rec.has_val = true;
      auto raw = evaluate_model(model, val, cfg.batch_size);
      rec.val_top1 = raw.top1;
      rec.val_top5 = raw.top5;
      ema.swap_with(params);
      auto shadow = evaluate_model(model, val, cfg.batch_size);
      ema.swap_with(params);
      rec.ema_top1 = shadow.top1;
      rec.ema_top5 = shadow.top5;
    }
    summary.epochs.push_back(rec);

    log << record_to_json(rec).dump() << "\n";
    log.flush();
    csv << rec.epoch << ',' << rec.step << ',' << rec.lr << ',' << rec.loss << ',' << rec.train_top1
        << ',' << rec.val_top1 << ',' << rec.val_top5 << ',' << rec.ema_top1 << ',' << rec.ema_top5
        << "\n";
    csv.flush();

    const double best_metric = rec.has_val ? rec.val_top1 : rec.train_top1;
    if (summary.best_epoch < 0 || best_metric > summary.best_val_top1) {
      summary.best_val_top1 = best_metric;
      summary.best_epoch = epoch;
      save_checkpoint(run_dir / "best.rsvm", model);
      ema.swap_with(params);
      save_checkpoint(run_dir / "best_ema.rsvm", model);
      ema.swap_with(params);
    }

    if (cfg.stop_train_top1 > 0 && rec.train_top1 >= cfg.stop_train_top1) {
      bool ratio_ok = true;
      if (cfg.stop_loss_ratio > 0) {
        double ce_now = evaluate_model(model, train, cfg.batch_size).ce;
        ratio_ok = ce_now > 0 && summary.initial_train_ce / ce_now >= cfg.stop_loss_ratio;
      }
      if (ratio_ok) {
        summary.stopped_early = true;
        break;
      }
    }
  }

  summary.total_steps = global_step;
  save_checkpoint(run_dir / "last.rsvm", model);
  ema.swap_with(params);
  save_checkpoint(run_dir / "last_ema.rsvm", model);
  ema.swap_with(params);

  auto train_final = evaluate_model(model, train, cfg.batch_size);
  summary.final_train_ce = train_final.ce;
  summary.final_train_top1 = train_final.top1;
  summary.final_train_top5 = train_final.top5;
  if (val.n > 0) {
    auto val_final = evaluate_model(model, val, cfg.batch_size);
    summary.final_val_top1 = val_final.top1;
    summary.final_val_top5 = val_final.top5;
    ema.swap_with(params);
    auto ema_final = evaluate_model(model, val, cfg.batch_size);
    ema.swap_with(params);
    summary.final_ema_top1 = ema_final.top1;
    summary.final_ema_top5 = ema_final.top5;
  }

  {
    json s{{"total_steps", summary.total_steps},
           {"epochs_run", summary.epochs.size()},
           {"initial_train_ce", summary.initial_train_ce},
           {"final_train_ce", summary.final_train_ce},
           {"final_train_top1", summary.final_train_top1},
           {"final_train_top5", summary.final_train_top5},
           {"final_val_top1", summary.final_val_top1},
           {"final_val_top5", summary.final_val_top5},
           {"final_ema_top1", summary.final_ema_top1},
           {"final_ema_top5", summary.final_ema_top5},
           {"best_epoch", summary.best_epoch},
           {"best_val_top1", summary.best_val_top1},
           {"stopped_early", summary.stopped_early}};
    std::ofstream(run_dir / "summary.json") << s.dump(2) << "\n";
  }

  // loss / accuracy curves: data already in metrics.csv, render an overview
  std::vector<double> losses, accs;
  for (const auto& r : summary.epochs) {
    losses.push_back(r.loss);
    accs.push_back(r.train_top1);
  }
  render_curves_png(run_dir / "curves.png", losses, accs);

  return summary;
}

}  // namespace rsvm
