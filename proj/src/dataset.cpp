#include "rsvm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "rsvm/image_io.hpp"

namespace fs = std::filesystem;

namespace rsvm {

namespace {

bool allowed_extension(const fs::path& p) {
  std::string e = p.extension().string();
  for (auto& c : e) c = static_cast<char>(std::tolower(c));
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

}  // namespace

std::optional<Split> split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  return std::nullopt;
}

std::vector<int64_t> DatasetIndex::class_counts() const {
  std::vector<int64_t> counts(class_names.size(), 0);
  for (const auto& r : records) counts[r.class_id]++;
  return counts;
}

std::vector<int64_t> DatasetIndex::class_counts(Split s) const {
  std::vector<int64_t> counts(class_names.size(), 0);
  for (const auto& r : records)
    if (r.split == s) counts[r.class_id]++;
  return counts;
}

int64_t DatasetIndex::count(Split s) const {
  int64_t n = 0;
  for (const auto& r : records) n += r.split == s ? 1 : 0;
  return n;
}

DatasetIndex scan_image_directory(const fs::path& root) {
  if (!fs::exists(root) || !fs::is_directory(root))
    throw IoError("dataset root does not exist: " + root.string());
  DatasetIndex idx;
  idx.root = root;

  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw IoError("no class directories under " + root.string());

  for (const auto& dir : class_dirs) {
    const int64_t class_id = static_cast<int64_t>(idx.class_names.size());
    idx.class_names.push_back(dir.filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && allowed_extension(entry.path())) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      std::ifstream probe(f, std::ios::binary);
      if (!probe) {
        idx.skipped_files++;
        continue;
      }
      idx.records.push_back({(dir.filename() / f.filename()).string(), class_id, Split::train});
    }
  }
  return idx;
}

int64_t stratified_split(DatasetIndex& idx, double ratio, uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw DomainError("split ratio must lie in (0,1)");
  std::mt19937_64 eng(seed);
  int64_t unsplittable = 0;
  for (int64_t c = 0; c < idx.num_classes(); ++c) {
    std::vector<size_t> members;
    for (size_t i = 0; i < idx.records.size(); ++i)
      if (idx.records[i].class_id == c && idx.records[i].split != Split::test) members.push_back(i);
    if (members.empty()) continue;
    if (members.size() < 2) {
      idx.records[members[0]].split = Split::train;
      ++unsplittable;
      continue;
    }
    std::shuffle(members.begin(), members.end(), eng);
    // round half away from zero
    auto n_train = static_cast<size_t>(std::llround(ratio * static_cast<double>(members.size())));
    n_train = std::min(n_train, members.size());
    for (size_t i = 0; i < members.size(); ++i)
      idx.records[members[i]].split = i < n_train ? Split::train : Split::val;
  }
  return unsplittable;
}

void write_split_list(const DatasetIndex& idx, const fs::path& file) {
  std::vector<const DatasetRecord*> sorted;
  sorted.reserve(idx.records.size());
  for (const auto& r : idx.records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const DatasetRecord* a, const DatasetRecord* b) { return a->rel_path < b->rel_path; });
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write split list " + file.string());
  for (const auto* r : sorted) out << r->rel_path << '\t' << split_name(r->split) << '\n';
}

void apply_split_list(DatasetIndex& idx, const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read split list " + file.string());
  std::map<std::string, Split> assignment;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw IoError("split list " + file.string() + ": missing tab at line " + std::to_string(line_no));
    auto split = split_from_name(line.substr(tab + 1));
    if (!split)
      throw IoError("split list " + file.string() + ": unknown split '" + line.substr(tab + 1) +
                    "' at line " + std::to_string(line_no));
    assignment[line.substr(0, tab)] = *split;
  }
  for (auto& r : idx.records) {
    auto it = assignment.find(r.rel_path);
    if (it != assignment.end()) r.split = it->second;
  }
}

double normalized_entropy(const std::vector<int64_t>& counts) {
  const int64_t n = static_cast<int64_t>(counts.size());
  if (n < 2) throw DomainError("normalized entropy needs at least 2 classes");
  int64_t total = 0;
  for (int64_t c : counts) {
    if (c < 1) throw DomainError("class counts must be positive");
    total += c;
  }
  bool uniform = true;
  for (int64_t c : counts) uniform = uniform && c == counts[0];
  if (uniform) return 1.0;  // exact by definition
  double h = 0.0;
  for (int64_t c : counts) {
    double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log2(p);
  }
  return std::clamp(h / std::log2(static_cast<double>(n)), 0.0, 1.0);
}

SizeStats image_size_stats(const DatasetIndex& idx) {
  SizeStats s;
  double sum_h = 0, sum_w = 0, sum_h2 = 0, sum_w2 = 0;
  for (const auto& r : idx.records) {
    int w = 0, h = 0;
    if (!read_image_dims(idx.root / r.rel_path, w, h)) {
      s.undecodable.push_back(r.rel_path);
      continue;
    }
    if (s.n_images == 0) {
      s.max_h = s.min_h = h;
      s.max_w = s.min_w = w;
    } else {
      s.max_h = std::max<int64_t>(s.max_h, h);
      s.min_h = std::min<int64_t>(s.min_h, h);
      s.max_w = std::max<int64_t>(s.max_w, w);
      s.min_w = std::min<int64_t>(s.min_w, w);
    }
    s.n_images++;
    sum_h += h;
    sum_w += w;
    sum_h2 += static_cast<double>(h) * h;
    sum_w2 += static_cast<double>(w) * w;
  }
  if (s.n_images > 0) {
    double n = static_cast<double>(s.n_images);
    s.mean_h = sum_h / n;
    s.mean_w = sum_w / n;
    s.std_h = std::sqrt(std::max(0.0, sum_h2 / n - s.mean_h * s.mean_h));
    s.std_w = std::sqrt(std::max(0.0, sum_w2 / n - s.mean_w * s.mean_w));
  }
  return s;
}

DatasetIndex synth_dataset_generate(int64_t classes, int64_t per_class, int64_t size,
                                    uint64_t seed, const fs::path& out) {
  if (classes < 2 || per_class < 1) throw DomainError("synthetic dataset needs >= 2 classes, >= 1 image each");
  if (size < 8 || size % 32 != 0) throw DomainError("synthetic image size must be a positive multiple of 32");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());

  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  char name[64];
  for (int64_t c = 0; c < classes; ++c) {
    std::snprintf(name, sizeof name, "class_%03lld", static_cast<long long>(c));
    fs::create_directories(out / name, ec);
    if (ec) throw IoError("cannot create class directory under " + out.string());
    // neighboring classes differ by a small frequency delta
    const double freq = 2.0 + 0.7 * static_cast<double>(c);
    const double theta = 0.4 + 0.15 * static_cast<double>(c);
    const double base_phase = 0.9 * static_cast<double>(c);
    const double cs = std::cos(theta), sn = std::sin(theta);
    for (int64_t i = 0; i < per_class; ++i) {
      const double phase = base_phase + (unit(eng) - 0.5) * 2.4;  // +-1.2 rad jitter
      const double f = freq * (1.0 + 0.04 * gauss(eng));
      ImageU8 img;
      img.width = img.height = static_cast<int>(size);
      img.pixels.resize(static_cast<size_t>(size) * size * 3);
      for (int64_t y = 0; y < size; ++y) {
        for (int64_t x = 0; x < size; ++x) {
          double u = static_cast<double>(x) / static_cast<double>(size);
          double v = static_cast<double>(y) / static_cast<double>(size);
          double arg = 2.0 * M_PI * f * (u * cs + v * sn) + phase;
          for (int ch = 0; ch < 3; ++ch) {
            double val = 0.5 + 0.33 * std::sin(arg + 0.6 * ch) + 0.12 * gauss(eng);
            img.pixels[(y * size + x) * 3 + ch] =
                static_cast<uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
          }
        }
      }
      std::snprintf(name, sizeof name, "class_%03lld/img_%04lld.png",
                    static_cast<long long>(c), static_cast<long long>(i));
      write_png_rgb(out / name, img);
    }
  }
  return scan_image_directory(out);
}

}  // namespace rsvm
