#include "rsvm/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace rsvm {

namespace {

constexpr char kMagic[4] = {'R', 'S', 'V', 'M'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T read_pod(std::ifstream& in, const std::filesystem::path& file) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw IoError("truncated checkpoint: " + file.string());
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& file, VMambaModel<float>& model) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + file.string());
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  const ModelConfig& c = model.cfg;
  for (int i = 0; i < 4; ++i) write_pod(out, static_cast<int32_t>(c.stage_depths[i]));
  for (int i = 0; i < 4; ++i) write_pod(out, static_cast<int32_t>(c.stage_dims[i]));
  write_pod(out, static_cast<int32_t>(c.state_size));
  write_pod(out, static_cast<int32_t>(c.expansion));
  write_pod(out, static_cast<int32_t>(c.num_classes));
  write_pod(out, static_cast<int32_t>(c.variant == Variant::global_residual ? 1 : 0));
  write_pod(out, static_cast<int32_t>(c.input_h));
  write_pod(out, static_cast<int32_t>(c.input_w));
  write_pod(out, static_cast<int32_t>(c.scan_chunk));

  auto named = model.named_params();
  write_pod(out, static_cast<uint32_t>(named.size()));
  for (auto& [name, tensor] : named) {
    write_pod(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(out, static_cast<uint32_t>(tensor->rank()));
    for (int64_t d : tensor->shape()) write_pod(out, static_cast<int64_t>(d));
    out.write(reinterpret_cast<const char*>(tensor->data().data()),
              static_cast<std::streamsize>(tensor->numel() * sizeof(float)));
  }
  if (!out) throw IoError("write failed for checkpoint " + file.string());
}

LoadedCheckpoint read_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + file.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("not a checkpoint file: " + file.string());
  auto version = read_pod<uint32_t>(in, file);
  if (version != kVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + file.string());

  LoadedCheckpoint ck;
  ModelConfig& c = ck.config;
  for (int i = 0; i < 4; ++i) c.stage_depths[i] = read_pod<int32_t>(in, file);
  for (int i = 0; i < 4; ++i) c.stage_dims[i] = read_pod<int32_t>(in, file);
  c.state_size = read_pod<int32_t>(in, file);
  c.expansion = read_pod<int32_t>(in, file);
  c.num_classes = read_pod<int32_t>(in, file);
  c.variant = read_pod<int32_t>(in, file) == 1 ? Variant::global_residual : Variant::plain;
  c.input_h = read_pod<int32_t>(in, file);
  c.input_w = read_pod<int32_t>(in, file);
  c.scan_chunk = read_pod<int32_t>(in, file);

  auto count = read_pod<uint32_t>(in, file);
  for (uint32_t t = 0; t < count; ++t) {
    auto name_len = read_pod<uint32_t>(in, file);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw IoError("truncated checkpoint: " + file.string());
    auto rank = read_pod<uint32_t>(in, file);
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) numel *= read_pod<int64_t>(in, file);
    std::vector<float> data(numel);
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(numel * sizeof(float))))
      throw IoError("truncated checkpoint: " + file.string());
    ck.by_name[name] = ck.tensors.size();
    ck.tensors.emplace_back(std::move(name), std::move(data));
  }
  return ck;
}

VMambaModel<float> load_checkpoint(const std::filesystem::path& file) {
  LoadedCheckpoint ck = read_checkpoint(file);
  auto model = VMambaModel<float>::init(ck.config, 0);
  model.visit_params([&](const std::string& name, Tensor<float>& t) {
    auto it = ck.by_name.find(name);
    if (it == ck.by_name.end())
      throw IoError("checkpoint " + file.string() + " is missing tensor '" + name + "'");
    auto& stored = ck.tensors[it->second].second;
    if (static_cast<int64_t>(stored.size()) != t.numel())
      throw IoError("checkpoint tensor '" + name + "' has " + std::to_string(stored.size()) +
                    " values, model expects " + std::to_string(t.numel()));
    t.data() = stored;
  });
  return model;
}

}  // namespace rsvm
