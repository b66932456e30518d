#pragma once

// Hierarchical four-stage backbone over VSS blocks, with an optional
// global-residual path that injects stem-level features into the final
// stage before the classifier head.

#include <functional>

#include "rsvm/vss_block.hpp"

namespace rsvm {

enum class Variant { plain, global_residual };

inline const char* variant_name(Variant v) {
  return v == Variant::plain ? "plain" : "res";
}

struct ModelConfig {
  std::array<int64_t, 4> stage_depths{2, 2, 27, 2};
  std::array<int64_t, 4> stage_dims{96, 192, 384, 768};
  int64_t state_size = 16;
  int64_t expansion = 2;
  int64_t num_classes = 1000;
  int64_t input_h = 224, input_w = 224;
  Variant variant = Variant::plain;
  int64_t scan_chunk = 16;

  static ModelConfig small_preset() { return ModelConfig{}; }

  // Desk-scale preset used throughout the tests.
  static ModelConfig nano(int64_t classes, int64_t input = 32, Variant v = Variant::plain) {
    ModelConfig c;
    c.stage_depths = {1, 1, 2, 1};
    c.stage_dims = {16, 32, 64, 128};
    c.state_size = 16;
    c.num_classes = classes;
    c.input_h = c.input_w = input;
    c.variant = v;
    return c;
  }

  // Smallest configuration that still exercises every stage; used for
  // finite-difference checks of the whole model.
  static ModelConfig nano_micro(int64_t classes, Variant v = Variant::plain) {
    ModelConfig c;
    c.stage_depths = {1, 1, 1, 1};
    c.stage_dims = {4, 8, 16, 32};
    c.state_size = 2;
    c.num_classes = classes;
    c.input_h = c.input_w = 32;
    c.variant = v;
    return c;
  }

  void validate() const {
    if (input_h % 32 != 0 || input_w % 32 != 0)
      throw ShapeError("input extents must be divisible by 32, got " + std::to_string(input_h) + "x" + std::to_string(input_w));
    for (int64_t d : stage_depths)
      if (d < 1) throw ConfigError("stage depths must be >= 1");
    for (int64_t d : stage_dims)
      if (d < 1) throw ConfigError("stage dims must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (state_size < 1 || expansion < 1) throw ConfigError("state_size and expansion must be >= 1");
  }
};

template <typename T>
struct PatchMergeParams {
  Tensor<T> norm_g, norm_b;  // (4C)
  Tensor<T> reduce_w;        // (4C, 2C), no bias

  static PatchMergeParams init(int64_t c, Rng& rng) {
    PatchMergeParams p;
    p.norm_g = Tensor<T>::ones({4 * c});
    p.norm_b = Tensor<T>::zeros({4 * c});
    p.reduce_w = Tensor<T>::zeros({4 * c, 2 * c});
    fill_trunc_normal(p.reduce_w, rng, 0.02);
    for (Tensor<T>* t : {&p.norm_g, &p.norm_b, &p.reduce_w}) t->set_requires_grad(true);
    return p;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".norm_g", norm_g);
    fn(prefix + ".norm_b", norm_b);
    fn(prefix + ".reduce_w", reduce_w);
  }
};

template <typename T>
struct VMambaModel {
  ModelConfig cfg;
  Tensor<T> stem_w, stem_b;            // (48, C1), (C1)
  Tensor<T> stem_norm_g, stem_norm_b;  // (C1)
  std::array<std::vector<VssBlockParams<T>>, 4> stages;
  std::array<PatchMergeParams<T>, 3> merges;
  Tensor<T> head_norm_g, head_norm_b;  // (C4)
  Tensor<T> head_w, head_b;            // (C4, classes), (classes)
  // Global-residual path (variant == global_residual). Zero-initialized so
  // the variant starts exactly equivalent to the plain model.
  Tensor<T> res_w, res_b;  // (C1, C4), (C4)

  static VMambaModel init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    VMambaModel m;
    m.cfg = cfg;
    const int64_t c1 = cfg.stage_dims[0], c4 = cfg.stage_dims[3];
    m.stem_w = Tensor<T>::zeros({3 * 4 * 4, c1});
    fill_trunc_normal(m.stem_w, rng, 0.02);
    m.stem_b = Tensor<T>::zeros({c1});
    m.stem_norm_g = Tensor<T>::ones({c1});
    m.stem_norm_b = Tensor<T>::zeros({c1});
    for (int s = 0; s < 4; ++s) {
      for (int64_t i = 0; i < cfg.stage_depths[s]; ++i)
        m.stages[s].push_back(VssBlockParams<T>::init(cfg.stage_dims[s], cfg.expansion, cfg.state_size, rng));
      if (s < 3) m.merges[s] = PatchMergeParams<T>::init(cfg.stage_dims[s], rng);
    }
    m.head_norm_g = Tensor<T>::ones({c4});
    m.head_norm_b = Tensor<T>::zeros({c4});
    m.head_w = Tensor<T>::zeros({c4, cfg.num_classes});
    fill_trunc_normal(m.head_w, rng, 0.02);
    m.head_b = Tensor<T>::zeros({cfg.num_classes});
    if (cfg.variant == Variant::global_residual) {
      m.res_w = Tensor<T>::zeros({c1, c4});
      m.res_b = Tensor<T>::zeros({c4});
    }
    m.visit_params([](const std::string&, Tensor<T>& t) { t.set_requires_grad(true); });
    return m;
  }

  template <typename Fn>
  void visit_params(Fn&& fn) {
    fn("stem.w", stem_w);
    fn("stem.b", stem_b);
    fn("stem.norm_g", stem_norm_g);
    fn("stem.norm_b", stem_norm_b);
    for (int s = 0; s < 4; ++s) {
      for (size_t i = 0; i < stages[s].size(); ++i)
        stages[s][i].visit_params("stage" + std::to_string(s) + ".block" + std::to_string(i), fn);
      if (s < 3) merges[s].visit_params("merge" + std::to_string(s), fn);
    }
    fn("head.norm_g", head_norm_g);
    fn("head.norm_b", head_norm_b);
    fn("head.w", head_w);
    fn("head.b", head_b);
    if (cfg.variant == Variant::global_residual) {
      fn("res.w", res_w);
      fn("res.b", res_b);
    }
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    visit_params([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
    return out;
  }

  int64_t param_count() {
    int64_t n = 0;
    visit_params([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }
};

// 4x4 non-overlapping patch embedding followed by channel layer norm:
// (B,3,H,W) -> (B,C1,H/4,W/4).
template <typename T>
Tensor<T> stem_embed(const Tensor<T>& img, const VMambaModel<T>& m) {
  if (img.rank() != 4 || img.dim(1) != 3)
    throw ShapeError("stem expects (B,3,H,W), got " + shape_str(img.shape()));
  if (img.dim(2) % 4 != 0 || img.dim(3) % 4 != 0)
    throw ShapeError("stem: spatial extents must be divisible by 4");
  int64_t bsz = img.dim(0), oh = img.dim(2) / 4, ow = img.dim(3) / 4;
  Tensor<T> patches = to_channels_last(space_to_depth(img, 4));  // (B, L, 48)
  Tensor<T> embedded = add(matmul(reshape(patches, {bsz * oh * ow, 48}), m.stem_w), m.stem_b);
  Tensor<T> normed = layer_norm(reshape(embedded, {bsz, oh * ow, m.cfg.stage_dims[0]}), m.stem_norm_g, m.stem_norm_b);
  return to_spatial(normed, oh, ow);
}

// 2x2 neighborhood gather -> layer norm -> linear 4C -> 2C:
// (B,C,H,W) -> (B,2C,H/2,W/2).
template <typename T>
Tensor<T> patch_merging(const Tensor<T>& x, const PatchMergeParams<T>& p) {
  if (x.rank() != 4) throw ShapeError("patch_merging expects (B,C,H,W), got " + shape_str(x.shape()));
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
    throw ShapeError("patch_merging: odd spatial extents " + shape_str(x.shape()));
  int64_t bsz = x.dim(0), c = x.dim(1), oh = x.dim(2) / 2, ow = x.dim(3) / 2;
  Tensor<T> gathered = to_channels_last(space_to_depth(x, 2));  // (B, L, 4C)
  Tensor<T> normed = layer_norm(gathered, p.norm_g, p.norm_b);
  Tensor<T> reduced = matmul(reshape(normed, {bsz * oh * ow, 4 * c}), p.reduce_w);
  return to_spatial(reshape(reduced, {bsz, oh * ow, 2 * c}), oh, ow);
}

namespace detail {

inline void expect_resolution(const Shape& s, int64_t h, int64_t w, int stage) {
  if (s[2] != h || s[3] != w)
    throw ShapeError("stage " + std::to_string(stage) + " resolution " + shape_str(s) + " != expected " +
                     std::to_string(h) + "x" + std::to_string(w));
}

}  // namespace detail

// Full backbone: stem -> stage1 .. stage4 with patch merging between stages,
// then norm -> global average pool -> linear head. The global-residual
// variant adds a pooled, linearly projected copy of the stem output to the
// final stage before the head.
template <typename T>
Tensor<T> vmamba_forward(const VMambaModel<T>& m, const Tensor<T>& img) {
  const ModelConfig& cfg = m.cfg;
  if (img.rank() != 4 || img.dim(1) != 3)
    throw ShapeError("model input must be (B,3,H,W), got " + shape_str(img.shape()));
  if (img.dim(2) % 32 != 0 || img.dim(3) % 32 != 0)
    throw ShapeError("model input extents must be divisible by 32, got " + shape_str(img.shape()));
  const int64_t bsz = img.dim(0), h = img.dim(2), w = img.dim(3);

  Tensor<T> stem_out = stem_embed(img, m);
  detail::expect_resolution(stem_out.shape(), h / 4, w / 4, 0);
  Tensor<T> f = stem_out;
  for (int s = 0; s < 4; ++s) {
    if (s > 0) f = patch_merging(f, m.merges[s - 1]);
    detail::expect_resolution(f.shape(), h / (4LL << s), w / (4LL << s), s);
    for (const auto& block : m.stages[s]) f = vss_block_forward(f, block, cfg.scan_chunk);
  }

  if (cfg.variant == Variant::global_residual) {
    Tensor<T> pooled = avg_pool2d(stem_out, 8);  // (B, C1, H/32, W/32)
    int64_t rh = pooled.dim(2), rw = pooled.dim(3);
    Tensor<T> proj = add(matmul(reshape(to_channels_last(pooled), {bsz * rh * rw, cfg.stage_dims[0]}), m.res_w), m.res_b);
    f = add(f, to_spatial(reshape(proj, {bsz, rh * rw, cfg.stage_dims[3]}), rh, rw));
  }

  Tensor<T> normed = layer_norm(to_channels_last(f), m.head_norm_g, m.head_norm_b);
  const int64_t l_final = f.dim(2) * f.dim(3);
  Tensor<T> pool_row = Tensor<T>::filled({1, l_final}, T(1) / static_cast<T>(l_final));
  Tensor<T> pooled = matmul(pool_row, normed);  // (B, 1, C4) global mean over positions
  Tensor<T> logits = add(matmul(reshape(pooled, {bsz, cfg.stage_dims[3]}), m.head_w), m.head_b);
  return logits;
}

template <typename T>
Tensor<T> res_vmamba_forward(const VMambaModel<T>& m, const Tensor<T>& img) {
  if (m.cfg.variant != Variant::global_residual)
    throw ConfigError("res_vmamba_forward requires the global_residual variant");
  return vmamba_forward(m, img);
}

}  // namespace rsvm
