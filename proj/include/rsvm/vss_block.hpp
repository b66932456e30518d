#pragma once

// VSS block: pre-norm, gated two-branch body around SS2D, local residual.
//
//   u    = layer_norm(x)
//   main = silu(depthwise_conv3x3(linear(u)))      width E*D
//   gate = silu(linear(u))                         width E*D
//   y    = linear(layer_norm(ss2d(main)) * gate)   back to width D
//   out  = x + y

#include "rsvm/cross_scan.hpp"

namespace rsvm {

template <typename T>
struct VssBlockParams {
  Tensor<T> norm1_g, norm1_b;      // (D)
  Tensor<T> in_proj_w;             // (D, 2*E*D): [main | gate]
  Tensor<T> conv_w;                // (E*D, 1, 3, 3)
  Tensor<T> conv_b;                // (E*D)
  Ss2dParams<T> ssm;               // scan width E*D
  Tensor<T> out_norm_g, out_norm_b;  // (E*D)
  Tensor<T> out_proj_w;            // (E*D, D)
  int64_t dim = 0, inner = 0, state = 0;

  static VssBlockParams init(int64_t dim, int64_t expansion, int64_t state, Rng& rng) {
    VssBlockParams p;
    p.dim = dim;
    p.inner = dim * expansion;
    p.state = state;
    p.norm1_g = Tensor<T>::ones({dim});
    p.norm1_b = Tensor<T>::zeros({dim});
    p.in_proj_w = Tensor<T>::zeros({dim, 2 * p.inner});
    fill_trunc_normal(p.in_proj_w, rng, 0.02);
    p.conv_w = Tensor<T>::zeros({p.inner, 1, 3, 3});
    fill_trunc_normal(p.conv_w, rng, 0.02);
    p.conv_b = Tensor<T>::zeros({p.inner});
    p.ssm = Ss2dParams<T>::init(p.inner, state, rng);
    p.out_norm_g = Tensor<T>::ones({p.inner});
    p.out_norm_b = Tensor<T>::zeros({p.inner});
    p.out_proj_w = Tensor<T>::zeros({p.inner, dim});
    fill_trunc_normal(p.out_proj_w, rng, 0.02);
    for (Tensor<T>* t : {&p.norm1_g, &p.norm1_b, &p.in_proj_w, &p.conv_w, &p.conv_b,
                         &p.out_norm_g, &p.out_norm_b, &p.out_proj_w})
      t->set_requires_grad(true);
    return p;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".norm1_g", norm1_g);
    fn(prefix + ".norm1_b", norm1_b);
    fn(prefix + ".in_proj_w", in_proj_w);
    fn(prefix + ".conv_w", conv_w);
    fn(prefix + ".conv_b", conv_b);
    ssm.visit_params(prefix + ".ssm", fn);
    fn(prefix + ".out_norm_g", out_norm_g);
    fn(prefix + ".out_norm_b", out_norm_b);
    fn(prefix + ".out_proj_w", out_proj_w);
  }
};

template <typename T>
Tensor<T> vss_block_forward(const Tensor<T>& x, const VssBlockParams<T>& p, int64_t chunk = 16) {
  if (x.rank() != 4) throw ShapeError("vss_block expects (B,D,H,W), got " + shape_str(x.shape()));
  int64_t bsz = x.dim(0), dim = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (dim != p.dim)
    throw ShapeError("vss_block: channel extent " + std::to_string(dim) + " != block dim " + std::to_string(p.dim));

  Tensor<T> u = layer_norm(to_channels_last(x), p.norm1_g, p.norm1_b);  // (B,L,D)
  Tensor<T> both = matmul(reshape(u, {bsz * h * w, dim}), p.in_proj_w);  // (B*L, 2*inner)
  Tensor<T> main_in = reshape(narrow(both, 1, 0, p.inner), {bsz, h * w, p.inner});
  Tensor<T> gate_in = reshape(narrow(both, 1, p.inner, p.inner), {bsz, h * w, p.inner});

  Tensor<T> conv = depthwise_conv2d(to_spatial(main_in, h, w), p.conv_w, 1);
  conv = add(conv, reshape(p.conv_b, {p.inner, 1, 1}));
  Tensor<T> main_act = silu(conv);  // (B,inner,H,W)

  Tensor<T> scanned = ss2d(main_act, p.ssm, chunk);                          // (B,inner,H,W)
  Tensor<T> normed = layer_norm(to_channels_last(scanned), p.out_norm_g, p.out_norm_b);
  Tensor<T> gated = mul(normed, silu(gate_in));                              // (B,L,inner)
  Tensor<T> y = matmul(reshape(gated, {bsz * h * w, p.inner}), p.out_proj_w);
  return add(x, to_spatial(reshape(y, {bsz, h * w, dim}), h, w));
}

}  // namespace rsvm
