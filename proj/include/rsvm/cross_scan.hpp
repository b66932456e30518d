#pragma once

// Cross-scan: unfold a feature map into four directional sequences, scan each
// with its own parameters, restore spatial order and merge.
//
// Direction conventions over row-major flattening (l = i*W + j):
//   0: rows left-to-right, top-to-bottom          (identity)
//   1: columns top-to-bottom, left-to-right       (transpose order)
//   2: reverse of 0
//   3: reverse of 1

#include <array>

#include "rsvm/ssm.hpp"

namespace rsvm {

struct ScanDirections {
  int64_t height = 0, width = 0;
  // perm[d][t] = flat spatial index read at sequence position t.
  std::array<std::shared_ptr<std::vector<int64_t>>, 4> perm;
  // inv[d][p]  = sequence position that read flat spatial index p.
  std::array<std::shared_ptr<std::vector<int64_t>>, 4> inv;

  ScanDirections(int64_t h, int64_t w) : height(h), width(w) {
    if (h < 1 || w < 1) throw ShapeError("cross-scan requires H, W >= 1");
    const int64_t l = h * w;
    for (auto& p : perm) p = std::make_shared<std::vector<int64_t>>(l);
    auto& p0 = *perm[0];
    auto& p1 = *perm[1];
    auto& p2 = *perm[2];
    auto& p3 = *perm[3];
    for (int64_t t = 0; t < l; ++t) p0[t] = t;
    for (int64_t j = 0; j < w; ++j)
      for (int64_t i = 0; i < h; ++i) p1[j * h + i] = i * w + j;
    for (int64_t t = 0; t < l; ++t) p2[t] = l - 1 - t;
    for (int64_t t = 0; t < l; ++t) p3[t] = p1[l - 1 - t];
    for (int d = 0; d < 4; ++d) {
      inv[d] = std::make_shared<std::vector<int64_t>>(l);
      for (int64_t t = 0; t < l; ++t) (*inv[d])[(*perm[d])[t]] = t;
    }
  }
};

template <typename T>
struct DirectionalSequences {
  std::array<Tensor<T>, 4> seq;  // each (B, L, D)
  int64_t height = 0, width = 0;
};

// Pure reindexing into the four traversal orders.
template <typename T>
DirectionalSequences<T> cross_scan_expand(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("cross_scan_expand expects (B,D,H,W), got " + shape_str(x.shape()));
  int64_t h = x.dim(2), w = x.dim(3);
  ScanDirections dirs(h, w);
  Tensor<T> flat = to_channels_last(x);  // (B, L, D)
  DirectionalSequences<T> out;
  out.height = h;
  out.width = w;
  out.seq[0] = flat;  // identity order
  for (int d = 1; d < 4; ++d) out.seq[d] = gather_dim1(flat, dirs.perm[d]);
  return out;
}

// Inverse-reorders each direction to spatial order and sums. The sum is the
// fixed pairwise tree (0+1)+(2+3).
template <typename T>
Tensor<T> cross_merge(const std::array<Tensor<T>, 4>& y, int64_t h, int64_t w) {
  ScanDirections dirs(h, w);
  const int64_t l = h * w;
  std::array<Tensor<T>, 4> spatial;
  for (int d = 0; d < 4; ++d) {
    if (y[d].rank() != 3 || y[d].dim(1) != l)
      throw ShapeError("cross_merge: direction " + std::to_string(d) + " has L " +
                       std::to_string(y[d].rank() == 3 ? y[d].dim(1) : -1) + ", expected " + std::to_string(l));
    spatial[d] = d == 0 ? y[d] : gather_dim1(y[d], dirs.inv[d]);
  }
  Tensor<T> merged = add(add(spatial[0], spatial[1]), add(spatial[2], spatial[3]));
  return to_spatial(merged, h, w);
}

template <typename T>
struct Ss2dParams {
  std::array<SsmLearned<T>, 4> dir;

  static Ss2dParams init(int64_t dim, int64_t state, Rng& rng) {
    Ss2dParams p;
    for (int d = 0; d < 4; ++d) p.dir[d] = SsmLearned<T>::init(dim, state, rng);
    return p;
  }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    for (int d = 0; d < 4; ++d) dir[d].visit_params(prefix + ".dir" + std::to_string(d), fn);
  }
};

// expand -> per-direction selective scan (independent parameters) -> merge.
template <typename T>
Tensor<T> ss2d(const Tensor<T>& x, const Ss2dParams<T>& p, int64_t chunk = 16) {
  DirectionalSequences<T> dirs = cross_scan_expand(x);
  std::array<Tensor<T>, 4> y;
  for (int d = 0; d < 4; ++d) {
    const SsmLearned<T>& learned = p.dir[d];
    SelectiveParams<T> sel = select_params(dirs.seq[d], learned);
    DiscretizedStep<T> step = discretize(sel.delta, learned.a(), sel.b_sel, dirs.seq[d]);
    y[d] = selective_scan_fast(step, sel.c_sel, learned.d_skip, dirs.seq[d], chunk);
  }
  return cross_merge(y, dirs.height, dirs.width);
}

}  // namespace rsvm
