#pragma once

// Selective state-space kernel: input-dependent (B, C, Delta) selection,
// zeroth-order-hold discretization with the first-order approximation of
// B_bar, and the sequence scan in two interchangeable implementations.

#include "rsvm/tensor.hpp"

namespace rsvm {

// Learned per-layer state: diagonal negative A via log parameterization,
// per-channel feedthrough, and the projections that derive (dt, B, C) from
// the input sequence.
template <typename T>
struct SsmLearned {
  Tensor<T> a_log;      // (D, N); A = -exp(a_log)
  Tensor<T> d_skip;     // (D)
  Tensor<T> x_proj_w;   // (D, dt_rank + 2N), no bias
  Tensor<T> dt_proj_w;  // (dt_rank, D)
  Tensor<T> dt_proj_b;  // (D)
  int64_t dim = 0, state = 0, dt_rank = 0;

  static int64_t default_dt_rank(int64_t dim) { return std::max<int64_t>(1, dim / 16); }

  static SsmLearned init(int64_t dim, int64_t state, Rng& rng) {
    SsmLearned p;
    p.dim = dim;
    p.state = state;
    p.dt_rank = default_dt_rank(dim);
    p.a_log = Tensor<T>::zeros({dim, state});
    for (int64_t d = 0; d < dim; ++d)
      for (int64_t n = 0; n < state; ++n)
        p.a_log.data()[d * state + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
    p.d_skip = Tensor<T>::ones({dim});
    p.x_proj_w = Tensor<T>::zeros({dim, p.dt_rank + 2 * state});
    fill_trunc_normal(p.x_proj_w, rng, 0.02);
    p.dt_proj_w = Tensor<T>::zeros({p.dt_rank, dim});
    double bound = 1.0 / std::sqrt(static_cast<double>(p.dt_rank));
    fill_uniform(p.dt_proj_w, rng, -bound, bound);
    // Bias chosen so softplus(bias) lands log-uniformly in [1e-3, 1e-1].
    p.dt_proj_b = Tensor<T>::zeros({dim});
    for (auto& v : p.dt_proj_b.data()) {
      double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
      v = static_cast<T>(std::log(std::expm1(dt)));
    }
    for (Tensor<T>* t : {&p.a_log, &p.d_skip, &p.x_proj_w, &p.dt_proj_w, &p.dt_proj_b})
      t->set_requires_grad(true);
    return p;
  }

  Tensor<T> a() const { return neg(exp(a_log)); }

  template <typename Fn>
  void visit_params(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".a_log", a_log);
    fn(prefix + ".d_skip", d_skip);
    fn(prefix + ".x_proj_w", x_proj_w);
    fn(prefix + ".dt_proj_w", dt_proj_w);
    fn(prefix + ".dt_proj_b", dt_proj_b);
  }
};

template <typename T>
struct SelectiveParams {
  Tensor<T> b_sel;  // (B, L, N)
  Tensor<T> c_sel;  // (B, L, N)
  Tensor<T> delta;  // (B, L, D), positive
};

template <typename T>
struct DiscretizedStep {
  Tensor<T> a_bar;    // (B, L, D, N) = exp(delta * A), in (0,1) for A < 0
  Tensor<T> b_bar_x;  // (B, L, D, N) = delta * B_sel * x
};

// Derives the per-position parameters from the input sequence.
template <typename T>
SelectiveParams<T> select_params(const Tensor<T>& x, const SsmLearned<T>& p) {
  if (x.rank() != 3) throw ShapeError("select_params expects (B,L,D), got " + shape_str(x.shape()));
  int64_t bsz = x.dim(0), len = x.dim(1), dim = x.dim(2);
  if (dim != p.dim)
    throw ShapeError("select_params: channel extent " + std::to_string(dim) + " != learned dim " + std::to_string(p.dim));
  int64_t r = p.dt_rank, n = p.state;
  Tensor<T> flat = reshape(x, {bsz * len, dim});
  Tensor<T> projected = matmul(flat, p.x_proj_w);  // (B*L, r + 2N)
  Tensor<T> dt_raw = narrow(projected, 1, 0, r);
  SelectiveParams<T> out;
  out.b_sel = reshape(narrow(projected, 1, r, n), {bsz, len, n});
  out.c_sel = reshape(narrow(projected, 1, r + n, n), {bsz, len, n});
  out.delta = reshape(softplus(add(matmul(dt_raw, p.dt_proj_w), p.dt_proj_b)), {bsz, len, dim});
  return out;
}

// A_bar = exp(delta . A) elementwise over the broadcast (B,L,D,N) grid;
// B_bar uses the first-order form delta * B, folded with x into one product.
template <typename T>
DiscretizedStep<T> discretize(const Tensor<T>& delta, const Tensor<T>& a,
                              const Tensor<T>& b_sel, const Tensor<T>& x) {
  if (delta.rank() != 3 || x.rank() != 3 || b_sel.rank() != 3 || a.rank() != 2)
    throw ShapeError("discretize: expected delta/x (B,L,D), b_sel (B,L,N), a (D,N)");
  int64_t bsz = delta.dim(0), len = delta.dim(1), dim = delta.dim(2);
  int64_t n = a.dim(1);
  if (a.dim(0) != dim || b_sel.dim(2) != n || x.dim(2) != dim)
    throw ShapeError("discretize: inconsistent extents delta " + shape_str(delta.shape()) + ", a " +
                     shape_str(a.shape()) + ", b_sel " + shape_str(b_sel.shape()));
  DiscretizedStep<T> step;
  step.a_bar = exp(mul(reshape(delta, {bsz, len, dim, 1}), a));
  step.b_bar_x = mul(reshape(mul(delta, x), {bsz, len, dim, 1}), reshape(b_sel, {bsz, len, 1, n}));
  return step;
}

namespace detail {

// Shared backward for both scan implementations. Consumes the recorded state
// history; reverse recurrence is sequential per batch item.
template <typename T>
struct ScanSaved {
  int64_t bsz, len, dim, n;
  std::shared_ptr<std::vector<T>> abar, bx, csel, dsk, x, hist;
};

template <typename T>
void scan_backward(const ScanSaved<T>& s, const std::vector<T>& g,
                   T* ga, T* gbx, T* gc, T* gd, T* gx) {
  const int64_t B = s.bsz, L = s.len, D = s.dim, N = s.n;
  const T* abar = s.abar->data();
  const T* csel = s.csel->data();
  const T* dsk = s.dsk->data();
  const T* x = s.x->data();
  const T* hist = s.hist->data();
  std::vector<T> gd_partial(gd ? B * D : 0, T(0));
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (B > 1)
#endif
  for (int64_t b = 0; b < B; ++b) {
    std::vector<T> dh(D * N, T(0));
    for (int64_t l = L - 1; l >= 0; --l) {
      const int64_t yoff = (b * L + l) * D;
      const int64_t coff = (b * L + l) * N;
      const int64_t soff = ((b * L + l) * D) * N;
      for (int64_t d = 0; d < D; ++d) {
        T gy = g[yoff + d];
        if (gd) gd_partial[b * D + d] += gy * x[yoff + d];
        if (gx) gx[yoff + d] += gy * dsk[d];
        const int64_t hoff = soff + d * N;
        const int64_t poff = hoff - D * N;  // h_{l-1}
        for (int64_t nn = 0; nn < N; ++nn) {
          T dhv = dh[d * N + nn] + gy * csel[coff + nn];
          if (gc) gc[coff + nn] += gy * hist[hoff + nn];
          if (ga) ga[hoff + nn] += dhv * (l > 0 ? hist[poff + nn] : T(0));
          if (gbx) gbx[hoff + nn] += dhv;
          dh[d * N + nn] = dhv * abar[hoff + nn];
        }
      }
    }
  }
  if (gd) {
    for (int64_t b = 0; b < B; ++b)
      for (int64_t d = 0; d < D; ++d) gd[d] += gd_partial[b * D + d];
  }
}

template <typename T>
Tensor<T> make_scan_result(const char* name, Shape out_shape, std::vector<T> y,
                           const Tensor<T>& a_bar, const Tensor<T>& b_bar_x,
                           const Tensor<T>& c_sel, const Tensor<T>& d_skip, const Tensor<T>& x,
                           std::shared_ptr<std::vector<T>> hist) {
  ScanSaved<T> saved{a_bar.dim(0), a_bar.dim(1), a_bar.dim(2), a_bar.dim(3),
                     a_bar.impl()->data, b_bar_x.impl()->data, c_sel.impl()->data,
                     d_skip.impl()->data, x.impl()->data, std::move(hist)};
  auto ai = a_bar.impl();
  auto bxi = b_bar_x.impl();
  auto ci = c_sel.impl();
  auto di = d_skip.impl();
  auto xi = x.impl();
  return make_result<T>(std::move(out_shape), std::move(y), name, {a_bar, b_bar_x, c_sel, d_skip, x},
                        [=](const std::vector<T>& g) {
                          if (!saved.hist)
                            throw AutogradError("scan backward without recorded state history");
                          T* ga = wants_grad(ai) ? ensure_grad(*ai).data() : nullptr;
                          T* gbx = wants_grad(bxi) ? ensure_grad(*bxi).data() : nullptr;
                          T* gc = wants_grad(ci) ? ensure_grad(*ci).data() : nullptr;
                          T* gd = wants_grad(di) ? ensure_grad(*di).data() : nullptr;
                          T* gx = wants_grad(xi) ? ensure_grad(*xi).data() : nullptr;
                          scan_backward(saved, g, ga, gbx, gc, gd, gx);
                        });
}

template <typename T>
void check_scan_shapes(const DiscretizedStep<T>& step, const Tensor<T>& c_sel,
                       const Tensor<T>& d_skip, const Tensor<T>& x) {
  const auto& a = step.a_bar;
  if (a.rank() != 4) throw ShapeError("scan: a_bar must be (B,L,D,N), got " + shape_str(a.shape()));
  if (a.shape() != step.b_bar_x.shape())
    throw ShapeError("scan: a_bar " + shape_str(a.shape()) + " vs b_bar_x " + shape_str(step.b_bar_x.shape()));
  int64_t bsz = a.dim(0), len = a.dim(1), dim = a.dim(2), n = a.dim(3);
  if (c_sel.rank() != 3 || c_sel.dim(0) != bsz || c_sel.dim(1) != len || c_sel.dim(2) != n)
    throw ShapeError("scan: c_sel " + shape_str(c_sel.shape()) + " inconsistent with state " + shape_str(a.shape()));
  if (d_skip.numel() != dim) throw ShapeError("scan: d_skip extent != D");
  if (x.rank() != 3 || x.dim(0) != bsz || x.dim(1) != len || x.dim(2) != dim)
    throw ShapeError("scan: x " + shape_str(x.shape()) + " inconsistent with state " + shape_str(a.shape()));
}

}  // namespace detail

// Strict sequential recurrence h_l = a_l h_{l-1} + v_l with h_0 = 0 and
// y_l = sum_n c_l h_l + d x_l. The correctness reference for the fast path.
template <typename T>
Tensor<T> selective_scan_ref(const DiscretizedStep<T>& step, const Tensor<T>& c_sel,
                             const Tensor<T>& d_skip, const Tensor<T>& x) {
  detail::check_scan_shapes(step, c_sel, d_skip, x);
  const int64_t B = step.a_bar.dim(0), L = step.a_bar.dim(1), D = step.a_bar.dim(2), N = step.a_bar.dim(3);
  const T* abar = step.a_bar.data().data();
  const T* bx = step.b_bar_x.data().data();
  const T* cs = c_sel.data().data();
  const T* dsk = d_skip.data().data();
  const T* px = x.data().data();

  bool track = GradMode::enabled();
  std::vector<T> y(B * L * D);
  auto hist = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * L * D * N);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (B > 1)
#endif
  for (int64_t b = 0; b < B; ++b) {
    std::vector<T> h(D * N, T(0));
    for (int64_t l = 0; l < L; ++l) {
      const int64_t yoff = (b * L + l) * D;
      const int64_t coff = (b * L + l) * N;
      const int64_t soff = yoff * N;
      for (int64_t d = 0; d < D; ++d) {
        T acc = 0;
        const int64_t hoff = soff + d * N;
        for (int64_t nn = 0; nn < N; ++nn) {
          T hv = abar[hoff + nn] * h[d * N + nn] + bx[hoff + nn];
          h[d * N + nn] = hv;
          acc += cs[coff + nn] * hv;
        }
        y[yoff + d] = acc + dsk[d] * px[yoff + d];
      }
      std::copy(h.begin(), h.end(), hist->begin() + soff);
    }
  }
  if (!track) hist.reset();
  return detail::make_scan_result("selective_scan_ref", {B, L, D}, std::move(y),
                                  step.a_bar, step.b_bar_x, c_sel, d_skip, x, hist);
}

// Chunked scan. Each chunk is summarized by the composed affine map
// (A_c, V_c) of its steps under (a1,b1)o(a2,b2) = (a1*a2, a2*b1 + b2); a
// sequential combine over the per-chunk summaries yields each chunk's
// incoming state, after which chunks expand independently. Both passes are
// parallel across (batch, chunk).
template <typename T>
Tensor<T> selective_scan_fast(const DiscretizedStep<T>& step, const Tensor<T>& c_sel,
                              const Tensor<T>& d_skip, const Tensor<T>& x, int64_t chunk = 16) {
  detail::check_scan_shapes(step, c_sel, d_skip, x);
  if (chunk <= 0) throw ShapeError("scan chunk must be positive");
  const int64_t B = step.a_bar.dim(0), L = step.a_bar.dim(1), D = step.a_bar.dim(2), N = step.a_bar.dim(3);
  const int64_t n_chunks = (L + chunk - 1) / chunk;
  const int64_t lane = D * N;
  const T* abar = step.a_bar.data().data();
  const T* bx = step.b_bar_x.data().data();
  const T* cs = c_sel.data().data();
  const T* dsk = d_skip.data().data();
  const T* px = x.data().data();

  bool track = GradMode::enabled();
  std::vector<T> y(B * L * D);
  auto hist = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * L * D * N);

  // Pass 1: per-chunk composed coefficients.
  std::vector<T> comp_a(B * n_chunks * lane), comp_v(B * n_chunks * lane);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2) if (B * n_chunks > 1)
#endif
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < n_chunks; ++c) {
      const int64_t l0 = c * chunk, l1 = std::min(L, l0 + chunk);
      T* ca = comp_a.data() + (b * n_chunks + c) * lane;
      T* cv = comp_v.data() + (b * n_chunks + c) * lane;
      std::fill(ca, ca + lane, T(1));
      std::fill(cv, cv + lane, T(0));
      for (int64_t l = l0; l < l1; ++l) {
        const int64_t soff = ((b * L + l) * D) * N;
        for (int64_t i = 0; i < lane; ++i) {
          cv[i] = abar[soff + i] * cv[i] + bx[soff + i];
          ca[i] *= abar[soff + i];
        }
      }
    }
  }

  // Combine: carry entering each chunk.
  std::vector<T> carry(B * n_chunks * lane, T(0));
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (B > 1)
#endif
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 1; c < n_chunks; ++c) {
      const T* prev = carry.data() + (b * n_chunks + c - 1) * lane;
      const T* ca = comp_a.data() + (b * n_chunks + c - 1) * lane;
      const T* cv = comp_v.data() + (b * n_chunks + c - 1) * lane;
      T* cur = carry.data() + (b * n_chunks + c) * lane;
      for (int64_t i = 0; i < lane; ++i) cur[i] = ca[i] * prev[i] + cv[i];
    }
  }

  // Pass 2: expand each chunk from its carry.
#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2) if (B * n_chunks > 1)
#endif
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t c = 0; c < n_chunks; ++c) {
      const int64_t l0 = c * chunk, l1 = std::min(L, l0 + chunk);
      std::vector<T> h(carry.begin() + (b * n_chunks + c) * lane,
                       carry.begin() + (b * n_chunks + c + 1) * lane);
      for (int64_t l = l0; l < l1; ++l) {
        const int64_t yoff = (b * L + l) * D;
        const int64_t coff = (b * L + l) * N;
        const int64_t soff = yoff * N;
        for (int64_t d = 0; d < D; ++d) {
          T acc = 0;
          const int64_t hoff = soff + d * N;
          for (int64_t nn = 0; nn < N; ++nn) {
            T hv = abar[hoff + nn] * h[d * N + nn] + bx[hoff + nn];
            h[d * N + nn] = hv;
            acc += cs[coff + nn] * hv;
          }
          y[yoff + d] = acc + dsk[d] * px[yoff + d];
        }
        std::copy(h.begin(), h.end(), hist->begin() + soff);
      }
    }
  }
  if (!track) hist.reset();
  return detail::make_scan_result("selective_scan_fast", {B, L, D}, std::move(y),
                                  step.a_bar, step.b_bar_x, c_sel, d_skip, x, hist);
}

}  // namespace rsvm
