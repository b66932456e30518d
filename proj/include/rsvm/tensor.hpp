#pragma once

// Dense row-major tensor with reverse-mode autodiff on a per-forward tape.
// Scalar type is a template parameter: float for training, double for
// finite-difference gradient verification.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>

#include "rsvm/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rsvm {

template <typename T>
struct TapeNode;

template <typename T>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  bool requires_grad = false;   // set on leaves the caller wants gradients for
  bool backward_done = false;   // guards against re-running a consumed tape
  std::shared_ptr<std::vector<T>> grad;  // lazily allocated, same extent as data
  std::shared_ptr<TapeNode<T>> node;     // producing op; null for leaves
  uint64_t id = next_id();

  static uint64_t next_id() {
    static std::atomic<uint64_t> counter{0};
    return ++counter;
  }
};

// One tape entry. `inputs` keeps saved forward values alive; `backward`
// consumes the output gradient and accumulates into the inputs' grads.
template <typename T>
struct TapeNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(const std::vector<T>&)> backward;
};

namespace detail {

template <typename T>
bool wants_grad(const std::shared_ptr<TensorImpl<T>>& t) {
  return t && (t->requires_grad || t->node != nullptr);
}

template <typename T>
std::vector<T>& ensure_grad(TensorImpl<T>& t) {
  if (!t.grad) t.grad = std::make_shared<std::vector<T>>(numel_of(t.shape), T(0));
  return *t.grad;
}

inline int64_t check_axis(int64_t axis, size_t rank) {
  int64_t r = static_cast<int64_t>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  return axis;
}

}  // namespace detail

template <typename T>
class Tensor {
 public:
  Tensor() : impl_(nullptr) {}

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return filled(std::move(shape), T(1)); }
  static Tensor filled(Shape shape, T value) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    int64_t n = numel_of(shape);
    if (n < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::make_shared<std::vector<T>>(n, value);
    return t;
  }
  static Tensor from(Shape shape, std::vector<T> values) {
    if (numel_of(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<T>>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::make_shared<std::vector<T>>(std::move(values));
    return t;
  }
  static Tensor scalar(T value) { return from({1}, {value}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  size_t rank() const { return impl_->shape.size(); }
  int64_t dim(int64_t i) const {
    if (i < 0) i += static_cast<int64_t>(rank());
    return impl_->shape[i];
  }
  int64_t numel() const { return numel_of(impl_->shape); }

  std::vector<T>& data() { return *impl_->data; }
  const std::vector<T>& data() const { return *impl_->data; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
    return (*impl_->data)[0];
  }

  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }
  bool requires_grad() const { return impl_->requires_grad; }
  bool has_grad() const { return impl_->grad != nullptr; }
  std::vector<T>& grad_data() {
    if (!impl_->grad) throw AutogradError("gradient not populated");
    return *impl_->grad;
  }
  const std::vector<T>& grad_data() const {
    if (!impl_->grad) throw AutogradError("gradient not populated");
    return *impl_->grad;
  }
  Tensor grad() const { return Tensor::from(shape(), grad_data()); }
  void zero_grad() { impl_->grad.reset(); }

  // Detached deep copy (leaf, no tape).
  Tensor clone_detached() const { return Tensor::from(shape(), data()); }

  std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!FiniteCheck::enabled()) return;
  const auto& d = t.data();
  for (size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i]))
      throw DomainError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
  }
}

// Builds an op result and attaches a tape node when tracking applies.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(const std::vector<T>&)> backward) {
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(values));
  check_finite(out, op);
  bool track = GradMode::enabled();
  if (track) {
    bool any = false;
    for (const auto& in : inputs) any = any || wants_grad(in.impl());
    track = any;
  }
  if (track) {
    auto node = std::make_shared<TapeNode<T>>();
    node->op = op;
    for (auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    out.impl()->node = std::move(node);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward: reverse traversal of the tape in creation order
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  auto root = loss.impl();
  if (!root) throw AutogradError("backward on undefined tensor");
  if (loss.numel() != 1)
    throw AutogradError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  if (!root->node && !root->requires_grad)
    throw AutogradError("backward on untracked tensor (no tape attached)");
  if (root->backward_done)
    throw AutogradError("repeated backward on a consumed tape; rebuild the forward pass first");

  // Collect reachable tape nodes; creation ids give a valid topological order.
  std::vector<std::shared_ptr<TensorImpl<T>>> order;
  std::unordered_set<TensorImpl<T>*> seen;
  std::vector<std::shared_ptr<TensorImpl<T>>> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto cur = stack.back();
    stack.pop_back();
    order.push_back(cur);
    if (cur->node) {
      for (auto& in : cur->node->inputs) {
        if (in && seen.insert(in.get()).second) stack.push_back(in);
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->id > b->id; });

  detail::ensure_grad(*root).assign(1, T(1));
  for (auto& impl : order) {
    if (impl->node) {
      if (impl->grad) impl->node->backward(*impl->grad);
      impl->node.reset();  // frees the tape as we go
      impl->backward_done = true;
    }
  }
  root->backward_done = true;
}

// ---------------------------------------------------------------------------
// broadcasting helpers (numpy trailing-dimension alignment, size-1 stretches)
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("incompatible shapes for broadcast: " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int64_t i = static_cast<int64_t>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// Strides of `in` viewed through the broadcast output shape (0 where stretched).
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<int64_t> st(out.size(), 0);
  auto in_st = contiguous_strides(in);
  size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i)
    st[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : in_st[i];
  return st;
}

// Walks the output index space. f(out_flat, a_off, b_off). Sequential.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, F&& f) {
  int64_t n = numel_of(out);
  size_t r = out.size();
  if (r == 0) {
    if (n == 1) f(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t ao = 0, bo = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, ao, bo);
    for (int64_t d = static_cast<int64_t>(r) - 1; d >= 0; --d) {
      idx[d]++;
      ao += sa[d];
      bo += sb[d];
      if (idx[d] < out[d]) break;
      ao -= sa[d] * out[d];
      bo -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}


}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { add, sub, mul };

// Offsets of one row (all dims but the last) under broadcast strides.
inline void row_offsets(int64_t row, const Shape& out, const std::vector<int64_t>& sa,
                        const std::vector<int64_t>& sb, int64_t& ao, int64_t& bo) {
  ao = 0;
  bo = 0;
  int64_t rem = row;
  for (int64_t d = static_cast<int64_t>(out.size()) - 2; d >= 0; --d) {
    int64_t idx = rem % out[d];
    rem /= out[d];
    ao += idx * sa[d];
    bo += idx * sb[d];
  }
}

// True when the broadcast strides enumerate distinct input elements per
// output row, i.e. no stretching happens over the row dims.
inline bool rows_distinct(const std::vector<int64_t>& s, const Shape& out) {
  for (size_t d = 0; d + 1 < out.size(); ++d)
    if (s[d] == 0 && out[d] > 1) return false;
  return true;
}

// Chain-rule accumulation for one input of a broadcast product:
//   gin[map_in(i)] += g[i] * other[map_other(i)]
// Parallel when each output row touches a distinct slice of gin.
template <typename T>
void mul_accumulate_into(const Shape& out_shape, std::vector<T>& gin, const std::vector<T>& g,
                         const T* other, const std::vector<int64_t>& s_in,
                         const std::vector<int64_t>& s_other) {
  const size_t r = out_shape.size();
  if (r == 0) {
    gin[0] += g[0] * other[0];
    return;
  }
  const int64_t last = out_shape[r - 1];
  const int64_t rows = numel_of(out_shape) / last;
  const int64_t sil = s_in[r - 1], sol = s_other[r - 1];
  const bool parallel_ok = rows_distinct(s_in, out_shape);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel_ok && rows * last > 16384)
#endif
  for (int64_t row = 0; row < rows; ++row) {
    int64_t io, oo;
    row_offsets(row, out_shape, s_in, s_other, io, oo);
    const T* grow = g.data() + row * last;
    if (sil == 1) {
      T* dst = gin.data() + io;
      const T* src = other + oo;
      if (sol == 1)
        for (int64_t j = 0; j < last; ++j) dst[j] += grow[j] * src[j];
      else
        for (int64_t j = 0; j < last; ++j) dst[j] += grow[j] * src[0];
    } else {
      T acc = 0;
      const T* src = other + oo;
      if (sol == 1)
        for (int64_t j = 0; j < last; ++j) acc += grow[j] * src[j];
      else
        for (int64_t j = 0; j < last; ++j) acc += grow[j] * src[0];
      gin[io] += acc;
    }
  }
  (void)parallel_ok;
}

// Pass-through/negated accumulation for add/sub gradients.
template <typename T>
void sum_accumulate_into(const Shape& out_shape, std::vector<T>& gin, const std::vector<T>& g,
                         const std::vector<int64_t>& s_in, T sign) {
  const size_t r = out_shape.size();
  if (r == 0) {
    gin[0] += sign * g[0];
    return;
  }
  const int64_t last = out_shape[r - 1];
  const int64_t rows = numel_of(out_shape) / last;
  const int64_t sil = s_in[r - 1];
  const bool parallel_ok = rows_distinct(s_in, out_shape);
  std::vector<int64_t> zero(r, 0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel_ok && rows * last > 16384)
#endif
  for (int64_t row = 0; row < rows; ++row) {
    int64_t io, unused;
    row_offsets(row, out_shape, s_in, zero, io, unused);
    const T* grow = g.data() + row * last;
    if (sil == 1) {
      T* dst = gin.data() + io;
      for (int64_t j = 0; j < last; ++j) dst[j] += sign * grow[j];
    } else {
      T acc = 0;
      for (int64_t j = 0; j < last; ++j) acc += grow[j];
      gin[io] += sign * acc;
    }
  }
  (void)parallel_ok;
}

template <typename T>
Tensor<T> ew_binary(BinKind kind, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  int64_t n = numel_of(out_shape);
  std::vector<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();

  if (a.shape() == out_shape && b.shape() == out_shape) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 16384)
#endif
    for (int64_t i = 0; i < n; ++i) {
      switch (kind) {
        case BinKind::add: out[i] = pa[i] + pb[i]; break;
        case BinKind::sub: out[i] = pa[i] - pb[i]; break;
        case BinKind::mul: out[i] = pa[i] * pb[i]; break;
      }
    }
  } else if (!out_shape.empty()) {
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    const size_t r = out_shape.size();
    const int64_t last = out_shape[r - 1];
    const int64_t rows = n / last;
    const int64_t sal = sa[r - 1], sbl = sb[r - 1];
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 16384)
#endif
    for (int64_t row = 0; row < rows; ++row) {
      int64_t ao, bo;
      row_offsets(row, out_shape, sa, sb, ao, bo);
      T* orow = out.data() + row * last;
      const T* arow = pa + ao;
      const T* brow = pb + bo;
      for (int64_t j = 0; j < last; ++j) {
        T av = arow[sal ? j : 0];
        T bv = brow[sbl ? j : 0];
        switch (kind) {
          case BinKind::add: orow[j] = av + bv; break;
          case BinKind::sub: orow[j] = av - bv; break;
          case BinKind::mul: orow[j] = av * bv; break;
        }
      }
    }
  }

  auto adata = a.impl()->data;
  auto bdata = b.impl()->data;
  auto ashape = a.shape();
  auto bshape = b.shape();
  auto aimpl = a.impl();
  auto bimpl = b.impl();
  const char* name = kind == BinKind::add ? "add" : kind == BinKind::sub ? "sub" : "mul";
  return make_result<T>(
      out_shape, std::move(out), name, {a, b},
      [=](const std::vector<T>& g) {
        auto sa = broadcast_strides(ashape, out_shape);
        auto sb = broadcast_strides(bshape, out_shape);
        if (wants_grad(aimpl)) {
          auto& ga = ensure_grad(*aimpl);
          if (kind == BinKind::mul)
            mul_accumulate_into(out_shape, ga, g, bdata->data(), sa, sb);
          else
            sum_accumulate_into(out_shape, ga, g, sa, T(1));
        }
        if (wants_grad(bimpl)) {
          auto& gb = ensure_grad(*bimpl);
          if (kind == BinKind::mul)
            mul_accumulate_into(out_shape, gb, g, adata->data(), sb, sa);
          else
            sum_accumulate_into(out_shape, gb, g, sb, kind == BinKind::add ? T(1) : T(-1));
        }
      });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return detail::ew_binary(detail::BinKind::add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return detail::ew_binary(detail::BinKind::sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return detail::ew_binary(detail::BinKind::mul, a, b); }

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T s) {
  int64_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 16384)
#endif
  for (int64_t i = 0; i < n; ++i) out[i] = px[i] * s;
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "mul_scalar", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
                                });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  int64_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
  for (int64_t i = 0; i < n; ++i) out[i] = px[i] + s;
  auto xi = x.impl();
  return detail::make_result<T>(x.shape(), std::move(out), "add_scalar", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                });
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline T sigmoid_val(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

template <typename T>
Tensor<T> neg(const Tensor<T>& x) { return mul_scalar(x, T(-1)); }

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  int64_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 8192)
#endif
  for (int64_t i = 0; i < n; ++i) out[i] = std::exp(px[i]);
  auto xi = x.impl();
  auto saved = std::make_shared<std::vector<T>>(out);
  return detail::make_result<T>(x.shape(), std::move(out), "exp", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  const T* so = saved->data();
                                  int64_t m = static_cast<int64_t>(g.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m > 16384)
#endif
                                  for (int64_t i = 0; i < m; ++i) gx[i] += g[i] * so[i];
                                });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  int64_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
  for (int64_t i = 0; i < n; ++i) {
    if (!(px[i] > T(0)))
      throw DomainError("log: non-positive input at flat index " + std::to_string(i));
    out[i] = std::log(px[i]);
  }
  auto xi = x.impl();
  auto xdata = x.impl()->data;
  return detail::make_result<T>(x.shape(), std::move(out), "log", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  const T* px2 = xdata->data();
                                  for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / px2[i];
                                });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  int64_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
  for (int64_t i = 0; i < n; ++i) {
    if (!(px[i] > T(0)))
      throw DomainError("sqrt: non-positive input at flat index " + std::to_string(i));
    out[i] = std::sqrt(px[i]);
  }
  auto xi = x.impl();
  auto saved = std::make_shared<std::vector<T>>(out);
  return detail::make_result<T>(x.shape(), std::move(out), "sqrt", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  const T* so = saved->data();
                                  for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (T(2) * so[i]);
                                });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  int64_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 8192)
#endif
  for (int64_t i = 0; i < n; ++i) out[i] = px[i] * detail::sigmoid_val(px[i]);
  auto xi = x.impl();
  auto xdata = x.impl()->data;
  return detail::make_result<T>(x.shape(), std::move(out), "silu", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  const T* px2 = xdata->data();
                                  int64_t m = static_cast<int64_t>(g.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m > 16384)
#endif
                                  for (int64_t i = 0; i < m; ++i) {
                                    T s = detail::sigmoid_val(px2[i]);
                                    gx[i] += g[i] * s * (T(1) + px2[i] * (T(1) - s));
                                  }
                                });
}

// softplus(x) = log(1 + e^x); returns x directly beyond 20 where the identity
// already holds at working precision.
template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  int64_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (n > 8192)
#endif
  for (int64_t i = 0; i < n; ++i) out[i] = px[i] > T(20) ? px[i] : std::log1p(std::exp(px[i]));
  auto xi = x.impl();
  auto xdata = x.impl()->data;
  return detail::make_result<T>(x.shape(), std::move(out), "softplus", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  const T* px2 = xdata->data();
                                  int64_t m = static_cast<int64_t>(g.size());
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m > 16384)
#endif
                                  for (int64_t i = 0; i < m; ++i) gx[i] += g[i] * detail::sigmoid_val(px2[i]);
                                });
}

// ---------------------------------------------------------------------------
// matmul (batched, leading dims broadcast)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void mm_forward(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  bool big = m * k * n > 32768;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (big)
#endif
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    std::fill(crow, crow + n, T(0));
    const T* arow = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      T av = arow[kk];
      const T* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  (void)big;
}

template <typename T>
void mm_backward_a(const T* g, const T* b, T* da, int64_t m, int64_t k, int64_t n) {
  bool big = m * k * n > 32768;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (big)
#endif
  for (int64_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    T* darow = da + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
      const T* brow = b + kk * n;
      T acc = 0;
      for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      darow[kk] += acc;
    }
  }
  (void)big;
}

template <typename T>
void mm_backward_b(const T* a, const T* g, T* db, int64_t m, int64_t k, int64_t n) {
  bool big = m * k * n > 32768;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (big)
#endif
  for (int64_t kk = 0; kk < k; ++kk) {
    T* dbrow = db + kk * n;
    for (int64_t i = 0; i < m; ++i) {
      T av = a[i * k + kk];
      const T* grow = g + i * n;
      for (int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
    }
  }
  (void)big;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul requires rank >= 2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  int64_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2)
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  Shape lead = detail::broadcast_shape(lead_a, lead_b);
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);

  int64_t batches = numel_of(lead);
  auto sa = detail::broadcast_strides(lead_a, lead);
  auto sb = detail::broadcast_strides(lead_b, lead);
  std::vector<int64_t> aoffs(batches), boffs(batches);
  {
    int64_t bi = 0;
    detail::for_each_broadcast(lead, sa, sb, [&](int64_t, int64_t ao, int64_t bo) {
      aoffs[bi] = ao;
      boffs[bi] = bo;
      ++bi;
    });
  }

  std::vector<T> out(static_cast<size_t>(batches) * m * n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (int64_t bt = 0; bt < batches; ++bt)
    detail::mm_forward(pa + aoffs[bt] * m * k, pb + boffs[bt] * k * n, out.data() + bt * m * n, m, k, n);

  auto aimpl = a.impl();
  auto bimpl = b.impl();
  auto adata = a.impl()->data;
  auto bdata = b.impl()->data;
  return detail::make_result<T>(
      out_shape, std::move(out), "matmul", {a, b},
      [=](const std::vector<T>& g) {
        if (detail::wants_grad(aimpl)) {
          auto& ga = detail::ensure_grad(*aimpl);
          for (int64_t bt = 0; bt < batches; ++bt)
            detail::mm_backward_a(g.data() + bt * m * n, bdata->data() + boffs[bt] * k * n,
                                  ga.data() + aoffs[bt] * m * k, m, k, n);
        }
        if (detail::wants_grad(bimpl)) {
          auto& gb = detail::ensure_grad(*bimpl);
          for (int64_t bt = 0; bt < batches; ++bt)
            detail::mm_backward_b(adata->data() + aoffs[bt] * m * k, g.data() + bt * m * n,
                                  gb.data() + boffs[bt] * k * n, m, k, n);
        }
      });
}

// ---------------------------------------------------------------------------
// layer_norm over the last dimension (population variance), then affine
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  if (x.rank() < 1) throw ShapeError("layer_norm requires rank >= 1");
  int64_t c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("layer_norm affine extents " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match feature extent " + std::to_string(c));
  if (!(eps > T(0))) throw DomainError("layer_norm eps must be positive");
  int64_t rows = x.numel() / c;
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv = std::make_shared<std::vector<T>>(rows);
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pbeta = beta.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows * c > 8192)
#endif
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * c;
    T mean = 0;
    for (int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (int64_t j = 0; j < c; ++j) {
      T d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    T iv = T(1) / std::sqrt(var + eps);
    (*inv)[r] = iv;
    T* xh = xhat->data() + r * c;
    T* o = out.data() + r * c;
    for (int64_t j = 0; j < c; ++j) {
      xh[j] = (row[j] - mean) * iv;
      o[j] = xh[j] * pg[j] + pbeta[j];
    }
  }

  auto xi = x.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  auto gdata = gamma.impl()->data;
  return detail::make_result<T>(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [=](const std::vector<T>& g) {
        const T* pg2 = gdata->data();
        if (detail::wants_grad(xi)) {
          auto& gx = detail::ensure_grad(*xi);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows * c > 8192)
#endif
          for (int64_t r = 0; r < rows; ++r) {
            const T* grow = g.data() + r * c;
            const T* xh = xhat->data() + r * c;
            T iv = (*inv)[r];
            T m1 = 0, m2 = 0;
            for (int64_t j = 0; j < c; ++j) {
              T gy = grow[j] * pg2[j];
              m1 += gy;
              m2 += gy * xh[j];
            }
            m1 /= static_cast<T>(c);
            m2 /= static_cast<T>(c);
            T* gxr = gx.data() + r * c;
            for (int64_t j = 0; j < c; ++j) {
              T gy = grow[j] * pg2[j];
              gxr[j] += iv * (gy - m1 - xh[j] * m2);
            }
          }
        }
        if (detail::wants_grad(gi)) {
          auto& gg = detail::ensure_grad(*gi);
          for (int64_t r = 0; r < rows; ++r) {
            const T* grow = g.data() + r * c;
            const T* xh = xhat->data() + r * c;
            for (int64_t j = 0; j < c; ++j) gg[j] += grow[j] * xh[j];
          }
        }
        if (detail::wants_grad(bi)) {
          auto& gb = detail::ensure_grad(*bi);
          for (int64_t r = 0; r < rows; ++r) {
            const T* grow = g.data() + r * c;
            for (int64_t j = 0; j < c; ++j) gb[j] += grow[j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// depthwise 2D cross-correlation, stride 1, zero padding
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int64_t padding) {
  if (x.rank() != 4) throw ShapeError("depthwise_conv2d input must be (B,C,H,W), got " + shape_str(x.shape()));
  if (kernel.rank() != 4 || kernel.dim(1) != 1)
    throw ShapeError("depthwise kernel must be (C,1,k,k), got " + shape_str(kernel.shape()));
  int64_t bsz = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  int64_t kc = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kc != ch)
    throw ShapeError("kernel channels " + std::to_string(kc) + " != input channels " + std::to_string(ch));
  if (kh != kw || kh % 2 == 0)
    throw ShapeError("kernel must be square with odd extent, got " + shape_str(kernel.shape()));
  if (padding < 0) throw ShapeError("padding must be non-negative");
  int64_t oh = h + 2 * padding - kh + 1;
  int64_t ow = w + 2 * padding - kw + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv output would be empty");

  std::vector<T> out(bsz * ch * oh * ow, T(0));
  const T* px = x.data().data();
  const T* pk = kernel.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2) if (bsz * ch > 1)
#endif
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t c = 0; c < ch; ++c) {
      const T* xc = px + (b * ch + c) * h * w;
      const T* wk = pk + c * kh * kw;
      T* oc = out.data() + (b * ch + c) * oh * ow;
      for (int64_t oi = 0; oi < oh; ++oi) {
        for (int64_t oj = 0; oj < ow; ++oj) {
          T acc = 0;
          for (int64_t u = 0; u < kh; ++u) {
            int64_t ii = oi + u - padding;
            if (ii < 0 || ii >= h) continue;
            for (int64_t v = 0; v < kw; ++v) {
              int64_t jj = oj + v - padding;
              if (jj < 0 || jj >= w) continue;
              acc += xc[ii * w + jj] * wk[u * kw + v];
            }
          }
          oc[oi * ow + oj] = acc;
        }
      }
    }
  }

  auto xi = x.impl();
  auto ki = kernel.impl();
  auto xdata = x.impl()->data;
  auto kdata = kernel.impl()->data;
  Shape out_shape{bsz, ch, oh, ow};
  return detail::make_result<T>(
      out_shape, std::move(out), "depthwise_conv2d", {x, kernel},
      [=](const std::vector<T>& g) {
        bool need_x = detail::wants_grad(xi);
        bool need_k = detail::wants_grad(ki);
        if (!need_x && !need_k) return;
        T* gx = need_x ? detail::ensure_grad(*xi).data() : nullptr;
        T* gk = need_k ? detail::ensure_grad(*ki).data() : nullptr;
        const T* px2 = xdata->data();
        const T* pk2 = kdata->data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int64_t c = 0; c < ch; ++c) {
          for (int64_t b = 0; b < bsz; ++b) {
            const T* xc = px2 + (b * ch + c) * h * w;
            const T* wk = pk2 + c * kh * kw;
            const T* gc = g.data() + (b * ch + c) * oh * ow;
            T* gxc = need_x ? gx + (b * ch + c) * h * w : nullptr;
            T* gkc = need_k ? gk + c * kh * kw : nullptr;
            for (int64_t oi = 0; oi < oh; ++oi) {
              for (int64_t oj = 0; oj < ow; ++oj) {
                T gv = gc[oi * ow + oj];
                for (int64_t u = 0; u < kh; ++u) {
                  int64_t ii = oi + u - padding;
                  if (ii < 0 || ii >= h) continue;
                  for (int64_t v = 0; v < kw; ++v) {
                    int64_t jj = oj + v - padding;
                    if (jj < 0 || jj >= w) continue;
                    if (need_x) gxc[ii * w + jj] += gv * wk[u * kw + v];
                    if (need_k) gkc[u * kw + v] += gv * xc[ii * w + jj];
                  }
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// non-overlapping average pooling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int64_t window) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d input must be (B,C,H,W), got " + shape_str(x.shape()));
  if (window <= 0) throw ShapeError("pool window must be positive");
  int64_t bsz = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % window != 0 || w % window != 0)
    throw ShapeError("avg_pool2d: spatial extents " + shape_str(x.shape()) + " not divisible by window " + std::to_string(window));
  int64_t oh = h / window, ow = w / window;
  std::vector<T> out(bsz * ch * oh * ow);
  const T* px = x.data().data();
  T scale = T(1) / static_cast<T>(window * window);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2) if (bsz * ch > 1)
#endif
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t c = 0; c < ch; ++c) {
      const T* xc = px + (b * ch + c) * h * w;
      T* oc = out.data() + (b * ch + c) * oh * ow;
      for (int64_t oi = 0; oi < oh; ++oi) {
        for (int64_t oj = 0; oj < ow; ++oj) {
          T acc = 0;
          for (int64_t u = 0; u < window; ++u)
            for (int64_t v = 0; v < window; ++v)
              acc += xc[(oi * window + u) * w + oj * window + v];
          oc[oi * ow + oj] = acc * scale;
        }
      }
    }
  }
  auto xi = x.impl();
  Shape out_shape{bsz, ch, oh, ow};
  return detail::make_result<T>(
      out_shape, std::move(out), "avg_pool2d", {x},
      [=](const std::vector<T>& g) {
        if (!detail::wants_grad(xi)) return;
        auto& gx = detail::ensure_grad(*xi);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) collapse(2) if (bsz * ch > 1)
#endif
        for (int64_t b = 0; b < bsz; ++b) {
          for (int64_t c = 0; c < ch; ++c) {
            const T* gc = g.data() + (b * ch + c) * oh * ow;
            T* gxc = gx.data() + (b * ch + c) * h * w;
            for (int64_t oi = 0; oi < oh; ++oi)
              for (int64_t oj = 0; oj < ow; ++oj) {
                T gv = gc[oi * ow + oj] * scale;
                for (int64_t u = 0; u < window; ++u)
                  for (int64_t v = 0; v < window; ++v)
                    gxc[(oi * window + u) * w + oj * window + v] += gv;
              }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xi = x.impl();
  int64_t n = x.numel();
  return detail::make_result<T>({1}, {acc}, "sum", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  T gv = g[0];
                                  for (int64_t i = 0; i < n; ++i) gx[i] += gv;
                                });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// structural ops: reshape / permute / narrow / gather / space_to_depth
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  // one extent may be -1 (inferred)
  int64_t known = 1, infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: multiple -1 extents");
      infer = static_cast<int64_t>(i);
    } else {
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.numel() % known != 0)
      throw ShapeError("reshape: cannot infer extent for " + shape_str(new_shape) + " from " + shape_str(x.shape()));
    new_shape[infer] = x.numel() / known;
  }
  if (numel_of(new_shape) != x.numel())
    throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) + " changes element count");
  auto xi = x.impl();
  Tensor<T> out = detail::make_result<T>(new_shape, x.data(), "reshape", {x},
                                         [=](const std::vector<T>& g) {
                                           if (!detail::wants_grad(xi)) return;
                                           auto& gx = detail::ensure_grad(*xi);
                                           for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                         });
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int64_t>& order) {
  size_t r = x.rank();
  if (order.size() != r) throw ShapeError("permute order rank mismatch");
  std::vector<bool> used(r, false);
  Shape out_shape(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t o = order[i];
    if (o < 0 || o >= static_cast<int64_t>(r) || used[o]) throw ShapeError("invalid permute order");
    used[o] = true;
    out_shape[i] = x.shape()[o];
  }
  auto in_strides = detail::contiguous_strides(x.shape());
  std::vector<int64_t> strides(r);
  for (size_t i = 0; i < r; ++i) strides[i] = in_strides[order[i]];

  int64_t n = x.numel();
  std::vector<T> out(n);
  const T* px = x.data().data();
  {
    std::vector<int64_t> zero(r, 0);
    detail::for_each_broadcast(out_shape, strides, zero,
                               [&](int64_t i, int64_t io, int64_t) { out[i] = px[io]; });
  }
  auto xi = x.impl();
  return detail::make_result<T>(out_shape, std::move(out), "permute", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  std::vector<int64_t> zero(out_shape.size(), 0);
                                  detail::for_each_broadcast(out_shape, strides, zero,
                                                             [&](int64_t i, int64_t io, int64_t) { gx[io] += g[i]; });
                                });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int64_t axis, int64_t start, int64_t length) {
  axis = detail::check_axis(axis, x.rank());
  int64_t extent = x.shape()[axis];
  if (start < 0 || length <= 0 || start + length > extent)
    throw ShapeError("narrow range [" + std::to_string(start) + "," + std::to_string(start + length) +
                     ") out of bounds for extent " + std::to_string(extent));
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];

  std::vector<T> out(numel_of(out_shape));
  const T* px = x.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    const T* src = px + (o * extent + start) * inner;
    T* dst = out.data() + o * length * inner;
    std::copy(src, src + length * inner, dst);
  }
  auto xi = x.impl();
  return detail::make_result<T>(out_shape, std::move(out), "narrow", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  for (int64_t o = 0; o < outer; ++o) {
                                    const T* src = g.data() + o * length * inner;
                                    T* dst = gx.data() + (o * extent + start) * inner;
                                    for (int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
                                  }
                                });
}

// Row gather along dim 1 of a (B,L,C) tensor: out[b,i,:] = x[b,idx[i],:].
template <typename T>
Tensor<T> gather_dim1(const Tensor<T>& x, std::shared_ptr<const std::vector<int64_t>> idx) {
  if (x.rank() != 3) throw ShapeError("gather_dim1 expects (B,L,C), got " + shape_str(x.shape()));
  int64_t bsz = x.dim(0), l = x.dim(1), c = x.dim(2);
  int64_t lo = static_cast<int64_t>(idx->size());
  for (int64_t i : *idx)
    if (i < 0 || i >= l) throw ShapeError("gather index " + std::to_string(i) + " out of range [0," + std::to_string(l) + ")");
  Shape out_shape{bsz, lo, c};
  std::vector<T> out(bsz * lo * c);
  const T* px = x.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (bsz > 1)
#endif
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t i = 0; i < lo; ++i) {
      const T* src = px + (b * l + (*idx)[i]) * c;
      T* dst = out.data() + (b * lo + i) * c;
      std::copy(src, src + c, dst);
    }
  }
  auto xi = x.impl();
  return detail::make_result<T>(out_shape, std::move(out), "gather_dim1", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (bsz > 1)
#endif
                                  for (int64_t b = 0; b < bsz; ++b) {
                                    for (int64_t i = 0; i < lo; ++i) {
                                      const T* src = g.data() + (b * lo + i) * c;
                                      T* dst = gx.data() + (b * l + (*idx)[i]) * c;
                                      for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                                    }
                                  }
                                });
}

// (B,C,H,W) -> (B, C*block^2, H/block, W/block); output channel index is
// c*block^2 + bi*block + bj. Pure reindexing.
template <typename T>
Tensor<T> space_to_depth(const Tensor<T>& x, int64_t block) {
  if (x.rank() != 4) throw ShapeError("space_to_depth expects (B,C,H,W), got " + shape_str(x.shape()));
  int64_t bsz = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (block <= 0 || h % block != 0 || w % block != 0)
    throw ShapeError("space_to_depth: extents " + shape_str(x.shape()) + " not divisible by block " + std::to_string(block));
  int64_t oh = h / block, ow = w / block, oc = ch * block * block;
  Shape out_shape{bsz, oc, oh, ow};
  std::vector<T> out(numel_of(out_shape));
  const T* px = x.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (bsz > 1)
#endif
  for (int64_t b = 0; b < bsz; ++b) {
    for (int64_t c = 0; c < ch; ++c)
      for (int64_t bi = 0; bi < block; ++bi)
        for (int64_t bj = 0; bj < block; ++bj) {
          int64_t co = (c * block + bi) * block + bj;
          const T* src = px + (b * ch + c) * h * w;
          T* dst = out.data() + (b * oc + co) * oh * ow;
          for (int64_t oi = 0; oi < oh; ++oi)
            for (int64_t oj = 0; oj < ow; ++oj)
              dst[oi * ow + oj] = src[(oi * block + bi) * w + oj * block + bj];
        }
  }
  auto xi = x.impl();
  return detail::make_result<T>(out_shape, std::move(out), "space_to_depth", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (bsz > 1)
#endif
                                  for (int64_t b = 0; b < bsz; ++b) {
                                    for (int64_t c = 0; c < ch; ++c)
                                      for (int64_t bi = 0; bi < block; ++bi)
                                        for (int64_t bj = 0; bj < block; ++bj) {
                                          int64_t co = (c * block + bi) * block + bj;
                                          const T* src = g.data() + (b * oc + co) * oh * ow;
                                          T* dst = gx.data() + (b * ch + c) * h * w;
                                          for (int64_t oi = 0; oi < oh; ++oi)
                                            for (int64_t oj = 0; oj < ow; ++oj)
                                              dst[(oi * block + bi) * w + oj * block + bj] += src[oi * ow + oj];
                                        }
                                  }
                                });
}

// Layout helpers between (B,C,H,W) and the scan's (B, H*W, C).
template <typename T>
Tensor<T> to_channels_last(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("to_channels_last expects (B,C,H,W)");
  int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  return reshape(permute(x, {0, 2, 3, 1}), {b, h * w, c});
}

template <typename T>
Tensor<T> to_spatial(const Tensor<T>& x, int64_t h, int64_t w) {
  if (x.rank() != 3) throw ShapeError("to_spatial expects (B,L,C)");
  int64_t b = x.dim(0), c = x.dim(2);
  if (x.dim(1) != h * w) throw ShapeError("to_spatial: L != H*W");
  return permute(reshape(x, {b, h, w, c}), {0, 3, 1, 2});
}

// ---------------------------------------------------------------------------
// log_softmax over the last dimension (max-shifted)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("log_softmax requires rank >= 1");
  int64_t c = x.dim(-1);
  int64_t rows = x.numel() / c;
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows * c > 8192)
#endif
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * c;
    T mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    T lse = mx + std::log(z);
    T* o = out.data() + r * c;
    for (int64_t j = 0; j < c; ++j) o[j] = row[j] - lse;
  }
  auto xi = x.impl();
  auto saved = std::make_shared<std::vector<T>>(out);
  return detail::make_result<T>(x.shape(), std::move(out), "log_softmax", {x},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(xi)) return;
                                  auto& gx = detail::ensure_grad(*xi);
                                  const T* so = saved->data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows * c > 8192)
#endif
                                  for (int64_t r = 0; r < rows; ++r) {
                                    const T* grow = g.data() + r * c;
                                    const T* srow = so + r * c;
                                    T s = 0;
                                    for (int64_t j = 0; j < c; ++j) s += grow[j];
                                    T* gxr = gx.data() + r * c;
                                    for (int64_t j = 0; j < c; ++j) gxr[j] += grow[j] - std::exp(srow[j]) * s;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// random fills (leaf initialization)
// ---------------------------------------------------------------------------

template <typename T>
void fill_randn(Tensor<T>& t, Rng& rng, double mean = 0.0, double stddev = 1.0) {
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(mean, stddev));
}

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
void fill_trunc_normal(Tensor<T>& t, Rng& rng, double stddev) {
  for (auto& v : t.data()) v = static_cast<T>(rng.trunc_normal(stddev));
}

}  // namespace rsvm
