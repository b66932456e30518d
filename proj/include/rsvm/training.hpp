#pragma once

// Training recipe pieces: label-smoothed cross entropy, decoupled AdamW,
// linear-warmup + cosine-decay schedule, weight EMA, top-k accuracy.

#include "rsvm/tensor.hpp"

namespace rsvm {

// loss = mean_b of -sum_c q_c log softmax(logits)_c with
// q = (1 - eps) * onehot + eps / K.
template <typename T>
Tensor<T> label_smoothed_ce(const Tensor<T>& logits, const std::vector<int64_t>& targets, double eps) {
  if (logits.rank() != 2) throw ShapeError("label_smoothed_ce expects (B,K) logits, got " + shape_str(logits.shape()));
  if (!(eps >= 0.0 && eps < 1.0)) throw DomainError("label smoothing must satisfy 0 <= eps < 1");
  const int64_t bsz = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != bsz)
    throw ShapeError("target count " + std::to_string(targets.size()) + " != batch " + std::to_string(bsz));
  for (int64_t t : targets)
    if (t < 0 || t >= k) throw DomainError("target class " + std::to_string(t) + " out of range [0," + std::to_string(k) + ")");

  Tensor<T> lsm = log_softmax(logits);
  const T* p = lsm.data().data();
  const T w_target = static_cast<T>(1.0 - eps);
  const T w_uniform = static_cast<T>(eps / static_cast<double>(k));
  T acc = 0;
  for (int64_t b = 0; b < bsz; ++b) {
    const T* row = p + b * k;
    T row_sum = 0;
    for (int64_t c = 0; c < k; ++c) row_sum += row[c];
    acc += -(w_target * row[targets[b]] + w_uniform * row_sum);
  }
  acc /= static_cast<T>(bsz);

  auto li = lsm.impl();
  auto tgt = std::make_shared<std::vector<int64_t>>(targets);
  return detail::make_result<T>({1}, {acc}, "label_smoothed_ce", {lsm},
                                [=](const std::vector<T>& g) {
                                  if (!detail::wants_grad(li)) return;
                                  auto& gl = detail::ensure_grad(*li);
                                  T scale = g[0] / static_cast<T>(bsz);
                                  for (int64_t b = 0; b < bsz; ++b) {
                                    T* row = gl.data() + b * k;
                                    for (int64_t c = 0; c < k; ++c) row[c] -= scale * w_uniform;
                                    row[(*tgt)[b]] -= scale * w_target;
                                  }
                                });
}

struct OptimConfig {
  double lr_max = 1e-3;
  double beta1 = 0.9, beta2 = 0.999;
  double weight_decay = 0.05;
  double eps = 1e-8;
};

// Decoupled AdamW:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
//   w <- w - lr * mhat / (sqrt(vhat) + eps) - lr * wd * w
template <typename T>
class AdamW {
 public:
  AdamW(OptimConfig cfg, const std::vector<Tensor<T>*>& params) : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (auto* p : params) {
      m_.emplace_back(p->numel(), T(0));
      v_.emplace_back(p->numel(), T(0));
    }
  }

  int64_t step_count() const { return t_; }

  void step(const std::vector<Tensor<T>*>& params, double lr) {
    if (params.size() != m_.size()) throw ShapeError("optimizer was built for a different parameter set");
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T bc1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    const T lrt = static_cast<T>(lr);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T eps = static_cast<T>(cfg_.eps);
    for (size_t pi = 0; pi < params.size(); ++pi) {
      Tensor<T>& p = *params[pi];
      if (static_cast<int64_t>(m_[pi].size()) != p.numel())
        throw ShapeError("parameter " + std::to_string(pi) + " changed shape under the optimizer");
      auto& w = p.data();
      const std::vector<T>* g = p.has_grad() ? &p.grad_data() : nullptr;
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (size_t i = 0; i < w.size(); ++i) {
        T gi = g ? (*g)[i] : T(0);
        m[i] = b1 * m[i] + (T(1) - b1) * gi;
        v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
        T mhat = m[i] / bc1;
        T vhat = v[i] / bc2;
        w[i] -= lrt * (mhat / (std::sqrt(vhat) + eps)) + lrt * wd * w[i];
      }
    }
  }

 private:
  OptimConfig cfg_;
  int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

struct Schedule {
  int64_t warmup_epochs = 20;
  int64_t total_epochs = 150;
  int64_t steps_per_epoch = 1;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double warmup_init = 1e-6;

  void validate() const {
    if (warmup_epochs < 0 || total_epochs <= 0 || steps_per_epoch <= 0)
      throw ConfigError("schedule extents must be positive");
    if (warmup_epochs >= total_epochs) throw ConfigError("warmup must be shorter than the run");
  }
};

// Linear warmup to lr_max, then cosine decay to lr_min.
inline double lr_at(int64_t step, const Schedule& s) {
  s.validate();
  const int64_t warmup_steps = s.warmup_epochs * s.steps_per_epoch;
  const int64_t total_steps = s.total_epochs * s.steps_per_epoch;
  if (step < 0 || step > total_steps) throw DomainError("schedule step " + std::to_string(step) + " out of range");
  if (step < warmup_steps) {
    double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
    return s.warmup_init + (s.lr_max - s.warmup_init) * frac;
  }
  double denom = static_cast<double>(total_steps - warmup_steps);
  double progress = denom > 0 ? static_cast<double>(step - warmup_steps) / denom : 1.0;
  return s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + std::cos(M_PI * progress));
}

// Shadow copy of the parameters, updated as
// shadow <- decay * shadow + (1 - decay) * param.
template <typename T>
class Ema {
 public:
  Ema(double decay, const std::vector<Tensor<T>*>& params) : decay_(static_cast<T>(decay)) {
    shadow_.reserve(params.size());
    for (auto* p : params) shadow_.push_back(p->data());
  }

  void update(const std::vector<Tensor<T>*>& params) {
    if (params.size() != shadow_.size()) throw ShapeError("EMA was built for a different parameter set");
    for (size_t pi = 0; pi < params.size(); ++pi) {
      const auto& w = params[pi]->data();
      auto& s = shadow_[pi];
      if (s.size() != w.size()) throw ShapeError("EMA parameter " + std::to_string(pi) + " changed shape");
      for (size_t i = 0; i < w.size(); ++i) s[i] = decay_ * s[i] + (T(1) - decay_) * w[i];
    }
  }

  const std::vector<std::vector<T>>& shadow() const { return shadow_; }

  // Temporarily installs the shadow weights; call again to restore.
  void swap_with(const std::vector<Tensor<T>*>& params) {
    for (size_t pi = 0; pi < params.size(); ++pi) params[pi]->data().swap(shadow_[pi]);
  }

 private:
  T decay_;
  std::vector<std::vector<T>> shadow_;
};

// Fraction of rows whose label ranks among the k largest logits; ties broken
// toward the lower class index.
template <typename T>
double top_k_accuracy(const Tensor<T>& logits, const std::vector<int64_t>& labels, int64_t k) {
  if (logits.rank() != 2) throw ShapeError("top_k_accuracy expects (N,K) logits");
  const int64_t n = logits.dim(0), classes = logits.dim(1);
  if (k < 1 || k > classes) throw DomainError("k " + std::to_string(k) + " out of range [1," + std::to_string(classes) + "]");
  if (static_cast<int64_t>(labels.size()) != n) throw ShapeError("label count != rows");
  const T* p = logits.data().data();
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    const T* row = p + i * classes;
    int64_t label = labels[i];
    if (label < 0 || label >= classes) throw DomainError("label out of range");
    T lv = row[label];
    int64_t rank = 0;
    for (int64_t c = 0; c < classes; ++c) {
      if (row[c] > lv || (row[c] == lv && c < label)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace rsvm
