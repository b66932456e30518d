#pragma once

// Central-difference gradient verification. Run in double precision; finite
// differences are not trustworthy at float32.

#include "rsvm/tensor.hpp"

namespace rsvm {

// `forward` rebuilds the scalar loss from the current contents of `x` (and
// any other leaves it closes over). Returns the max relative error between
// the analytic gradient of x and central differences.
template <typename F>
double grad_check(Tensor<double>& x, F&& forward, double eps = 1e-5) {
  x.zero_grad();
  Tensor<double> loss = forward();
  backward(loss);
  std::vector<double> analytic = x.has_grad() ? x.grad_data() : std::vector<double>(x.numel(), 0.0);
  x.zero_grad();

  double max_rel = 0.0;
  {
    NoGradGuard ng;
    auto& d = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
      double orig = d[i];
      d[i] = orig + eps;
      double fp = forward().item();
      d[i] = orig - eps;
      double fm = forward().item();
      d[i] = orig;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = analytic[i];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// Checks several leaves against one forward function; one backward pass,
// finite differences per leaf. Returns the max relative error over all.
template <typename F>
double grad_check_many(const std::vector<Tensor<double>*>& leaves, F&& forward, double eps = 1e-5) {
  for (auto* leaf : leaves) leaf->zero_grad();
  Tensor<double> loss = forward();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto* leaf : leaves) {
    analytic.push_back(leaf->has_grad() ? leaf->grad_data() : std::vector<double>(leaf->numel(), 0.0));
    leaf->zero_grad();
  }

  double max_rel = 0.0;
  NoGradGuard ng;
  for (size_t li = 0; li < leaves.size(); ++li) {
    auto& d = leaves[li]->data();
    for (int64_t i = 0; i < leaves[li]->numel(); ++i) {
      double orig = d[i];
      d[i] = orig + eps;
      double fp = forward().item();
      d[i] = orig - eps;
      double fm = forward().item();
      d[i] = orig;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = analytic[li][i];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace rsvm
