#pragma once

// Verification suites behind `verify` and the acceptance harness. Each suite
// runs at fixed seeds and reports its worst measured error against the
// pinned threshold.

#include <functional>
#include <string>
#include <vector>

#include "rsvm/ssm.hpp"

namespace rsvm {

struct SuiteResult {
  std::string name;
  bool pass = false;
  double measure = 0;    // worst error observed
  double threshold = 0;  // pass bound (measure < threshold)
  std::string detail;
};

// Fast-scan entry point, injectable so a deliberately corrupted
// implementation can be shown to fail the check.
using ScanFn = std::function<Tensor<float>(const DiscretizedStep<float>&, const Tensor<float>&,
                                           const Tensor<float>&, const Tensor<float>&, int64_t)>;

// 100 seeded instances (batch 2, L 64, D 8, N 4), chunk sizes {1,2,7,16,64};
// deviation measured as ||ref - fast||_inf / ||ref||_inf.
SuiteResult check_scan_equivalence(const ScanFn& fast_impl);
inline SuiteResult check_scan_equivalence() {
  return check_scan_equivalence([](const DiscretizedStep<float>& s, const Tensor<float>& c,
                                   const Tensor<float>& d, const Tensor<float>& x, int64_t chunk) {
    return selective_scan_fast(s, c, d, x, chunk);
  });
}

// Elementwise/matmul/norm/conv/pool ops and the scan path against central
// finite differences in double precision.
SuiteResult check_gradient_ops();
// Full VSS block gradient check.
SuiteResult check_gradient_vss_block();
// Whole nano-micro model gradient check (the slow one).
SuiteResult check_gradient_model();

// Taylor-form discretization error vs the exact zeroth-order-hold oracle:
// halving delta divides the error by 4 (+-10%) over {0.2, 0.1, 0.05, 0.025}.
SuiteResult check_discretization_order();

// Expand/inverse-reorder bitwise round trip on random maps up to 16x16 and
// the exact 4x identity of expand-then-merge.
SuiteResult check_cross_scan_roundtrip();

// Zero-initialized global-residual model reproduces the plain model, and the
// parameter-count delta is exactly C1*C4 + C4.
SuiteResult check_residual_equivalence();

// Normalized entropy anchors.
SuiteResult check_entropy_values();

// Top-k accuracy against a full-sort oracle on 1000 random rows, plus
// monotonicity in k.
SuiteResult check_topk_oracle();

// 7:3 per-class split within +-1 image and byte-identical split lists for
// identical seeds (uses a temporary synthetic dataset).
SuiteResult check_split_protocol();

// Everything above, in order. `include_model_grad` controls the slow
// whole-model finite-difference suite.
std::vector<SuiteResult> run_verification(bool include_model_grad = true);

}  // namespace rsvm
