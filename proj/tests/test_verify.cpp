#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rsvm/verify.hpp"

using namespace rsvm;

namespace {

// Chunked scan with the carry composition dropped: every chunk restarts the
// recurrence from zero state. A classic way to get this kernel wrong; the
// equivalence suite must flag it.
Tensor<float> corrupted_chunked_scan(const DiscretizedStep<float>& step, const Tensor<float>& c_sel,
                                     const Tensor<float>& d_skip, const Tensor<float>& x, int64_t chunk) {
  const int64_t B = step.a_bar.dim(0), L = step.a_bar.dim(1), D = step.a_bar.dim(2), N = step.a_bar.dim(3);
  
  auto y = Tensor<float>::zeros({B, L, D});
  const float* abar = step.a_bar.data().data();
  const float* bx = step.b_bar_x.data().data();
  const float* cs = c_sel.data().data();
  const float* dsk = d_skip.data().data();
  const float* px = x.data().data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t l0 = 0; l0 < L; l0 += chunk) {
      std::vector<float> h(D * N, 0.0f);  // the bug: no carry from earlier chunks
      for (int64_t l = l0; l < std::min(L, l0 + chunk); ++l) {
        for (int64_t d = 0; d < D; ++d) {
          float acc = 0;
          for (int64_t n = 0; n < N; ++n) {
            int64_t off = (((b * L + l) * D) + d) * N + n;
            h[d * N + n] = abar[off] * h[d * N + n] + bx[off];
            acc += cs[(b * L + l) * N + n] * h[d * N + n];
          }
          y.data()[(b * L + l) * D + d] = acc + dsk[d] * px[(b * L + l) * D + d];
        }
      }
    }
  }
  return y;
}

}  // namespace

TEST_CASE("verification suites pass on the production implementations") {
  auto results = run_verification(/*include_model_grad=*/false);
  for (const auto& r : results) {
    INFO(r.name, ": ", r.measure, " vs ", r.threshold, " ", r.detail);
    CHECK(r.pass);
  }
}

TEST_CASE("mutation harness: a corrupted chunk carry is detected") {
  auto r = check_scan_equivalence(corrupted_chunked_scan);
  INFO("corrupted-scan deviation: ", r.measure);
  CHECK_FALSE(r.pass);
  CHECK(r.measure > 1e-2);  // gross error, not a borderline miss
}
