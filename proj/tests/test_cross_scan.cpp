#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rsvm/cross_scan.hpp"
#include "rsvm/grad_check.hpp"
#include "test_helpers.hpp"

using namespace rsvm;
using testutil::bitwise_equal;
using testutil::random_tensor;

TEST_CASE("declared traversal orders on a 2x2 map") {
  // map [[1,2],[3,4]]
  auto x = TensorF::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto dirs = cross_scan_expand(x);
  auto seq_of = [&](int d) {
    std::vector<float> v;
    for (int64_t i = 0; i < 4; ++i) v.push_back(dirs.seq[d].data()[i]);
    return v;
  };
  CHECK(seq_of(0) == std::vector<float>{1, 2, 3, 4});
  CHECK(seq_of(1) == std::vector<float>{1, 3, 2, 4});
  CHECK(seq_of(2) == std::vector<float>{4, 3, 2, 1});
  CHECK(seq_of(3) == std::vector<float>{4, 2, 3, 1});
}

TEST_CASE("degenerate maps") {
  auto x = TensorF::from({1, 2, 1, 1}, {5, 7});
  auto dirs = cross_scan_expand(x);
  for (int d = 0; d < 4; ++d) {
    CHECK(dirs.seq[d].shape() == Shape{1, 1, 2});
    CHECK(dirs.seq[d].data() == std::vector<float>{5, 7});
  }

  // single-column image: row-major equals column-major
  auto col = random_tensor<float>({1, 3, 4, 1}, 7);
  auto cd = cross_scan_expand(col);
  CHECK(bitwise_equal(cd.seq[0], cd.seq[1]));
  CHECK(bitwise_equal(cd.seq[2], cd.seq[3]));
}

TEST_CASE("round trip: inverse permutation recovers the map bitwise") {
  for (int64_t h : {1, 3, 5, 16}) {
    for (int64_t w : {1, 2, 7, 16}) {
      auto x = random_tensor<float>({2, 3, h, w}, 100 + h * 16 + w);
      auto dirs = cross_scan_expand(x);
      ScanDirections sd(h, w);
      for (int d = 0; d < 4; ++d) {
        auto restored = to_spatial(gather_dim1(dirs.seq[d], sd.inv[d]), h, w);
        CHECK(bitwise_equal(restored, x));
      }
    }
  }
}

TEST_CASE("merge of identical spatial-order inputs is 4x at each position") {
  auto img = random_tensor<float>({2, 5, 3, 3}, 31);
  auto flat = to_channels_last(img);
  // all four slots hold the same already-spatial sequence; direction 0 is
  // identity so inverse reorders of the others must land on the same sum
  auto dirs = cross_scan_expand(img);
  std::array<TensorF, 4> same{flat, flat, flat, flat};
  ScanDirections sd(3, 3);
  std::array<TensorF, 4> per_dir{flat, gather_dim1(flat, sd.perm[1]), gather_dim1(flat, sd.perm[2]),
                                 gather_dim1(flat, sd.perm[3])};
  auto merged = cross_merge(per_dir, 3, 3);
  auto four_x = mul_scalar(img, 4.0f);
  CHECK(bitwise_equal(merged, four_x));
}

TEST_CASE("expand then merge with identity transform equals 4x input exactly") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    auto x = random_tensor<float>({2, 4, 6, 5}, 40 + seed);
    auto dirs = cross_scan_expand(x);
    auto merged = cross_merge(dirs.seq, dirs.height, dirs.width);
    CHECK(bitwise_equal(merged, mul_scalar(x, 4.0f)));
  }
}

TEST_CASE("one nonzero direction merges to its inverse-permuted image") {
  auto x = random_tensor<float>({1, 2, 3, 4}, 51);
  auto dirs = cross_scan_expand(x);
  auto zero = TensorF::zeros({1, 12, 2});
  std::array<TensorF, 4> only2{zero, zero, dirs.seq[2], zero};
  auto merged = cross_merge(only2, 3, 4);
  CHECK(bitwise_equal(merged, x));  // inverse of direction 2 restores x
}

TEST_CASE("cross_merge rejects length mismatch") {
  auto y = TensorF::zeros({1, 6, 2});
  std::array<TensorF, 4> bad{y, y, y, y};
  CHECK_THROWS_AS(cross_merge(bad, 2, 2), ShapeError);
}

TEST_CASE("ss2d preserves shape and maps zero to zero") {
  Rng rng(61);
  auto p = Ss2dParams<float>::init(8, 4, rng);
  auto x = random_tensor<float>({2, 8, 4, 4}, 62);
  auto y = ss2d(x, p, 5);
  CHECK(y.shape() == Shape{2, 8, 4, 4});

  auto zy = ss2d(TensorF::zeros({2, 8, 4, 4}), p, 5);
  for (float v : zy.data()) CHECK(v == 0.0f);
}

TEST_CASE("ss2d commutes with 180-degree rotation when opposing parameters swap") {
  Rng rng(71);
  const int64_t d = 3, n = 2, h = 3, w = 3;
  auto p = Ss2dParams<double>::init(d, n, rng);
  // healthy magnitudes so every path contributes
  std::vector<TensorD*> leaves;
  for (int dd = 0; dd < 4; ++dd)
    p.dir[dd].visit_params("", [&](const std::string&, TensorD& t) { leaves.push_back(&t); });
  testutil::randomize_leaves(leaves, 72, -0.7, 0.7);

  Ss2dParams<double> swapped;
  swapped.dir[0] = p.dir[2];
  swapped.dir[2] = p.dir[0];
  swapped.dir[1] = p.dir[3];
  swapped.dir[3] = p.dir[1];

  auto x = random_tensor<double>({1, d, h, w}, 73);
  auto rot = [&](const TensorD& t) {
    auto out = t.clone_detached();
    const int64_t l = h * w;
    for (int64_t c = 0; c < d; ++c)
      for (int64_t i = 0; i < l; ++i) out.data()[c * l + i] = t.data()[c * l + (l - 1 - i)];
    return out;
  };
  auto y = ss2d(x, p, 4);
  auto y_rot = ss2d(rot(x), swapped, 4);
  CHECK(bitwise_equal(rot(y), y_rot));
}

TEST_CASE("every output pixel reacts to every input pixel") {
  Rng rng(81);
  const int64_t d = 2, h = 3, w = 3;
  auto p = Ss2dParams<double>::init(d, 2, rng);
  std::vector<TensorD*> leaves;
  for (int dd = 0; dd < 4; ++dd)
    p.dir[dd].visit_params("", [&](const std::string&, TensorD& t) { leaves.push_back(&t); });
  testutil::randomize_leaves(leaves, 82, -0.6, 0.6);

  auto x = random_tensor<double>({1, d, h, w}, 83);
  auto base = ss2d(x, p, 3);
  for (int64_t pi = 0; pi < h * w; ++pi) {
    auto x2 = x.clone_detached();
    for (int64_t c = 0; c < d; ++c) x2.data()[c * h * w + pi] += 0.5;
    auto out = ss2d(x2, p, 3);
    for (int64_t po = 0; po < h * w; ++po)
      for (int64_t c = 0; c < d; ++c) {
        double delta = std::abs(out.data()[c * h * w + po] - base.data()[c * h * w + po]);
        CHECK(delta > 1e-12);
      }
  }
}

TEST_CASE("ss2d gradient matches finite differences") {
  Rng rng(91);
  const int64_t d = 2, n = 2, h = 2, w = 3;
  auto p = Ss2dParams<double>::init(d, n, rng);
  auto x = random_tensor<double>({1, d, h, w}, 92);
  x.set_requires_grad(true);
  std::vector<TensorD*> leaves{&x};
  for (int dd = 0; dd < 4; ++dd)
    p.dir[dd].visit_params("", [&](const std::string&, TensorD& t) { leaves.push_back(&t); });
  testutil::randomize_leaves(leaves, 93);
  double err = grad_check_many(leaves, [&] {
    auto y = ss2d(x, p, 2);
    return sum_all(mul(y, y));
  });
  CHECK(err < 1e-3);
}
