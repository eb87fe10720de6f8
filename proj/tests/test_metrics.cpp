#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "vpd/metrics.hpp"

using namespace vpd;

namespace {

DepthMapT<double> map_of(std::vector<double> v, int64_t h, int64_t w) {
  DepthMapT<double> m;
  m.depths = Tensord::from({h, w}, std::move(v));
  m.mask.assign(static_cast<size_t>(h * w), 1);
  return m;
}

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("depth_metrics: perfect prediction") {
  auto gt = map_of({2.0, 3.0, 4.0, 5.0}, 2, 2);
  auto r = depth_metrics(gt, gt);
  CHECK(r.abs_rel == 0.0);
  CHECK(r.abs == 0.0);
  CHECK(r.sq_rel == 0.0);
  CHECK(r.rmse == 0.0);
  CHECK(r.delta.at(1) == 1.0);
  CHECK(r.pixel_count == 4);
}

TEST_CASE("depth_metrics: hand-computed two-pixel oracle") {
  auto gt = map_of({2.0, 4.0}, 1, 2);
  auto pred = map_of({3.0, 4.0}, 1, 2);
  auto r = depth_metrics(pred, gt);
  CHECK(r.abs == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.abs_rel == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(r.rmse == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
  CHECK(r.sq_rel == doctest::Approx(0.25).epsilon(1e-12));  // (1/2 + 0) / 2
}

TEST_CASE("depth_metrics: inlier ratio oracle at ratio 1.3") {
  Rng rng(3);
  std::vector<double> g(16);
  for (auto& x : g) x = rng.uniform(1.0, 9.0);
  auto gt = map_of(g, 4, 4);
  std::vector<double> p(16);
  for (size_t i = 0; i < 16; ++i) p[i] = 1.3 * g[i];
  auto pred = map_of(p, 4, 4);
  auto r = depth_metrics(pred, gt);
  CHECK(r.delta.at(1) == 0.0);  // 1.3 >= 1.25
  CHECK(r.delta.at(2) == 1.0);  // 1.3 < 1.5625
}

TEST_CASE("depth_metrics: threshold fractions in configured units") {
  auto gt = map_of({1.0, 1.0, 1.0, 1.0}, 2, 2);
  auto pred = map_of({1.005, 1.012, 1.030, 1.0}, 2, 2);
  auto r = depth_metrics(pred, gt, {8.0, 20.0}, {1, 2}, 1e-3);
  CHECK(r.th.at(8.0) == doctest::Approx(0.5));   // 12mm and 30mm exceed 8mm
  CHECK(r.th.at(20.0) == doctest::Approx(0.25)); // only 30mm exceeds 20mm
}

TEST_CASE("depth_metrics rejects zero ground truth on a valid pixel") {
  auto gt = map_of({0.0}, 1, 1);
  auto pred = map_of({1.0}, 1, 1);
  CHECK_THROWS_AS(depth_metrics(pred, gt), Error);
}

TEST_CASE("depth_metrics: scale consistency and monotonicity over random instances") {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> g(9), p(9);
    for (auto& x : g) x = rng.uniform(0.5, 10.0);
    for (size_t i = 0; i < 9; ++i) p[i] = g[i] + rng.normal() * 0.5;
    auto gt = map_of(g, 3, 3);
    auto pred = map_of(p, 3, 3);
    auto r = depth_metrics(pred, gt, {5.0, 20.0, 80.0}, {1, 2, 3});

    const double c = rng.uniform(0.5, 3.0);
    std::vector<double> gc(9), pc(9);
    for (size_t i = 0; i < 9; ++i) {
      gc[i] = c * g[i];
      pc[i] = c * p[i];
    }
    auto rc = depth_metrics(map_of(pc, 3, 3), map_of(gc, 3, 3), {5.0, 20.0, 80.0}, {1, 2, 3});
    CHECK(rc.abs_rel == doctest::Approx(r.abs_rel).epsilon(1e-9));
    CHECK(rc.abs == doctest::Approx(c * r.abs).epsilon(1e-9));
    CHECK(rc.rmse == doctest::Approx(c * r.rmse).epsilon(1e-9));
    CHECK(rc.sq_rel == doctest::Approx(c * r.sq_rel).epsilon(1e-9));
    for (int i = 1; i <= 3; ++i) CHECK(rc.delta.at(i) == r.delta.at(i));

    CHECK(r.delta.at(1) <= r.delta.at(2));
    CHECK(r.delta.at(2) <= r.delta.at(3));
    CHECK(r.th.at(5.0) >= r.th.at(20.0));
    CHECK(r.th.at(20.0) >= r.th.at(80.0));
  }
}

TEST_CASE("semantic_metrics: perfect prediction") {
  std::vector<int32_t> g{0, 1, 2, 0, 1, 2, 0, 1};
  auto r = semantic_metrics(g, g, {2, 2, 2}, 3);
  CHECK(r.miou == 1.0);
  for (int c = 0; c < 3; ++c) {
    CHECK(r.evaluated[c]);
    CHECK(r.iou[c] == 1.0);
  }
}

TEST_CASE("semantic_metrics: counting oracle") {
  std::vector<int32_t> pred(8, 0);
  std::vector<int32_t> gt{0, 0, 0, 0, 1, 1, 1, 1};
  auto r = semantic_metrics(pred, gt, {2, 2, 2}, 2);
  CHECK(r.iou[0] == doctest::Approx(0.5));
  CHECK(r.iou[1] == doctest::Approx(0.0));
  CHECK(r.miou == doctest::Approx(0.25));
}

TEST_CASE("semantic_metrics: ignored voxels and degenerate inputs") {
  std::vector<int32_t> pred{0, 1, 0, 1};
  std::vector<int32_t> gt{0, -1, -1, 1};
  auto r = semantic_metrics(pred, gt, {1, 2, 2}, 2, -1);
  CHECK(r.miou == 1.0);  // the two considered voxels match

  std::vector<int32_t> all_ignored{-1, -1, -1, -1};
  CHECK_THROWS_AS(semantic_metrics(pred, all_ignored, {1, 2, 2}, 2, -1), Error);
  CHECK_THROWS_AS(semantic_metrics(pred, gt, {1, 2, 3}, 2, -1), Error);
}

TEST_CASE("semantic_metrics: absent classes are excluded from the mean") {
  std::vector<int32_t> pred{0, 0, 1, 1};
  std::vector<int32_t> gt{0, 1, 1, 1};
  auto r = semantic_metrics(pred, gt, {1, 2, 2}, 5);
  CHECK(r.evaluated[0]);
  CHECK(r.evaluated[1]);
  for (int c = 2; c < 5; ++c) CHECK_FALSE(r.evaluated[c]);
  double want = (0.5 + 2.0 / 3.0) / 2.0;
  CHECK(r.miou == doctest::Approx(want));
}

TEST_CASE("semantic_metrics is permutation-equivariant under relabeling") {
  Rng rng(17);
  const int n = 64, k = 4;
  std::vector<int32_t> pred(n), gt(n);
  for (auto& x : pred) x = static_cast<int32_t>(rng.uniform_int(0, k - 1));
  for (auto& x : gt) x = static_cast<int32_t>(rng.uniform_int(0, k - 1));
  auto base = semantic_metrics(pred, gt, {4, 4, 4}, k);
  std::vector<int32_t> perm{2, 3, 1, 0};
  std::vector<int32_t> pp(n), gp(n);
  for (int i = 0; i < n; ++i) {
    pp[i] = perm[pred[i]];
    gp[i] = perm[gt[i]];
  }
  auto rp = semantic_metrics(pp, gp, {4, 4, 4}, k);
  CHECK(rp.miou == doctest::Approx(base.miou).epsilon(1e-12));
  for (int c = 0; c < k; ++c)
    CHECK(rp.iou[perm[c]] == doctest::Approx(base.iou[c]).epsilon(1e-12));
}

TEST_SUITE_END();
