#include <cmath>
#include <limits>

#include "doctest.h"
#include "test_util.hpp"
#include "vpd/volume.hpp"

using namespace vpd;
using vpdtest::check_prob_volume;
using vpdtest::pixel_volume;
using vpdtest::random_prob_volume;

TEST_SUITE_BEGIN("volume");

TEST_CASE("probabilize: uniform costs give uniform distribution") {
  CostVolumeT<double> cost{Tensord::full({1, 4, 2, 2}, 1.7)};
  auto p = probabilize(cost);
  for (double v : p.values.data()) CHECK(v == doctest::Approx(0.25));
  check_prob_volume(p);
}

TEST_CASE("probabilize: direct softmax oracle") {
  CostVolumeT<double> cost{Tensord::from({1, 2, 1, 1}, {0.0, std::log(2.0)})};
  auto p = probabilize(cost);
  CHECK(p.values.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(p.values.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  CostVolumeT<double> spike{Tensord::from({1, 3, 1, 1}, {0.0, 20.0, 0.0})};
  auto q = probabilize(spike);
  CHECK(q.values.data()[1] > 0.9999);
}

TEST_CASE("probabilize rejects non-finite input") {
  CostVolumeT<double> cost{Tensord::from({1, 2, 1, 1}, {0.0, std::nan("")})};
  CHECK_THROWS_AS(probabilize(cost), Error);
  CostVolumeT<double> inf{Tensord::from({1, 2, 1, 1}, {0.0, std::numeric_limits<double>::infinity()})};
  CHECK_THROWS_AS(probabilize(inf), Error);
}

TEST_CASE("probabilize: per-pixel shift invariance") {
  Rng rng(31);
  auto costs = Tensord::randn({1, 8, 4, 4}, rng);
  auto p1 = probabilize(CostVolumeT<double>{costs});
  auto shifted = costs.detach();
  for (int64_t px = 0; px < 16; ++px) {
    double c = rng.uniform(-5.0, 5.0);
    for (int64_t d = 0; d < 8; ++d) shifted.data()[d * 16 + px] += c;
  }
  auto p2 = probabilize(CostVolumeT<double>{shifted});
  for (size_t i = 0; i < p1.values.data().size(); ++i)
    CHECK(p1.values.data()[i] == doctest::Approx(p2.values.data()[i]).epsilon(1e-6));
  check_prob_volume(p1);
}

namespace {
DepthMapT<double> single_pixel_depth(double d) {
  DepthMapT<double> m;
  m.depths = Tensord::from({1, 1}, {d});
  m.mask = {1};
  return m;
}
}  // namespace

TEST_CASE("project_unimodal: exact plane hit is one-hot in both modes") {
  auto planes = HypothesisPlanes::uniform(5, 1.0, 5.0);
  for (auto mode : {ProjectionMode::OneHot, ProjectionMode::TwoBin}) {
    auto v = project_unimodal(single_pixel_depth(3.0), planes, mode);
    CHECK(v.values.at({0, 2, 0, 0}) == 1.0);
    double sum = 0;
    for (double x : v.values.data()) sum += x;
    CHECK(sum == 1.0);
  }
}

TEST_CASE("project_unimodal: two-bin interpolation oracle") {
  auto planes = HypothesisPlanes(std::vector<double>{1.0, 2.0, 3.0});
  {
    auto v = project_unimodal(single_pixel_depth(1.5), planes, ProjectionMode::TwoBin);
    CHECK(v.values.at({0, 0, 0, 0}) == doctest::Approx(0.5));
    CHECK(v.values.at({0, 1, 0, 0}) == doctest::Approx(0.5));
  }
  {
    // weight at lower plane = (d_{m+1} - d) / (d_{m+1} - d_m) = 0.7
    auto v = project_unimodal(single_pixel_depth(2.3), planes, ProjectionMode::TwoBin);
    CHECK(v.values.at({0, 1, 0, 0}) == doctest::Approx(0.7));
    CHECK(v.values.at({0, 2, 0, 0}) == doctest::Approx(0.3));
  }
}

TEST_CASE("project_unimodal: invalid pixels get uniform, out-of-range errors name the pixel") {
  auto planes = HypothesisPlanes::uniform(4, 1.0, 4.0);
  DepthMapT<double> gt;
  gt.depths = Tensord::from({1, 2}, {2.0, 99.0});
  gt.mask = {1, 0};
  auto v = project_unimodal(gt, planes, ProjectionMode::OneHot);
  for (int64_t d = 0; d < 4; ++d) CHECK(v.values.at({0, d, 0, 1}) == doctest::Approx(0.25));
  check_prob_volume(v);

  gt.mask = {1, 1};
  try {
    project_unimodal(gt, planes, ProjectionMode::OneHot);
    FAIL("expected throw");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("h=0") != std::string::npos);
    CHECK(msg.find("w=1") != std::string::npos);
  }
}

TEST_CASE("wta oracle cases") {
  auto planes6 = HypothesisPlanes::uniform(6, 0.0, 5.0);
  std::vector<double> onehot(6, 0.0);
  onehot[5] = 1.0;
  auto r = wta(pixel_volume(onehot), planes6);
  CHECK(r.depth.depths.item() == doctest::Approx(planes6[5]));
  CHECK(r.confidence.values.item() == doctest::Approx(1.0));

  auto planes4 = HypothesisPlanes::uniform(4, 0.0, 3.0);
  auto u = wta(pixel_volume(std::vector<double>(4, 0.25)), planes4);
  CHECK(u.depth.depths.item() == doctest::Approx(planes4[0]));  // tie-break lowest
  CHECK(u.confidence.values.item() == doctest::Approx(0.25));

  auto planes3 = HypothesisPlanes(std::vector<double>{1.0, 2.0, 3.0});
  auto w = wta(pixel_volume(std::vector<double>{0.1, 0.6, 0.3}), planes3);
  CHECK(w.depth.depths.item() == doctest::Approx(2.0));
  CHECK(w.confidence.values.item() == doctest::Approx(0.6));
}

TEST_CASE("online_filter oracle cases") {
  auto planes = HypothesisPlanes(std::vector<double>{1.0, 2.0, 3.0});
  {
    auto in = pixel_volume(std::vector<double>{0.0, 1.0, 0.0});
    auto out = online_filter(in, planes);
    CHECK(out.values.data() == in.values.data());  // already unimodal
  }
  {
    auto out = online_filter(pixel_volume(std::vector<double>{0.45, 0.1, 0.45}), planes);
    CHECK(out.values.at({0, 0, 0, 0}) == 1.0);  // tie-break lowest
  }
  {
    auto out = online_filter(pixel_volume(std::vector<double>{0.1, 0.6, 0.3}), planes);
    CHECK(out.values.at({0, 1, 0, 0}) == 1.0);
  }
}

TEST_CASE("online_filter: idempotence and argmax preservation on random volumes") {
  auto planes = HypothesisPlanes::uniform(7, 2.0, 8.0);
  Rng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    auto v = random_prob_volume<double>(7, 3, 4, rng);
    if (trial % 5 == 0) {
      // manufacture exact ties at a few pixels
      for (int64_t px = 0; px < 12; px += 3)
        for (int64_t d = 0; d < 7; ++d) v.values.data()[d * 12 + px] = 1.0 / 7.0;
    }
    auto f1 = online_filter(v, planes);
    auto f2 = online_filter(f1, planes);
    CHECK(f1.values.data() == f2.values.data());  // exact idempotence
    auto a0 = argmax_axis(v.values, 1);
    auto a1 = argmax_axis(f1.values, 1);
    CHECK(a0 == a1);
    check_prob_volume(f1);
  }
}

TEST_CASE("project/wta round trip quantizes to the nearest plane") {
  auto planes = HypothesisPlanes::uniform(9, 1.0, 9.0);
  Rng rng(5);
  DepthMapT<double> gt;
  std::vector<double> d(16);
  for (auto& x : d) x = rng.uniform(1.0, 9.0);
  gt.depths = Tensord::from({4, 4}, std::move(d));
  gt.mask.assign(16, 1);
  auto v = project_unimodal(gt, planes, ProjectionMode::OneHot);
  auto r = wta(v, planes);
  for (int64_t px = 0; px < 16; ++px) {
    double want = planes[planes.nearest_index(gt.depths.data()[px])];
    CHECK(r.depth.depths.data()[px] == want);
  }
}

TEST_CASE("confidence_map oracles") {
  auto z = confidence_map(Tensord::zeros({2, 3, 2, 2}));
  for (double v : z.values.data()) CHECK(v == 0.0);

  auto planes = HypothesisPlanes::uniform(4, 1.0, 4.0);
  Rng rng(9);
  DepthMapT<double> gt;
  gt.depths = Tensord::from({2, 2}, {1.0, 2.0, 3.0, 4.0});
  gt.mask.assign(4, 1);
  auto onehot = project_unimodal(gt, planes, ProjectionMode::OneHot);
  auto ones = confidence_map(onehot.values);
  for (double v : ones.values.data()) CHECK(v == 1.0);

  std::vector<double> vol(2 * 3 * 1 * 1, 0.0);
  vol[0] = 0.7;  // channel 0 max
  vol[3 + 1] = 0.4;  // channel 1 max
  auto m = confidence_map(Tensord::from({2, 3, 1, 1}, std::move(vol)));
  CHECK(m.values.at({0, 0, 0}) == doctest::Approx(0.7));
  CHECK(m.values.at({1, 0, 0}) == doctest::Approx(0.4));

  auto r = confidence_map(Tensord::uniform({3, 5, 4, 4}, rng, 0.0, 1.0));
  for (double v : r.values.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("soft_argmin_depth oracles") {
  auto planes = HypothesisPlanes(std::vector<double>{1.0, 2.0, 3.0});
  CHECK(soft_argmin_depth(pixel_volume(std::vector<double>{0.0, 0.0, 1.0}), planes)
            .depths.item() == doctest::Approx(3.0));
  CHECK(soft_argmin_depth(pixel_volume(std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3}), planes)
            .depths.item() == doctest::Approx(2.0));
  CHECK(soft_argmin_depth(pixel_volume(std::vector<double>{0.25, 0.5, 0.25}), planes)
            .depths.item() == doctest::Approx(2.0));
}

TEST_CASE("soft_argmin of a two-bin projection recovers the depth") {
  auto planes = HypothesisPlanes::uniform(12, 2.0, 10.0);
  Rng rng(13);
  DepthMapT<double> gt;
  std::vector<double> d(25);
  for (auto& x : d) x = rng.uniform(2.0, 10.0);
  gt.depths = Tensord::from({5, 5}, std::move(d));
  gt.mask.assign(25, 1);
  auto v = project_unimodal(gt, planes, ProjectionMode::TwoBin);
  auto back = soft_argmin_depth(v, planes);
  for (int64_t px = 0; px < 25; ++px)
    CHECK(back.depths.data()[px] == doctest::Approx(gt.depths.data()[px]).epsilon(1e-6));
}

TEST_CASE("unity_regress_depth oracles") {
  auto planes = HypothesisPlanes(std::vector<double>{1.0, 2.0, 3.0});
  {
    std::vector<double> u{0.1, 1.0, 0.2};
    auto d = unity_regress_depth(Tensord::from({1, 3, 1, 1}, std::move(u)), planes);
    CHECK(d.depths.item() == doctest::Approx(2.0));  // unity exactly 1 -> zero offset
  }
  {
    auto d = unity_regress_depth(Tensord::full({1, 3, 1, 1}, 0.4), planes);
    CHECK(d.depths.item() >= planes[0]);
    CHECK(d.depths.item() <= planes[1]);  // tie-break to index 0, offset toward +1
  }
  {
    // argmax at index 1 with u = 0.5, neighbors tie -> +1: depth = 2 + 0.5 * (3-2)
    std::vector<double> u{0.0, 0.5, 0.0};
    auto d = unity_regress_depth(Tensord::from({1, 3, 1, 1}, std::move(u)), planes);
    CHECK(d.depths.item() == doctest::Approx(2.5));
  }
}

TEST_CASE("occupancy_head oracles") {
  {
    auto p = occupancy_head(Tensord::zeros({3, 2, 2, 2}), 1, 3, Tensord(), Tensord());
    for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
    CHECK(p.shape() == Shape{3, 2, 2, 2});
  }
  {
    auto p = occupancy_head(Tensord::zeros({3, 2, 2, 2}), 2, 3, Tensord(), Tensord());
    CHECK(p.shape() == Shape{3, 4, 4, 4});
  }
  {
    std::vector<double> logits(3 * 1 * 1 * 1, 0.0);
    logits[1] = 10.0;
    auto p = occupancy_head(Tensord::from({3, 1, 1, 1}, std::move(logits)), 1, 3, Tensord(),
                            Tensord());
    CHECK(p.at({1, 0, 0, 0}) > 0.9999);
  }
  CHECK_THROWS_AS(occupancy_head(Tensord::zeros({3, 2, 2, 2}), 0, 3, Tensord(), Tensord()),
                  Error);
  {
    Rng rng(3);
    auto w = Tensord::randn({4, 2, 1, 1, 1}, rng);
    auto p = occupancy_head(Tensord::randn({2, 2, 4, 4}, rng), 2, 4, w, Tensord());
    // per-voxel class probabilities sum to 1
    const int64_t vox = 4 * 8 * 8;
    for (int64_t i = 0; i < vox; ++i) {
      double s = 0;
      for (int64_t c = 0; c < 4; ++c) s += p.data()[c * vox + i];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_SUITE_END();
