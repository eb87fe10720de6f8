#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "vpd/cacc.hpp"

using namespace vpd;

namespace {

// Brute-force evaluation of the linear attention formula in double loops,
// independent of the tensor op path.
std::vector<double> dense_attention_oracle(const std::vector<double>& q,
                                           const std::vector<double>& k,
                                           const std::vector<double>& v, int64_t nq, int64_t nk,
                                           int64_t c) {
  std::vector<double> pq(q.size()), pk(k.size());
  for (int64_t r = 0; r < nq; ++r) {  // softmax along rows of Q
    double mx = q[r * c];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, q[r * c + j]);
    double den = 0;
    for (int64_t j = 0; j < c; ++j) den += std::exp(q[r * c + j] - mx);
    for (int64_t j = 0; j < c; ++j) pq[r * c + j] = std::exp(q[r * c + j] - mx) / den;
  }
  for (int64_t j = 0; j < c; ++j) {  // softmax along columns of K
    double mx = k[j];
    for (int64_t r = 1; r < nk; ++r) mx = std::max(mx, k[r * c + j]);
    double den = 0;
    for (int64_t r = 0; r < nk; ++r) den += std::exp(k[r * c + j] - mx);
    for (int64_t r = 0; r < nk; ++r) pk[r * c + j] = std::exp(k[r * c + j] - mx) / den;
  }
  std::vector<double> kv(static_cast<size_t>(c * c), 0.0);
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = 0; j < c; ++j)
      for (int64_t r = 0; r < nk; ++r) kv[i * c + j] += pk[r * c + i] * v[r * c + j];
  std::vector<double> out(static_cast<size_t>(nq * c), 0.0);
  for (int64_t r = 0; r < nq; ++r)
    for (int64_t j = 0; j < c; ++j)
      for (int64_t i = 0; i < c; ++i) out[r * c + j] += pq[r * c + i] * kv[i * c + j];
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("cacc");

TEST_CASE("uncertainty_query tracks the peak value") {
  auto q0 = uncertainty_query(Tensord::zeros({1, 3, 1, 1}));
  CHECK(q0.item() == doctest::Approx(0.5));

  std::vector<double> hi{0.0, 10.0, 0.0};
  CHECK(uncertainty_query(Tensord::from({1, 3, 1, 1}, std::move(hi))).item() < 1e-4);

  std::vector<double> lo{-10.0, -12.0, -11.0};
  CHECK(uncertainty_query(Tensord::from({1, 3, 1, 1}, std::move(lo))).item() > 0.9999);
}

TEST_CASE("uncertainty_query is monotone decreasing in the max value") {
  Rng rng(8);
  double prev = 1.0;
  for (double m : {-4.0, -1.0, 0.0, 0.5, 2.0, 6.0}) {
    std::vector<double> v{m - 1.0, m, m - 2.0};
    double q = uncertainty_query(Tensord::from({1, 3, 1, 1}, std::move(v))).item();
    CHECK(q < prev);
    prev = q;
  }
}

TEST_CASE("deformable_kv with zero offsets equals clamp-padded convolution bitwise") {
  Rng rng(19);
  ContextFeaturesT<float> f{Tensorf::randn({3, 6, 7}, rng), 0};
  auto kernel = DeformableKernelT<float>::init(3, 4, 3, rng);
  auto [k_map, v_map] = deformable_kv(f, kernel);
  auto ref = conv2d(f.values, kernel.weight, kernel.bias, 1, PadMode::Clamp);
  auto k_ref = slice(ref, 0, 0, 2);
  auto v_ref = slice(ref, 0, 2, 2);
  CHECK(k_map.data() == k_ref.data());
  CHECK(v_map.data() == v_ref.data());
}

TEST_CASE("deformable_kv rejects odd output channels") {
  Rng rng(1);
  ContextFeaturesT<double> f{Tensord::randn({2, 4, 4}, rng), 0};
  DeformableKernelT<double> kernel;
  kernel.k = 3;
  kernel.weight = Tensord::randn({3, 2, 3, 3}, rng);
  kernel.bias = Tensord::zeros({3});
  kernel.offset_w = Tensord::zeros({18, 2, 3, 3});
  kernel.offset_b = Tensord::zeros({18});
  CHECK_THROWS_AS(deformable_kv(f, kernel), Error);
}

TEST_CASE("deform_conv2d: constant field is offset-invariant") {
  Rng rng(23);
  auto input = Tensord::full({1, 5, 5}, 2.5);
  auto w = Tensord::randn({2, 1, 3, 3}, rng);
  auto zero_off = Tensord::zeros({18, 5, 5});
  auto rnd_off = Tensord::uniform({18, 5, 5}, rng, -1.5, 1.5);
  auto a = deform_conv2d(input, w, Tensord(), zero_off);
  auto b = deform_conv2d(input, w, Tensord(), rnd_off);
  for (size_t i = 0; i < a.data().size(); ++i)
    CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
}

TEST_CASE("deform_conv2d: +1 row offset relocates a point response") {
  // k=1 identity kernel: output(y,x) = input(y + dy, x + dx) with clamping.
  const int64_t H = 5, W = 5;
  std::vector<double> in(H * W, 0.0);
  in[2 * W + 3] = 1.0;  // spike at (2,3)
  auto input = Tensord::from({1, H, W}, std::move(in));
  auto w = Tensord::from({2, 1, 1, 1}, {1.0, 1.0});
  std::vector<double> off(2 * H * W, 0.0);
  for (int64_t p = 0; p < H * W; ++p) off[p] = 1.0;  // dy = +1, dx = 0
  auto offsets = Tensord::from({2, H, W}, std::move(off));
  auto out = deform_conv2d(input, w, Tensord(), offsets);
  // hand-evaluated oracle: sampling y+1 moves the response up one row
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      double want = (y == 1 && x == 3) ? 1.0 : 0.0;
      CHECK(out.at({0, y, x}) == doctest::Approx(want));
    }
}

TEST_CASE("deform_conv2d: fractional offset bilinearly blends neighbors") {
  const int64_t H = 4, W = 4;
  std::vector<double> in(H * W, 0.0);
  in[1 * W + 1] = 8.0;
  in[2 * W + 1] = 4.0;
  auto input = Tensord::from({1, H, W}, std::move(in));
  auto w = Tensord::from({2, 1, 1, 1}, {1.0, 0.0});
  std::vector<double> off(2 * H * W, 0.0);
  for (int64_t p = 0; p < H * W; ++p) off[p] = 0.25;  // dy = +0.25
  auto out = deform_conv2d(input, w, Tensord(), Tensord::from({2, H, W}, std::move(off)));
  // at (1,1): 0.75 * in[1,1] + 0.25 * in[2,1] = 7.0
  CHECK(out.at({0, 1, 1}) == doctest::Approx(0.75 * 8.0 + 0.25 * 4.0));
}

TEST_CASE("deform_conv2d gradients pass finite differences") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(400 + seed);
    auto input = Tensord::randn({2, 4, 4}, rng);
    auto w = Tensord::randn({2, 2, 3, 3}, rng);
    auto offsets = Tensord::uniform({18, 4, 4}, rng, -0.8, 0.8);
    std::function<Tensord(const Tensord&)> fi = [&](const Tensord& x) {
      return sum_all(square(deform_conv2d(x, w, Tensord(), offsets)));
    };
    CHECK(grad_check(fi, input, 1e-6) < 1e-4);
    std::function<Tensord(const Tensord&)> fw = [&](const Tensord& x) {
      return sum_all(square(deform_conv2d(input, x, Tensord(), offsets)));
    };
    CHECK(grad_check(fw, w, 1e-6) < 1e-4);
    std::function<Tensord(const Tensord&)> fo = [&](const Tensord& x) {
      return sum_all(square(deform_conv2d(input, w, Tensord(), x)));
    };
    CHECK(grad_check(fo, offsets, 1e-6) < 1e-4);
  }
}

TEST_CASE("linear_attention: single key collapses to its value row") {
  Rng rng(29);
  auto q = Tensord::randn({5, 3}, rng);
  auto k = Tensord::randn({1, 3}, rng);
  auto v = Tensord::randn({1, 3}, rng);
  auto out = linear_attention(q, k, v);
  for (int64_t r = 0; r < 5; ++r)
    for (int64_t j = 0; j < 3; ++j)
      CHECK(out.at({r, j}) == doctest::Approx(v.at({0, j})).epsilon(1e-10));
}

TEST_CASE("linear_attention matches the dense oracle") {
  Rng rng(37);
  {
    // constant-V case from the contract
    auto q = Tensord::randn({4, 8}, rng);
    auto k = Tensord::randn({6, 8}, rng);
    auto v = Tensord::full({6, 8}, 0.37);
    auto out = linear_attention(q, k, v);
    auto want = dense_attention_oracle(q.data(), k.data(), v.data(), 4, 6, 8);
    for (size_t i = 0; i < want.size(); ++i)
      CHECK(out.data()[i] == doctest::Approx(want[i]).epsilon(1e-5));
  }
  for (int trial = 0; trial < 50; ++trial) {
    int64_t nq = 1 + static_cast<int64_t>(rng.uniform_int(0, 15));
    int64_t nk = 1 + static_cast<int64_t>(rng.uniform_int(0, 15));
    int64_t c = 1 + static_cast<int64_t>(rng.uniform_int(0, 11));
    auto q = Tensord::randn({nq, c}, rng);
    auto k = Tensord::randn({nk, c}, rng);
    auto v = Tensord::randn({nk, c}, rng);
    auto out = linear_attention(q, k, v);
    auto want = dense_attention_oracle(q.data(), k.data(), v.data(), nq, nk, c);
    for (size_t i = 0; i < want.size(); ++i) {
      double rel = std::abs(out.data()[i] - want[i]) /
                   (std::abs(out.data()[i]) + std::abs(want[i]) + 1e-12);
      CHECK(rel < 1e-5);
    }
  }
}

TEST_CASE("linear_attention rejects mismatched inner dimensions") {
  auto q = Tensord::ones({4, 3});
  auto k = Tensord::ones({4, 5});
  CHECK_THROWS_AS(linear_attention(q, k, k), Error);
}

TEST_CASE("lift_context oracles and marginalization") {
  Rng rng(43);
  auto f = Tensord::randn({3, 2, 2}, rng);
  {
    std::vector<double> d(5 * 4, 0.0);
    for (int64_t px = 0; px < 4; ++px) d[2 * 4 + px] = 1.0;  // one-hot plane 2
    auto lifted = lift_context(f, Tensord::from({1, 5, 2, 2}, std::move(d)));
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t px = 0; px < 4; ++px)
        for (int64_t pl = 0; pl < 5; ++pl) {
          double want = pl == 2 ? f.data()[c * 4 + px] : 0.0;
          CHECK(lifted.data()[(c * 5 + pl) * 4 + px] == doctest::Approx(want));
        }
  }
  {
    auto uni = Tensord::full({1, 5, 2, 2}, 0.2);
    auto lifted = lift_context(f, uni);
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t pl = 0; pl < 5; ++pl)
        for (int64_t px = 0; px < 4; ++px)
          CHECK(lifted.data()[(c * 5 + pl) * 4 + px] ==
                doctest::Approx(f.data()[c * 4 + px] / 5.0));
  }
  {
    auto dist = vpdtest::random_prob_volume<double>(6, 2, 2, rng);
    auto lifted = lift_context(f, dist.values);
    auto marg = sum_axis(lifted, 1, false);
    for (size_t i = 0; i < f.data().size(); ++i)
      CHECK(marg.data()[i] == doctest::Approx(f.data()[i]).epsilon(1e-6));
  }
  CHECK_THROWS_AS(lift_context(Tensord::ones({3, 2, 2}), Tensord::ones({1, 5, 3, 3})), Error);
}

TEST_CASE("refine oracles") {
  Rng rng(47);
  auto v = Tensord::randn({2, 3, 4, 4}, rng);
  {
    auto out = refine(v, Tensord::ones({2, 4, 4}), Tensord::zeros({2, 3, 4, 4}));
    for (size_t i = 0; i < v.data().size(); ++i) CHECK(out.data()[i] == v.data()[i]);
  }
  {
    auto ctx = Tensord::randn({2, 3, 4, 4}, rng);
    auto out = refine(v, Tensord::zeros({2, 4, 4}), ctx);
    for (size_t i = 0; i < ctx.data().size(); ++i) CHECK(out.data()[i] == ctx.data()[i]);
  }
  {
    auto conf = Tensord::uniform({2, 4, 4}, rng, 0.0, 1.0);
    auto ctx = Tensord::randn({2, 3, 4, 4}, rng);
    auto out = refine(v, conf, ctx);
    for (int64_t c = 0; c < 2; ++c)
      for (int64_t d = 0; d < 3; ++d)
        for (int64_t px = 0; px < 16; ++px) {
          double want = v.data()[(c * 3 + d) * 16 + px] * conf.data()[c * 16 + px] +
                        ctx.data()[(c * 3 + d) * 16 + px];
          CHECK(out.data()[(c * 3 + d) * 16 + px] == doctest::Approx(want).epsilon(1e-6));
        }
  }
  CHECK_THROWS_AS(refine(v, Tensord::ones({2, 4, 4}), Tensord::ones({2, 3, 2, 2})), Error);
}

TEST_CASE("cacc_block: zero context with zero kernel reduces to pure gating") {
  Rng rng(51);
  CaccBlock<double> block(2, 3, 3, rng);
  for (auto& w : block.kernel().weight.data()) w = 0.0;
  auto v = Tensord::randn({2, 4, 3, 3}, rng);
  ContextFeaturesT<double> ctx{Tensord::zeros({3, 3, 3}), 0};
  auto out = block.forward(v, ctx);
  auto conf = sigmoid(reshape(max_axis(v, 1, true), Shape{2, 3, 3}));
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t d = 0; d < 4; ++d)
      for (int64_t px = 0; px < 9; ++px) {
        double want = v.data()[(c * 4 + d) * 9 + px] * conf.data()[c * 9 + px];
        CHECK(out.data()[(c * 4 + d) * 9 + px] == doctest::Approx(want));
      }
}

TEST_CASE("cacc_block: confident volumes pass through up to the context term") {
  Rng rng(53);
  CaccBlock<double> block(1, 3, 3, rng);
  // strongly peaked volume: conf ~ 1, uncertainty ~ 0
  std::vector<double> v(1 * 4 * 4 * 4, -10.0);
  for (int64_t px = 0; px < 16; ++px) v[(0 * 4 + (px % 4)) * 16 + px] = 10.0;
  auto vol = Tensord::from({1, 4, 4, 4}, std::move(v));
  ContextFeaturesT<double> ctx{Tensord::randn({3, 4, 4}, rng), 0};

  auto out = block.forward(vol, ctx);
  // reconstruct the lifted context bound from the block's own pieces
  auto [k_map, v_map] = deformable_kv(ctx, block.kernel());
  double vmax = 0;
  for (double x : v_map.data()) vmax = std::max(vmax, std::abs(x));
  double conf_slack = 10.0 * (1.0 - 1.0 / (1.0 + std::exp(-10.0)));
  for (size_t i = 0; i < out.data().size(); ++i)
    CHECK(std::abs(out.data()[i] - vol.data()[i]) <= vmax + conf_slack + 1e-9);
}

TEST_CASE("cacc_block is a pure function of its inputs") {
  Rng rng(57);
  CaccBlock<float> block(2, 4, 3, rng);
  auto v = Tensorf::randn({2, 4, 4, 4}, rng);
  ContextFeaturesT<float> ctx{Tensorf::randn({4, 4, 4}, rng), 0};
  auto a = block.forward(v, ctx);
  auto b = block.forward(v, ctx);
  CHECK(a.data() == b.data());
}

TEST_CASE("cacc_block full gradient check on a 1x4x4x4 volume") {
  for (uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(600 + seed);
    CaccBlock<double> block(1, 2, 3, rng);
    // nonzero offsets so the bilinear taps sit away from integer kinks
    for (auto& b : block.kernel().offset_b.data()) b = 0.3;
    auto v = Tensord::randn({1, 4, 4, 4}, rng);
    ContextFeaturesT<double> ctx{Tensord::randn({2, 4, 4}, rng), 0};
    std::function<Tensord(const Tensord&)> f = [&](const Tensord& x) {
      return sum_all(square(block.forward(x, ctx)));
    };
    CHECK(grad_check(f, v, 1e-6) < 1e-4);
  }
}

TEST_SUITE_END();
