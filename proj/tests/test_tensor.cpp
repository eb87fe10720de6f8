#include <cmath>

#include "doctest.h"
#include "vpd/tensor.hpp"

using namespace vpd;

namespace {

// Piecewise smooth-L1 built from tensor ops; the branch mask is taken from
// forward values, matching the loss module's construction.
template <class S>
Tensor<S> smooth_l1_mean(const Tensor<S>& diff, double beta) {
  auto a = vpd::abs(diff);
  std::vector<S> m(a.data().size());
  for (size_t i = 0; i < m.size(); ++i) m[i] = a.data()[i] < static_cast<S>(beta) ? S(1) : S(0);
  auto mask = Tensor<S>::from(a.shape(), std::move(m));
  auto inv = add_scalar(neg(mask), S(1));
  auto quad = mul_scalar(square(diff), static_cast<S>(0.5 / beta));
  auto lin = add_scalar(a, static_cast<S>(-0.5 * beta));
  return mean_all(mask * quad + inv * lin);
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("softmax symmetry and row sums") {
  auto t = Tensord::from({2}, {0.0, 0.0});
  auto y = softmax_axis(t, 0);
  CHECK(y.data()[0] == doctest::Approx(0.5));
  CHECK(y.data()[1] == doctest::Approx(0.5));

  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = Tensord::randn({4, 9}, rng);
    auto s = softmax_axis(x, 1);
    for (int64_t r = 0; r < 4; ++r) {
      double sum = 0;
      for (int64_t c = 0; c < 9; ++c) {
        double v = s.at({r, c});
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        sum += v;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("sigmoid identity case") {
  auto y = sigmoid(Tensord::scalar(0.0));
  CHECK(y.item() == doctest::Approx(0.5));
}

TEST_CASE("conv3d all-ones 3x3x3 sums to 27") {
  auto in = Tensord::ones({1, 3, 3, 3});
  auto w = Tensord::ones({1, 1, 3, 3, 3});
  auto out = conv3d(in, w, Tensord(), 1, 0);
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  // direct summation oracle
  double expect = 0;
  for (int i = 0; i < 27; ++i) expect += 1.0;
  CHECK(out.item() == doctest::Approx(expect));
}

TEST_CASE("conv3d stride 2 halves extents (ceil)") {
  for (int64_t d : {4, 5, 8}) {
    auto in = Tensord::ones({2, d, d, d});
    Rng rng(static_cast<uint64_t>(d));
    auto w = Tensord::randn({3, 2, 3, 3, 3}, rng);
    auto out = conv3d(in, w, Tensord(), 2, 1);
    int64_t want = (d + 1) / 2;
    CHECK(out.shape() == Shape{3, want, want, want});
  }
}

TEST_CASE("shape mismatch errors name both shapes") {
  auto a = Tensord::ones({2, 3});
  auto b = Tensord::ones({4, 5});
  try {
    auto c = a + b;
    FAIL("expected throw");
  } catch (const Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
}

TEST_CASE("broadcasting matches explicit expansion") {
  Rng rng(11);
  auto a = Tensord::randn({3, 1, 4}, rng);
  auto b = Tensord::randn({2, 4}, rng);
  auto c = a * b;
  CHECK(c.shape() == Shape{3, 2, 4});
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 2; ++j)
      for (int64_t k = 0; k < 4; ++k)
        CHECK(c.at({i, j, k}) == doctest::Approx(a.at({i, 0, k}) * b.at({j, k})));
}

TEST_CASE("gradient of a tensor w.r.t. itself is all-ones") {
  Rng rng(3);
  auto x = Tensord::randn({3, 2}, rng).set_requires_grad(true);
  x.backward();
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("diamond graph accumulates each path once") {
  auto x = Tensord::scalar(3.0).set_requires_grad(true);
  auto a = mul_scalar(x, 2.0);
  auto b = mul_scalar(x, 5.0);
  auto y = sum_all(a + b);
  y.backward();
  CHECK(x.grad()[0] == doctest::Approx(7.0));  // a double visit would give 14
}

TEST_CASE("grad_check: sum of squares") {
  auto x = Tensord::from({2}, {1.0, 2.0});
  std::function<Tensord(const Tensord&)> f = [](const Tensord& t) { return sum_all(square(t)); };

  auto xr = x.detach().set_requires_grad(true);
  auto y = f(xr);
  y.backward();
  CHECK(xr.grad()[0] == doctest::Approx(2.0));
  CHECK(xr.grad()[1] == doctest::Approx(4.0));

  CHECK(grad_check(f, x, 1e-5) < 1e-7);
}

TEST_CASE("grad_check: linear function is exact to rounding") {
  auto x = Tensord::from({4}, {0.3, -1.2, 2.0, 0.0});
  std::function<Tensord(const Tensord&)> f = [](const Tensord& t) { return sum_all(t); };
  CHECK(grad_check(f, x, 1e-5) < 1e-10);
}

TEST_CASE("grad_check rejects non-scalar output") {
  std::function<Tensord(const Tensord&)> f = [](const Tensord& t) { return t; };
  CHECK_THROWS_AS(grad_check(f, Tensord::ones({2}), 1e-5), Error);
}

TEST_CASE("grad_check: smooth-L1 on a random 8x8 depth pair") {
  Rng rng(21);
  auto pred = Tensord::randn({8, 8}, rng);
  auto gt = Tensord::randn({8, 8}, rng);
  std::function<Tensord(const Tensord&)> f = [&](const Tensord& p) {
    return smooth_l1_mean(p - gt, 1.0);
  };
  CHECK(grad_check(f, pred, 1e-5) < 1e-4);
}

TEST_CASE("grad sweep over differentiable ops, 10 seeds") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed + 100);
    {
      auto a = Tensord::randn({3, 4}, rng);
      auto b = Tensord::randn({3, 4}, rng);
      std::function<Tensord(const Tensord&)> f = [&](const Tensord& x) {
        auto u = x * b + x / add_scalar(square(b), 1.0);
        return sum_all(sigmoid(u) + silu(u));
      };
      CHECK(grad_check(f, a, 1e-6) < 1e-4);
    }
    {
      auto a = Tensord::uniform({6}, rng, 0.5, 2.0);
      std::function<Tensord(const Tensord&)> f = [](const Tensord& x) {
        return sum_all(vpd::log(x) + vpd::sqrt(x) + vpd::exp(mul_scalar(x, 0.3)) +
                       pow_scalar(x, 1.7));
      };
      CHECK(grad_check(f, a, 1e-6) < 1e-4);
    }
    {
      auto a = Tensord::randn({4, 3}, rng);
      auto b = Tensord::randn({3, 5}, rng);
      std::function<Tensord(const Tensord&)> f = [&](const Tensord& x) {
        return sum_all(square(matmul(x, b)));
      };
      CHECK(grad_check(f, a, 1e-6) < 1e-4);
      std::function<Tensord(const Tensord&)> g = [&](const Tensord& x) {
        return sum_all(square(matmul(a, x)));
      };
      CHECK(grad_check(g, b, 1e-6) < 1e-4);
    }
    {
      auto in = Tensord::randn({2, 4, 4, 4}, rng);
      auto w = Tensord::randn({3, 2, 3, 3, 3}, rng);
      auto bias = Tensord::randn({3}, rng);
      std::function<Tensord(const Tensord&)> f = [&](const Tensord& x) {
        return sum_all(square(conv3d(x, w, bias, 2, 1)));
      };
      CHECK(grad_check(f, in, 1e-6) < 1e-4);
      std::function<Tensord(const Tensord&)> g = [&](const Tensord& x) {
        return sum_all(square(conv3d(in, x, bias, 1, 1)));
      };
      CHECK(grad_check(g, w, 1e-6) < 1e-4);
    }
    {
      auto in = Tensord::randn({2, 5, 5}, rng);
      auto w = Tensord::randn({4, 2, 3, 3}, rng);
      std::function<Tensord(const Tensord&)> f = [&](const Tensord& x) {
        return sum_all(square(conv2d(x, w, Tensord(), 1)));
      };
      CHECK(grad_check(f, in, 1e-6) < 1e-4);
    }
    {
      auto a = Tensord::randn({2, 3, 4}, rng);
      std::function<Tensord(const Tensord&)> f = [](const Tensord& x) {
        auto s = softmax_axis(x, 1);
        auto m = max_axis(x, 2, true);
        auto r = reshape(mean_axis(x, 0, false), Shape{12});
        return sum_all(square(s)) + sum_all(m) + sum_all(square(r));
      };
      CHECK(grad_check(f, a, 1e-6) < 1e-4);
    }
    {
      auto a = Tensord::randn({2, 2, 2, 2}, rng);
      std::function<Tensord(const Tensord&)> f = [](const Tensord& x) {
        return sum_all(square(upsample_trilinear(x, 2)));
      };
      CHECK(grad_check(f, a, 1e-6) < 1e-4);
    }
    {
      auto a = Tensord::randn({2, 6}, rng);
      auto b = Tensord::randn({3, 6}, rng);
      std::function<Tensord(const Tensord&)> f = [&](const Tensord& x) {
        auto c = concat<double>({x, b}, 0);
        return sum_all(square(slice(c, 1, 1, 4))) + sum_all(transpose2d(c));
      };
      CHECK(grad_check(f, a, 1e-6) < 1e-4);
    }
  }
}

TEST_CASE("matmul is deterministic across repeated calls") {
  Rng rng(5);
  auto a = Tensorf::randn({17, 33}, rng);
  auto b = Tensorf::randn({33, 29}, rng);
  auto c1 = matmul(a, b);
  auto c2 = matmul(a, b);
  CHECK(std::memcmp(c1.data().data(), c2.data().data(), sizeof(float) * c1.data().size()) == 0);
}

TEST_CASE("matmul matches naive triple loop") {
  Rng rng(9);
  auto a = Tensord::randn({5, 7}, rng);
  auto b = Tensord::randn({7, 4}, rng);
  auto c = matmul(a, b);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 4; ++j) {
      double acc = 0;
      for (int64_t k = 0; k < 7; ++k) acc += a.at({i, k}) * b.at({k, j});
      CHECK(c.at({i, j}) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("NoGradGuard suppresses taping") {
  auto x = Tensord::ones({3}).set_requires_grad(true);
  NoGradGuard ng;
  auto y = x * x;
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}

TEST_SUITE_END();
TEST_SUITE_BEGIN("tensor");

TEST_CASE("group_norm gradients pass finite differences") {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(50 + seed);
    auto x = Tensord::randn({4, 3, 3}, rng);
    auto gamma = Tensord::uniform({4}, rng, 0.5, 1.5);
    auto beta = Tensord::randn({4}, rng);
    std::function<Tensord(const Tensord&)> fx = [&](const Tensord& t) {
      return sum_all(square(group_norm(t, 2, gamma, beta)));
    };
    CHECK(grad_check(fx, x, 1e-6) < 1e-4);
    std::function<Tensord(const Tensord&)> fg = [&](const Tensord& t) {
      return sum_all(square(group_norm(x, 2, t, beta)));
    };
    CHECK(grad_check(fg, gamma, 1e-6) < 1e-4);
    std::function<Tensord(const Tensord&)> fb = [&](const Tensord& t) {
      return sum_all(square(group_norm(x, 2, gamma, t)));
    };
    CHECK(grad_check(fb, beta, 1e-6) < 1e-4);
  }
}

TEST_SUITE_END();
