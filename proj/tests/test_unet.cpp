#include <cmath>
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "vpd/unet.hpp"

using namespace vpd;

namespace {

UNetConfig tiny_config() {
  UNetConfig cfg;
  cfg.base_channels = 4;
  cfg.channel_mult = {1, 2, 2};
  cfg.depth = cfg.height = cfg.width = 8;
  cfg.in_channels = 2;
  cfg.time_embed_width = 8;
  cfg.groups = 2;
  cfg.context_channels = 2;
  return cfg;
}

template <class S>
std::vector<ContextFeaturesT<S>> random_contexts(const UNetConfig& cfg, Rng& rng) {
  std::vector<ContextFeaturesT<S>> ctx;
  for (int l = 0; l < 3; ++l)
    ctx.push_back({Tensor<S>::randn({cfg.context_channels, cfg.height >> l, cfg.width >> l}, rng),
                   l});
  return ctx;
}

}  // namespace

TEST_SUITE_BEGIN("unet");

TEST_CASE("time_embed: zero step gives sin 0 / cos 1") {
  auto e = time_embed<double>(0, 16);
  for (int64_t i = 0; i < 8; ++i) {
    CHECK(e.data()[i] == 0.0);
    CHECK(e.data()[8 + i] == 1.0);
  }
}

TEST_CASE("time_embed: no collisions below 10^4 at width 16") {
  std::set<std::vector<float>> seen;
  for (int64_t t = 0; t < 10000; ++t) {
    auto e = time_embed<float>(t, 16);
    CHECK(seen.insert(e.data()).second);
  }
}

TEST_CASE("time_embed is deterministic") {
  auto a = time_embed<double>(777, 32);
  auto b = time_embed<double>(777, 32);
  CHECK(a.data() == b.data());
}

TEST_CASE("group_norm normalizes each group") {
  Rng rng(2);
  auto x = Tensord::randn({4, 3, 5, 5}, rng);
  auto y = group_norm(x, 2, Tensord::ones({4}), Tensord::zeros({4}));
  const int64_t half = 2 * 3 * 25;
  for (int g = 0; g < 2; ++g) {
    double m = 0, v = 0;
    for (int64_t i = 0; i < half; ++i) m += y.data()[g * half + i];
    m /= half;
    for (int64_t i = 0; i < half; ++i) {
      double d = y.data()[g * half + i] - m;
      v += d * d;
    }
    v /= half;
    CHECK(std::abs(m) < 1e-4);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }
}

TEST_CASE("residual layer with zeroed transform is the identity") {
  Rng rng(3);
  nn::ResBlock3d<double> block(4, 4, 2, 8, rng);
  std::fill(block.conv2.w.data().begin(), block.conv2.w.data().end(), 0.0);
  std::fill(block.conv2.b.data().begin(), block.conv2.b.data().end(), 0.0);
  auto x = Tensord::randn({4, 4, 4, 4}, rng);
  auto t_emb = Tensord::randn({1, 8}, rng);
  auto y = block(x, t_emb);
  CHECK(y.data() == x.data());
}

TEST_CASE("config validation rejects non-divisible extents and bad groups") {
  auto cfg = tiny_config();
  cfg.depth = 6;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.groups = 3;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("forward: output shape matches the input volume, deterministic") {
  auto cfg = tiny_config();
  Rng rng(5);
  UNet3D<float> net(cfg, rng);
  auto ctx = random_contexts<float>(cfg, rng);
  auto y_t = Tensorf::randn({1, 8, 8, 8}, rng);
  auto prior = Tensorf::randn({1, 8, 8, 8}, rng);
  // randomize the (zero-initialized) head so the output is nontrivial
  Rng hr(6);
  for (auto& w : net.params().back().second.data()) w = static_cast<float>(hr.normal() * 0.1);
  auto a = net.forward(y_t, prior, 500, ctx);
  CHECK(a.shape() == y_t.shape());
  auto b = net.forward(y_t, prior, 500, ctx);
  CHECK(a.data() == b.data());
}

TEST_CASE("forward: fresh zero-initialized head outputs exactly zero") {
  auto cfg = tiny_config();
  Rng rng(7);
  UNet3D<float> net(cfg, rng);
  auto ctx = random_contexts<float>(cfg, rng);
  auto y_t = Tensorf::randn({1, 8, 8, 8}, rng);
  auto prior = Tensorf::randn({1, 8, 8, 8}, rng);
  auto out = net.forward(y_t, prior, 13, ctx);
  for (float v : out.data()) CHECK(v == 0.0f);
}

TEST_CASE("forward rejects missing context scales") {
  auto cfg = tiny_config();
  Rng rng(9);
  UNet3D<float> net(cfg, rng);
  auto ctx = random_contexts<float>(cfg, rng);
  ctx.pop_back();
  auto y = Tensorf::zeros({1, 8, 8, 8});
  CHECK_THROWS_AS(net.forward(y, y, 1, ctx), Error);
  // without CACC the context set is not consulted
  auto out = net.forward(y, y, 1, {}, /*use_cacc=*/false);
  CHECK(out.shape() == y.shape());
}

TEST_CASE("parameter count is deterministic for a fixed config") {
  auto cfg = tiny_config();
  Rng r1(11), r2(999);
  UNet3D<float> a(cfg, r1), b(cfg, r2);
  CHECK(a.param_count() == b.param_count());
  CHECK(a.param_count() > 0);
}

TEST_CASE("gradient check through a 1x8x8x8 forward pass") {
  for (uint64_t seed = 0; seed < 2; ++seed) {
    auto cfg = tiny_config();
    Rng rng(800 + seed);
    UNet3D<double> net(cfg, rng);
    Rng hr(900 + seed);
    for (auto& w : net.params().back().second.data()) w = hr.normal() * 0.05;
    auto ctx = random_contexts<double>(cfg, rng);
    auto prior = Tensord::randn({1, 8, 8, 8}, rng);
    auto y_t = Tensord::randn({1, 8, 8, 8}, rng);
    std::function<Tensord(const Tensord&)> f = [&](const Tensord& x) {
      return mean_all(square(sigmoid(net.forward(x, prior, 321, ctx))));
    };
    CHECK(grad_check(f, y_t, 1e-6) < 1e-4);
  }
}

TEST_SUITE_END();
