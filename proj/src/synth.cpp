#include "vpd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace vpd {

void SceneConfig::validate() const {
  require(height >= 8 && width >= 8 && height % 4 == 0 && width % 4 == 0,
          "SceneConfig: H and W must be multiples of 4 (context pyramid)");
  require(num_planes >= 2, "SceneConfig: need at least 2 hypothesis planes");
  require(d_max > d_min && d_min > 0.0, "SceneConfig: depth range must be positive");
  require(invalid_fraction >= 0.0 && invalid_fraction <= 0.05,
          "SceneConfig: invalid fraction outside [0, 0.05]");
  require(corruption.flatten_prob >= 0.0 && corruption.flatten_prob <= 1.0,
          "SceneConfig: flatten probability outside [0, 1]");
  require(corruption.cost_noise_sigma >= 0.0, "SceneConfig: negative noise sigma");
  require(num_tilted + num_spheres + num_boxes >= 0, "SceneConfig: bad primitive counts");
}

HypothesisPlanes planes_for(const SceneConfig& cfg) {
  return HypothesisPlanes::uniform(cfg.num_planes, cfg.d_min, cfg.d_max);
}

namespace {

struct Primitive {
  int32_t sem_class;
  double albedo;
  double id_hash;
  // returns depth at normalized coords, or +inf when not covering
  virtual double depth_at(double x, double y) const = 0;
  virtual ~Primitive() = default;
};

struct GroundPlane final : Primitive {
  double z0, ax, ay;
  double depth_at(double x, double y) const override { return z0 + ax * x + ay * y; }
};

struct TiltedPatch final : Primitive {
  double x0, x1, y0, y1, zc, bx, by;
  double depth_at(double x, double y) const override {
    if (x < x0 || x > x1 || y < y0 || y > y1) return 1e30;
    return zc + bx * (x - 0.5 * (x0 + x1)) + by * (y - 0.5 * (y0 + y1));
  }
};

struct Sphere final : Primitive {
  double cx, cy, r, zc, bulge;
  double depth_at(double x, double y) const override {
    double rho2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
    if (rho2 >= r * r) return 1e30;
    return zc - bulge * std::sqrt(1.0 - rho2 / (r * r));
  }
};

struct BoxFace final : Primitive {
  double x0, x1, y0, y1, zc;
  double depth_at(double x, double y) const override {
    if (x < x0 || x > x1 || y < y0 || y > y1) return 1e30;
    return zc;
  }
};

double hash01(uint64_t seed, uint64_t k) {
  return static_cast<double>(Rng::derive(seed, k) >> 11) * 0x1.0p-53;
}

}  // namespace

CostVolumeT<float> corrupt_volume(const CostVolumeT<float>& cost, const CorruptionSpec& spec,
                                  uint64_t seed, std::vector<uint8_t>* touched) {
  require(cost.values.rank() == 4 && cost.values.dim(0) == 1,
          "corrupt_volume: cost must be [1,D,H,W]");
  const int64_t D = cost.values.dim(1), H = cost.values.dim(2), W = cost.values.dim(3);
  auto out = cost.values.detach();
  if (touched) touched->assign(static_cast<size_t>(H * W), 0);
  if (spec.empty()) return {out};

  Rng rng(Rng::derive(seed, 0xC0));
  auto flatten_pixel = [&](int64_t px) {
    for (int64_t d = 0; d < D; ++d) out.data()[d * H * W + px] = 0.0f;
    if (touched) (*touched)[static_cast<size_t>(px)] = 1;
  };

  for (int b = 0; b < spec.occlusion_blocks; ++b) {
    int64_t bh = rng.uniform_int(spec.block_min, spec.block_max);
    int64_t bw = rng.uniform_int(spec.block_min, spec.block_max);
    bh = std::min(bh, H);
    bw = std::min(bw, W);
    int64_t top = rng.uniform_int(0, H - bh);
    int64_t left = rng.uniform_int(0, W - bw);
    for (int64_t y = top; y < top + bh; ++y)
      for (int64_t x = left; x < left + bw; ++x) flatten_pixel(y * W + x);
  }
  if (spec.flatten_prob > 0.0) {
    for (int64_t px = 0; px < H * W; ++px)
      if (rng.uniform() < spec.flatten_prob) flatten_pixel(px);
  }
  if (spec.cost_noise_sigma > 0.0) {
    for (auto& v : out.data()) v += static_cast<float>(rng.normal() * spec.cost_noise_sigma);
  }
  return {out};
}

SceneSample generate_scene(const SceneConfig& cfg, uint64_t seed) {
  cfg.validate();
  require(cfg.num_tilted + cfg.num_spheres + cfg.num_boxes >= 0, "generate_scene: bad config");
  const int64_t H = cfg.height, W = cfg.width, D = cfg.num_planes;
  const double R = cfg.d_max - cfg.d_min;
  Rng rng(Rng::derive(seed, 0x5C));

  std::vector<std::unique_ptr<Primitive>> prims;
  {
    auto g = std::make_unique<GroundPlane>();
    g->z0 = cfg.d_min + R * rng.uniform(0.60, 0.82);
    g->ax = R * rng.uniform(-0.08, 0.08);
    g->ay = R * rng.uniform(-0.08, 0.08);
    g->sem_class = kSemGround;
    prims.push_back(std::move(g));
  }
  for (int64_t i = 0; i < cfg.num_tilted; ++i) {
    auto p = std::make_unique<TiltedPatch>();
    double cx = rng.uniform(-0.5, 0.5), cy = rng.uniform(-0.5, 0.5);
    double hx = rng.uniform(0.15, 0.4), hy = rng.uniform(0.15, 0.4);
    p->x0 = cx - hx; p->x1 = cx + hx; p->y0 = cy - hy; p->y1 = cy + hy;
    p->zc = cfg.d_min + R * rng.uniform(0.30, 0.55);
    p->bx = R * rng.uniform(-0.10, 0.10);
    p->by = R * rng.uniform(-0.10, 0.10);
    p->sem_class = kSemPlane;
    prims.push_back(std::move(p));
  }
  for (int64_t i = 0; i < cfg.num_spheres; ++i) {
    auto s = std::make_unique<Sphere>();
    s->cx = rng.uniform(-0.6, 0.6);
    s->cy = rng.uniform(-0.6, 0.6);
    s->r = rng.uniform(0.15, 0.35);
    s->bulge = R * rng.uniform(0.06, 0.15);
    s->zc = cfg.d_min + s->bulge + R * rng.uniform(0.10, 0.45);
    s->sem_class = kSemSphere;
    prims.push_back(std::move(s));
  }
  for (int64_t i = 0; i < cfg.num_boxes; ++i) {
    auto b = std::make_unique<BoxFace>();
    double cx = rng.uniform(-0.6, 0.6), cy = rng.uniform(-0.6, 0.6);
    double hx = rng.uniform(0.08, 0.25), hy = rng.uniform(0.08, 0.25);
    b->x0 = cx - hx; b->x1 = cx + hx; b->y0 = cy - hy; b->y1 = cy + hy;
    b->zc = cfg.d_min + R * rng.uniform(0.15, 0.60);
    b->sem_class = kSemBox;
    prims.push_back(std::move(b));
  }
  for (size_t i = 0; i < prims.size(); ++i) {
    prims[i]->albedo = 0.1 + 0.9 * hash01(seed, 0xA1B0 + i);
    prims[i]->id_hash = hash01(seed, 0x1D00 + i);
  }

  // z-buffer render
  std::vector<float> depth(static_cast<size_t>(H * W));
  std::vector<int32_t> prim_id(static_cast<size_t>(H * W), 0);
  const double margin = 0.01 * R;
  for (int64_t py = 0; py < H; ++py) {
    double y = -1.0 + 2.0 * (static_cast<double>(py) + 0.5) / static_cast<double>(H);
    for (int64_t px = 0; px < W; ++px) {
      double x = -1.0 + 2.0 * (static_cast<double>(px) + 0.5) / static_cast<double>(W);
      double best = 1e30;
      int32_t id = 0;
      for (size_t i = 0; i < prims.size(); ++i) {
        double z = prims[i]->depth_at(x, y);
        if (z < best) {
          best = z;
          id = static_cast<int32_t>(i);
        }
      }
      best = std::clamp(best, cfg.d_min + margin, cfg.d_max - margin);
      depth[py * W + px] = static_cast<float>(best);
      prim_id[py * W + px] = id;
    }
  }

  SceneSample s;
  s.seed = seed;
  s.gt_depth.depths = Tensorf::from({H, W}, std::move(depth));
  s.gt_depth.mask.assign(static_cast<size_t>(H * W), 1);
  {
    int64_t invalid = static_cast<int64_t>(cfg.invalid_fraction * static_cast<double>(H * W));
    for (int64_t i = 0; i < invalid; ++i)
      s.gt_depth.mask[static_cast<size_t>(rng.uniform_int(0, H * W - 1))] = 0;
  }

  // analytic context features: gradient magnitude, albedo, normal-z, id hash
  {
    const auto& dv = s.gt_depth.depths.data();
    std::vector<float> ctx(static_cast<size_t>(SceneConfig::kContextChannels * H * W));
    for (int64_t py = 0; py < H; ++py)
      for (int64_t px = 0; px < W; ++px) {
        int64_t i = py * W + px;
        double dx = (dv[py * W + std::min(px + 1, W - 1)] -
                     dv[py * W + std::max<int64_t>(px - 1, 0)]) * 0.5;
        double dy = (dv[std::min(py + 1, H - 1) * W + px] -
                     dv[std::max<int64_t>(py - 1, 0) * W + px]) * 0.5;
        double g = std::sqrt(dx * dx + dy * dy);
        const auto& p = *prims[static_cast<size_t>(prim_id[i])];
        ctx[0 * H * W + i] = static_cast<float>(g / (g + 1.0));
        ctx[1 * H * W + i] = static_cast<float>(p.albedo);
        ctx[2 * H * W + i] = static_cast<float>(1.0 / std::sqrt(1.0 + dx * dx + dy * dy));
        ctx[3 * H * W + i] = static_cast<float>(p.id_hash);
      }
    auto full = Tensorf::from({SceneConfig::kContextChannels, H, W}, std::move(ctx));
    s.contexts.push_back({full, 0});
    for (int l = 1; l < 3; ++l) {  // 2x average pooling pyramid
      const auto& prev = s.contexts.back().values;
      int64_t ph = prev.dim(1), pw = prev.dim(2);
      std::vector<float> pooled(static_cast<size_t>(SceneConfig::kContextChannels * (ph / 2) *
                                                    (pw / 2)));
      for (int64_t c = 0; c < SceneConfig::kContextChannels; ++c)
        for (int64_t y = 0; y < ph / 2; ++y)
          for (int64_t x = 0; x < pw / 2; ++x) {
            const float* src = prev.data().data() + c * ph * pw;
            float acc = src[(2 * y) * pw + 2 * x] + src[(2 * y) * pw + 2 * x + 1] +
                        src[(2 * y + 1) * pw + 2 * x] + src[(2 * y + 1) * pw + 2 * x + 1];
            pooled[(c * (ph / 2) + y) * (pw / 2) + x] = acc * 0.25f;
          }
      s.contexts.push_back(
          {Tensorf::from({SceneConfig::kContextChannels, ph / 2, pw / 2}, std::move(pooled)), l});
    }
  }

  // negative distance-to-plane costs in units of one bin width, then corrupted
  auto planes = planes_for(cfg);
  const double bin = (cfg.d_max - cfg.d_min) / static_cast<double>(cfg.num_planes - 1);
  {
    std::vector<float> cost(static_cast<size_t>(D * H * W));
    const auto& dv = s.gt_depth.depths.data();
    for (int64_t d = 0; d < D; ++d)
      for (int64_t i = 0; i < H * W; ++i)
        cost[d * H * W + i] =
            static_cast<float>(-std::abs(planes[d] - static_cast<double>(dv[i])) / bin);
    CostVolumeT<float> clean{Tensorf::from({1, D, H, W}, std::move(cost))};
    std::vector<uint8_t> touched;
    s.coarse_cost = corrupt_volume(clean, cfg.corruption, Rng::derive(seed, 0xBAD), &touched);

    // generator contract: argmax still agrees with the gt quantization on at
    // least half of the untouched pixels
    auto arg = argmax_axis(s.coarse_cost.values, 1);
    int64_t agree = 0, untouched = 0;
    for (int64_t i = 0; i < H * W; ++i) {
      if (touched[static_cast<size_t>(i)]) continue;
      untouched++;
      if (arg[static_cast<size_t>(i)] ==
          planes.nearest_index(static_cast<double>(dv[i])))
        agree++;
    }
    require(untouched == 0 || 2 * agree >= untouched,
            "generate_scene: corrupted volume violates the argmax-agreement contract");
  }

  if (cfg.semantic) {
    s.semantic_grid.assign(static_cast<size_t>(D * H * W), kSemFree);
    const auto& dv = s.gt_depth.depths.data();
    for (int64_t i = 0; i < H * W; ++i) {
      double gtd = static_cast<double>(dv[i]);
      for (int64_t d = 0; d < D; ++d) {
        double pd = planes[d];
        int32_t label;
        if (std::abs(pd - gtd) <= 0.5 * bin)
          label = prims[static_cast<size_t>(prim_id[i])]->sem_class;
        else if (pd < gtd)
          label = kSemFree;
        else
          label = kSemIgnore;  // behind the visible surface
        s.semantic_grid[static_cast<size_t>(d * H * W + i)] = label;
      }
    }
  }
  return s;
}

}  // namespace vpd
