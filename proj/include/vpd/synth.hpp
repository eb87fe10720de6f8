#pragma once

#include <cstdint>
#include <vector>

#include "vpd/cacc.hpp"
#include "vpd/volume.hpp"

namespace vpd {

// Degradations applied to the coarse cost volume: rectangular cost
// flattening (occlusion analogue), per-pixel flattening, additive Gaussian
// cost noise.
struct CorruptionSpec {
  int occlusion_blocks = 2;
  int64_t block_min = 5;
  int64_t block_max = 10;
  double flatten_prob = 0.03;
  double cost_noise_sigma = 0.25;

  bool empty() const {
    return occlusion_blocks == 0 && flatten_prob == 0.0 && cost_noise_sigma == 0.0;
  }
};

struct SceneConfig {
  int64_t height = 32;
  int64_t width = 32;
  int64_t num_planes = 16;
  double d_min = 2.0;
  double d_max = 10.0;
  int64_t num_tilted = 1;
  int64_t num_spheres = 2;
  int64_t num_boxes = 2;
  double invalid_fraction = 0.02;
  CorruptionSpec corruption;
  bool semantic = false;

  static constexpr int64_t kContextChannels = 4;

  void validate() const;
};

// Semantic classes for SSC mode.
enum SemClass : int32_t { kSemFree = 0, kSemGround = 1, kSemPlane = 2, kSemSphere = 3, kSemBox = 4 };
constexpr int kNumSemClasses = 5;
constexpr int32_t kSemIgnore = -1;  // occluded voxels behind the surface

struct SceneSample {
  uint64_t seed = 0;
  DepthMapT<float> gt_depth;
  CostVolumeT<float> coarse_cost;                 // after corruption
  std::vector<ContextFeaturesT<float>> contexts;  // scales 0, 1, 2
  std::vector<int32_t> semantic_grid;             // [D,H,W] labels; empty unless semantic
};

HypothesisPlanes planes_for(const SceneConfig& cfg);

// Flattening + noise, deterministic per seed. `touched`, when given, marks
// pixels hit by block or per-pixel flattening.
CostVolumeT<float> corrupt_volume(const CostVolumeT<float>& cost, const CorruptionSpec& spec,
                                  uint64_t seed, std::vector<uint8_t>* touched = nullptr);

// Z-buffered random primitives over a slanted ground plane; analytic context
// features; corrupted negative-distance cost volume. Reproducible from
// (config, seed) alone.
SceneSample generate_scene(const SceneConfig& cfg, uint64_t seed);

}  // namespace vpd
