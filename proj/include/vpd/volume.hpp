#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vpd/tensor.hpp"

namespace vpd {

// Discretization grid shared by every volume: D_max metric depths, strictly
// increasing. Uniform spacing is the default; any increasing grid is accepted.
class HypothesisPlanes {
 public:
  explicit HypothesisPlanes(std::vector<double> depths);
  static HypothesisPlanes uniform(int64_t count, double d_min, double d_max);

  int64_t count() const { return static_cast<int64_t>(depths_.size()); }
  double operator[](int64_t i) const { return depths_[static_cast<size_t>(i)]; }
  const std::vector<double>& depths() const { return depths_; }
  double d_min() const { return depths_.front(); }
  double d_max() const { return depths_.back(); }

  // Index of the plane closest to `d`; ties resolve to the lower index.
  int64_t nearest_index(double d) const;
  // Largest m with depths[m] <= d (d inside range); used for two-bin splits.
  int64_t lower_index(double d) const;

 private:
  std::vector<double> depths_;
};

enum class ProjectionMode { OneHot, TwoBin };

template <class S>
struct CostVolumeT {
  Tensor<S> values;  // [1, D, H, W]
};

// Per-pixel distribution over depth hypotheses: sums to 1 along D.
template <class S>
struct ProbabilityVolumeT {
  Tensor<S> values;  // [1, D, H, W]
};

template <class S>
struct DepthMapT {
  Tensor<S> depths;           // [H, W] meters
  std::vector<uint8_t> mask;  // row-major H*W; nonzero where ground truth exists

  int64_t height() const { return depths.dim(0); }
  int64_t width() const { return depths.dim(1); }
  int64_t valid_count() const {
    int64_t n = 0;
    for (uint8_t m : mask) n += m ? 1 : 0;
    return n;
  }
};

template <class S>
struct ConfidenceMapT {
  Tensor<S> values;  // [C, H, W] in [0, 1]
};

template <class S>
struct WtaResult {
  DepthMapT<S> depth;
  ConfidenceMapT<S> confidence;
};

// Softmax along the depth dimension (coarse volume probabilization).
// Errors on NaN/Inf input.
template <class S>
ProbabilityVolumeT<S> probabilize(const CostVolumeT<S>& cost);

// Encode a depth map as a unimodal per-pixel distribution. OneHot puts all
// mass on the nearest plane; TwoBin splits it linearly between the bracketing
// planes. Invalid pixels receive the uniform distribution.
template <class S>
ProbabilityVolumeT<S> project_unimodal(const DepthMapT<S>& gt, const HypothesisPlanes& planes,
                                       ProjectionMode mode);

// Per-pixel argmax over D: depth of the winning plane plus its probability.
// Ties break to the lowest index.
template <class S>
WtaResult<S> wta(const ProbabilityVolumeT<S>& v, const HypothesisPlanes& planes);

// WTA followed by re-projection; keeps the volume unimodal between reverse
// sampling steps.
template <class S>
ProbabilityVolumeT<S> online_filter(const ProbabilityVolumeT<S>& y, const HypothesisPlanes& planes,
                                    ProjectionMode mode = ProjectionMode::OneHot);

// Highest value along D per channel and pixel. Differentiable.
template <class S>
ConfidenceMapT<S> confidence_map(const Tensor<S>& v);  // [C,D,H,W] -> [C,H,W]

// Expected depth under the distribution. Differentiable regression head.
template <class S>
DepthMapT<S> soft_argmin_depth(const ProbabilityVolumeT<S>& v, const HypothesisPlanes& planes);

// Unity-representation head: argmax hypothesis plus an offset of
// (1 - u_max) bin widths toward the larger-valued neighbor (ties toward +1),
// clamped to the grid range.
template <class S>
DepthMapT<S> unity_regress_depth(const Tensor<S>& unity, const HypothesisPlanes& planes);

// Semantic occupancy head: optional 1x1x1 class projection, trilinear
// upsampling by `factor`, then softmax over the class channel.
// proj_w [num_classes, C, 1, 1, 1]; pass undefined tensors to require
// C == num_classes.
template <class S>
Tensor<S> occupancy_head(const Tensor<S>& v, int factor, int64_t num_classes,
                         const Tensor<S>& proj_w, const Tensor<S>& proj_b);

// values / sum_D(values): turns a nonnegative volume back into a
// ProbabilityVolume. Differentiable.
template <class S>
ProbabilityVolumeT<S> renormalize(const Tensor<S>& values);

std::string to_string(ProjectionMode m);
ProjectionMode projection_mode_from_string(const std::string& s);

}  // namespace vpd
