#pragma once

#include "vpd/tensor.hpp"
#include "vpd/volume.hpp"

namespace vpd {

// Tunables for the three supervision regimes. smooth_l1_beta is in meters;
// the pipeline derives it from the hypothesis grid (one bin width by default).
struct LossConfig {
  double smooth_l1_beta = 1.0;
  double focal_gamma = 2.0;
  double unify_alpha = 0.75;
  double unify_gamma = 2.0;
  double unify_b = 2.718281828459045;

  void validate() const {
    require(smooth_l1_beta > 0.0, "LossConfig: smooth_l1_beta must be > 0");
    require(focal_gamma >= 0.0 && unify_gamma >= 0.0, "LossConfig: gamma must be >= 0");
    require(unify_alpha > 0.0 && unify_alpha < 1.0, "LossConfig: alpha must be in (0,1)");
    require(unify_b > 1.0, "LossConfig: b must be > 1");
  }
};

// Masked mean smooth-L1 between predicted and ground-truth depths.
// Valid set is gt's mask; errors when it is empty.
template <class S>
Tensor<S> regression_loss(const DepthMapT<S>& pred, const DepthMapT<S>& gt, double beta);

// Focal loss at the hypothesis nearest to the ground truth, summed over
// valid pixels. Probabilities are clamped to [1e-7, 1] before the log.
template <class S>
Tensor<S> classification_loss(const ProbabilityVolumeT<S>& pred, const DepthMapT<S>& gt,
                              const HypothesisPlanes& planes, double gamma);

// Unified focal loss over a unity volume u against continuous targets q.
// Entries of valid pixels are supervised; q+ is the per-pixel positive
// target and must be nonzero there.
template <class S>
Tensor<S> unification_loss(const Tensor<S>& u, const Tensor<S>& q,
                           const std::vector<uint8_t>& valid, const LossConfig& cfg);

// Unity ground truth: one positive bin per valid pixel holding
// 1 - |d - nearest_plane| / local_bin_width; invalid pixels are all-zero.
template <class S>
Tensor<S> build_unity_target(const DepthMapT<S>& gt, const HypothesisPlanes& planes);

}  // namespace vpd
