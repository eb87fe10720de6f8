#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vpd/tensor.hpp"
#include "vpd/volume.hpp"

namespace vpd {

// One scale of contextual features from the (synthetic) feature extractor.
template <class S>
struct ContextFeaturesT {
  Tensor<S> values;  // [C', H, W]
  int scale = 0;     // downsample exponent: spatial extents = full / 2^scale
};

// Deformable convolution producing attention keys/values. The offset field is
// predicted by a plain conv over the same features and is zero-initialized,
// so a fresh kernel degenerates to standard convolution.
template <class S>
struct DeformableKernelT {
  Tensor<S> weight;    // [C_out, C', k, k], C_out even (chunked into K | V)
  Tensor<S> bias;      // [C_out]
  Tensor<S> offset_w;  // [2*k*k, C', k, k]
  Tensor<S> offset_b;  // [2*k*k]
  int k = 3;

  static DeformableKernelT init(int64_t c_in, int64_t c_out, int k, Rng& rng);
  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor<S>>>& out);
};

// Q = sigmoid(-max_D(v)): high peak probability -> low uncertainty.
template <class S>
Tensor<S> uncertainty_query(const Tensor<S>& v_depth);  // [C,D,H,W] -> [C,H,W]

// Deformable conv + chunk into (K, V) halves along the channel axis.
template <class S>
std::pair<Tensor<S>, Tensor<S>> deformable_kv(const ContextFeaturesT<S>& f,
                                              const DeformableKernelT<S>& kernel);

// softmax_row(Q) * (softmax_col(K)^T * V); rows are flattened pixel tokens.
template <class S>
Tensor<S> linear_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v);

// V_context[c,d,h,w] = f_conf[c,h,w] * depth_dist[0,d,h,w]
template <class S>
Tensor<S> lift_context(const Tensor<S>& f_conf, const Tensor<S>& depth_dist);

// V_refine = v_depth (*) conf + v_context, conf broadcast along D.
template <class S>
Tensor<S> refine(const Tensor<S>& v_depth, const Tensor<S>& conf, const Tensor<S>& v_context);

// Confidence-aware contextual collaboration block at one UNet scale.
// Attention width C_a equals the volume channel count so the lifted context
// sums directly into the gated volume.
template <class S>
class CaccBlock {
 public:
  CaccBlock() = default;
  CaccBlock(int64_t channels, int64_t context_channels, int deform_k, Rng& rng);

  // v_depth [C,D,H,W] with matching-scale context features.
  Tensor<S> forward(const Tensor<S>& v_depth, const ContextFeaturesT<S>& f_context) const;

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor<S>>>& out);

  DeformableKernelT<S>& kernel() { return kernel_; }

 private:
  int64_t channels_ = 0;
  DeformableKernelT<S> kernel_;
  Tensor<S> q_w_;  // [C_a, C, 1, 1]
  Tensor<S> q_b_;  // [C_a]
};

}  // namespace vpd
