#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "vpd/cacc.hpp"
#include "vpd/tensor.hpp"

namespace vpd {

struct UNetConfig {
  int64_t base_channels = 16;
  std::array<int64_t, 3> channel_mult = {1, 2, 4};
  int64_t depth = 16;   // D
  int64_t height = 32;  // H
  int64_t width = 32;   // W
  int64_t in_channels = 2;  // concat(y_t, prior)
  int64_t time_embed_width = 32;
  int64_t groups = 8;
  int64_t context_channels = 4;
  int deform_k = 3;

  int64_t level_channels(int level) const { return base_channels * channel_mult[level]; }
  void validate() const;
};

// Sinusoidal step embedding, shape [1, width]. Deterministic, no parameters.
template <class S>
Tensor<S> time_embed(int64_t t, int64_t width);

namespace nn {

template <class S>
struct Conv3dLayer {
  Tensor<S> w, b;
  int stride = 1, pad = 1;
  Conv3dLayer() = default;
  Conv3dLayer(int64_t ci, int64_t co, int k, int stride, int pad, Rng& rng, bool zero = false);
  Tensor<S> operator()(const Tensor<S>& x) const { return conv3d(x, w, b, stride, pad); }
};

template <class S>
struct LinearLayer {
  Tensor<S> w, b;  // [in, out], [out]
  LinearLayer() = default;
  LinearLayer(int64_t in, int64_t out, Rng& rng, bool zero = false);
  Tensor<S> operator()(const Tensor<S>& x) const;  // [1, in] -> [1, out]
};

template <class S>
struct GroupNormLayer {
  Tensor<S> gamma, beta;
  int64_t groups = 8;
  GroupNormLayer() = default;
  GroupNormLayer(int64_t channels, int64_t groups);
  Tensor<S> operator()(const Tensor<S>& x) const {
    return group_norm(x, groups, gamma, beta);
  }
};

// GroupNorm -> SiLU -> conv3d twice, additive time bias after the first conv,
// identity (or 1x1x1) residual path.
template <class S>
struct ResBlock3d {
  GroupNormLayer<S> gn1, gn2;
  Conv3dLayer<S> conv1, conv2;
  LinearLayer<S> time_proj;
  Conv3dLayer<S> skip;  // defined only when channel counts differ
  bool has_skip = false;

  ResBlock3d() = default;
  ResBlock3d(int64_t ci, int64_t co, int64_t groups, int64_t time_width, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>& t_emb) const;
  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor<S>>>& out);
};

}  // namespace nn

// Three downsample blocks (two residual layers + CACC each, stride-2 convs
// between) and three upsample blocks (two residual layers each, trilinear
// upsampling with concatenated skips). Output is a single-channel volume of
// raw logits; callers bound it with a sigmoid before the loss/task heads.
template <class S>
class UNet3D {
 public:
  UNet3D() = default;
  UNet3D(const UNetConfig& cfg, Rng& rng);

  Tensor<S> forward(const Tensor<S>& y_t, const Tensor<S>& prior, int64_t t,
                    const std::vector<ContextFeaturesT<S>>& contexts, bool use_cacc = true) const;

  const UNetConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, Tensor<S>>>& params() { return params_; }
  const std::vector<std::pair<std::string, Tensor<S>>>& params() const { return params_; }
  int64_t param_count() const;
  // Zero the output head (forward becomes identically zero).
  void zero_head();

 private:
  UNetConfig cfg_;
  nn::LinearLayer<S> time_mlp1_, time_mlp2_;
  nn::Conv3dLayer<S> stem_;
  std::array<nn::ResBlock3d<S>, 3> enc_a_, enc_b_;
  std::array<CaccBlock<S>, 3> cacc_;
  std::array<nn::Conv3dLayer<S>, 2> down_;
  std::array<nn::ResBlock3d<S>, 3> dec_a_, dec_b_;
  std::array<nn::Conv3dLayer<S>, 2> fuse_;
  nn::GroupNormLayer<S> head_gn_;
  nn::Conv3dLayer<S> head_conv_;
  std::vector<std::pair<std::string, Tensor<S>>> params_;

  void register_params();
};

}  // namespace vpd
