#include "vpd/unet.hpp"

#include <cmath>

namespace vpd {

void UNetConfig::validate() const {
  require(base_channels >= 1 && in_channels >= 1, "UNetConfig: bad channel counts");
  require(depth % 4 == 0 && height % 4 == 0 && width % 4 == 0,
          "UNetConfig: D,H,W must be divisible by 4 (two stride-2 stages), got [" +
              std::to_string(depth) + "," + std::to_string(height) + "," +
              std::to_string(width) + "]");
  for (int l = 0; l < 3; ++l)
    require(level_channels(l) % groups == 0,
            "UNetConfig: group count " + std::to_string(groups) +
                " must divide level channels " + std::to_string(level_channels(l)));
  require(time_embed_width >= 2 && time_embed_width % 2 == 0,
          "UNetConfig: time_embed_width must be even");
}

template <class S>
Tensor<S> time_embed(int64_t t, int64_t width) {
  require(t >= 0, "time_embed: t must be >= 0");
  require(width >= 2 && width % 2 == 0, "time_embed: width must be even and >= 2");
  const int64_t half = width / 2;
  std::vector<S> v(static_cast<size_t>(width));
  for (int64_t i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                           static_cast<double>(half));
    v[i] = static_cast<S>(std::sin(static_cast<double>(t) * freq));
    v[half + i] = static_cast<S>(std::cos(static_cast<double>(t) * freq));
  }
  return Tensor<S>::from({1, width}, std::move(v));
}

namespace nn {

template <class S>
Conv3dLayer<S>::Conv3dLayer(int64_t ci, int64_t co, int k, int stride_, int pad_, Rng& rng,
                            bool zero)
    : stride(stride_), pad(pad_) {
  if (zero) {
    w = Tensor<S>::zeros({co, ci, k, k, k});
  } else {
    double std_w = std::sqrt(2.0 / static_cast<double>(ci * k * k * k));
    w = Tensor<S>::randn({co, ci, k, k, k}, rng);
    for (auto& x : w.data()) x = static_cast<S>(x * std_w);
  }
  b = Tensor<S>::zeros({co});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
}

template <class S>
LinearLayer<S>::LinearLayer(int64_t in, int64_t out, Rng& rng, bool zero) {
  if (zero) {
    w = Tensor<S>::zeros({in, out});
  } else {
    double std_w = std::sqrt(2.0 / static_cast<double>(in));
    w = Tensor<S>::randn({in, out}, rng);
    for (auto& x : w.data()) x = static_cast<S>(x * std_w);
  }
  b = Tensor<S>::zeros({1, out});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
}

template <class S>
Tensor<S> LinearLayer<S>::operator()(const Tensor<S>& x) const {
  return matmul(x, w) + b;
}

template <class S>
GroupNormLayer<S>::GroupNormLayer(int64_t channels, int64_t groups_) : groups(groups_) {
  gamma = Tensor<S>::ones({channels});
  beta = Tensor<S>::zeros({channels});
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <class S>
ResBlock3d<S>::ResBlock3d(int64_t ci, int64_t co, int64_t groups, int64_t time_width, Rng& rng)
    : gn1(ci, groups),
      gn2(co, groups),
      conv1(ci, co, 3, 1, 1, rng),
      conv2(co, co, 3, 1, 1, rng),
      time_proj(time_width, co, rng) {
  if (ci != co) {
    skip = Conv3dLayer<S>(ci, co, 1, 1, 0, rng);
    has_skip = true;
  }
}

template <class S>
Tensor<S> ResBlock3d<S>::operator()(const Tensor<S>& x, const Tensor<S>& t_emb) const {
  auto h = conv1(silu(gn1(x)));
  auto tb = reshape(time_proj(t_emb), Shape{h.dim(0), 1, 1, 1});
  h = h + tb;
  h = conv2(silu(gn2(h)));
  auto base = has_skip ? skip(x) : x;
  return base + h;
}

template <class S>
void ResBlock3d<S>::collect_params(const std::string& prefix,
                                   std::vector<std::pair<std::string, Tensor<S>>>& out) {
  out.emplace_back(prefix + ".gn1.g", gn1.gamma);
  out.emplace_back(prefix + ".gn1.b", gn1.beta);
  out.emplace_back(prefix + ".conv1.w", conv1.w);
  out.emplace_back(prefix + ".conv1.b", conv1.b);
  out.emplace_back(prefix + ".time.w", time_proj.w);
  out.emplace_back(prefix + ".time.b", time_proj.b);
  out.emplace_back(prefix + ".gn2.g", gn2.gamma);
  out.emplace_back(prefix + ".gn2.b", gn2.beta);
  out.emplace_back(prefix + ".conv2.w", conv2.w);
  out.emplace_back(prefix + ".conv2.b", conv2.b);
  if (has_skip) {
    out.emplace_back(prefix + ".skip.w", skip.w);
    out.emplace_back(prefix + ".skip.b", skip.b);
  }
}

}  // namespace nn

template <class S>
UNet3D<S>::UNet3D(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int64_t tw = cfg_.time_embed_width;
  time_mlp1_ = nn::LinearLayer<S>(tw, tw, rng);
  time_mlp2_ = nn::LinearLayer<S>(tw, tw, rng);
  const int64_t c0 = cfg_.level_channels(0), c1 = cfg_.level_channels(1),
                c2 = cfg_.level_channels(2);
  stem_ = nn::Conv3dLayer<S>(cfg_.in_channels, c0, 3, 1, 1, rng);
  const int64_t cs[3] = {c0, c1, c2};
  for (int l = 0; l < 3; ++l) {
    enc_a_[l] = nn::ResBlock3d<S>(cs[l], cs[l], cfg_.groups, tw, rng);
    enc_b_[l] = nn::ResBlock3d<S>(cs[l], cs[l], cfg_.groups, tw, rng);
    cacc_[l] = CaccBlock<S>(cs[l], cfg_.context_channels, cfg_.deform_k, rng);
  }
  down_[0] = nn::Conv3dLayer<S>(c0, c1, 3, 2, 1, rng);
  down_[1] = nn::Conv3dLayer<S>(c1, c2, 3, 2, 1, rng);
  for (int l = 0; l < 3; ++l) {
    dec_a_[l] = nn::ResBlock3d<S>(cs[l], cs[l], cfg_.groups, tw, rng);
    dec_b_[l] = nn::ResBlock3d<S>(cs[l], cs[l], cfg_.groups, tw, rng);
  }
  fuse_[0] = nn::Conv3dLayer<S>(c2 + c1, c1, 1, 1, 0, rng);  // after upsample to level 1
  fuse_[1] = nn::Conv3dLayer<S>(c1 + c0, c0, 1, 1, 0, rng);  // after upsample to level 0
  head_gn_ = nn::GroupNormLayer<S>(c0, cfg_.groups);
  head_conv_ = nn::Conv3dLayer<S>(c0, 1, 3, 1, 1, rng, /*zero=*/true);
  register_params();
}

template <class S>
void UNet3D<S>::register_params() {
  params_.clear();
  params_.emplace_back("time.mlp1.w", time_mlp1_.w);
  params_.emplace_back("time.mlp1.b", time_mlp1_.b);
  params_.emplace_back("time.mlp2.w", time_mlp2_.w);
  params_.emplace_back("time.mlp2.b", time_mlp2_.b);
  params_.emplace_back("stem.w", stem_.w);
  params_.emplace_back("stem.b", stem_.b);
  for (int l = 0; l < 3; ++l) {
    std::string p = "enc" + std::to_string(l);
    enc_a_[l].collect_params(p + ".res0", params_);
    enc_b_[l].collect_params(p + ".res1", params_);
    cacc_[l].collect_params(p + ".cacc", params_);
  }
  for (int l = 0; l < 2; ++l) {
    params_.emplace_back("down" + std::to_string(l) + ".w", down_[l].w);
    params_.emplace_back("down" + std::to_string(l) + ".b", down_[l].b);
    params_.emplace_back("fuse" + std::to_string(l) + ".w", fuse_[l].w);
    params_.emplace_back("fuse" + std::to_string(l) + ".b", fuse_[l].b);
  }
  for (int l = 0; l < 3; ++l) {
    std::string p = "dec" + std::to_string(l);
    dec_a_[l].collect_params(p + ".res0", params_);
    dec_b_[l].collect_params(p + ".res1", params_);
  }
  params_.emplace_back("head.gn.g", head_gn_.gamma);
  params_.emplace_back("head.gn.b", head_gn_.beta);
  params_.emplace_back("head.conv.w", head_conv_.w);
  params_.emplace_back("head.conv.b", head_conv_.b);
}

template <class S>
int64_t UNet3D<S>::param_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

template <class S>
void UNet3D<S>::zero_head() {
  std::fill(head_conv_.w.data().begin(), head_conv_.w.data().end(), S(0));
  std::fill(head_conv_.b.data().begin(), head_conv_.b.data().end(), S(0));
}

template <class S>
Tensor<S> UNet3D<S>::forward(const Tensor<S>& y_t, const Tensor<S>& prior, int64_t t,
                             const std::vector<ContextFeaturesT<S>>& contexts,
                             bool use_cacc) const {
  Shape want{1, cfg_.depth, cfg_.height, cfg_.width};
  require(y_t.shape() == want, "UNet3D: y_t must be " + shape_str(want) + ", got " +
                                   shape_str(y_t.shape()));
  check_same_shape(y_t.shape(), prior.shape(), "UNet3D");
  if (use_cacc) {
    require(contexts.size() == 3, "UNet3D: need context features at 3 scales, got " +
                                      std::to_string(contexts.size()));
    for (int l = 0; l < 3; ++l) {
      require(contexts[l].scale == l, "UNet3D: missing context scale " + std::to_string(l));
      require(contexts[l].values.dim(1) == cfg_.height >> l &&
                  contexts[l].values.dim(2) == cfg_.width >> l,
              "UNet3D: context scale " + std::to_string(l) + " has extents " +
                  shape_str(contexts[l].values.shape()));
    }
  }

  auto emb = time_embed<S>(t, cfg_.time_embed_width);
  auto t_emb = time_mlp2_(silu(time_mlp1_(emb)));

  auto x = stem_(concat<S>({y_t, prior}, 0));
  std::array<Tensor<S>, 3> skips;
  for (int l = 0; l < 3; ++l) {
    x = enc_a_[l](x, t_emb);
    x = enc_b_[l](x, t_emb);
    if (use_cacc) x = cacc_[l].forward(x, contexts[l]);
    skips[l] = x;
    if (l < 2) x = down_[l](x);
  }

  x = dec_a_[2](x, t_emb);
  x = dec_b_[2](x, t_emb);
  for (int l = 1; l >= 0; --l) {
    x = upsample_trilinear(x, 2);
    x = fuse_[1 - l](concat<S>({x, skips[l]}, 0));
    x = dec_a_[l](x, t_emb);
    x = dec_b_[l](x, t_emb);
  }
  return head_conv_(silu(head_gn_(x)));
}

#define VPD_INSTANTIATE_UNET(S)                                                       \
  template Tensor<S> time_embed<S>(int64_t, int64_t);                                 \
  template struct nn::Conv3dLayer<S>;                                                 \
  template struct nn::LinearLayer<S>;                                                 \
  template struct nn::GroupNormLayer<S>;                                              \
  template struct nn::ResBlock3d<S>;                                                  \
  template class UNet3D<S>;

VPD_INSTANTIATE_UNET(float)
VPD_INSTANTIATE_UNET(double)

}  // namespace vpd
