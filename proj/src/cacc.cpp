#include "vpd/cacc.hpp"

#include <cmath>

namespace vpd {

template <class S>
DeformableKernelT<S> DeformableKernelT<S>::init(int64_t c_in, int64_t c_out, int k, Rng& rng) {
  require(c_out % 2 == 0, "DeformableKernel: C_out must be even to chunk into K/V, got " +
                              std::to_string(c_out));
  DeformableKernelT<S> d;
  d.k = k;
  double std_w = std::sqrt(2.0 / static_cast<double>(c_in * k * k));
  d.weight = Tensor<S>::randn({c_out, c_in, k, k}, rng);
  for (auto& w : d.weight.data()) w = static_cast<S>(w * std_w);
  d.bias = Tensor<S>::zeros({c_out});
  // zero offsets at init: the block starts as a standard convolution
  d.offset_w = Tensor<S>::zeros({2 * int64_t(k) * k, c_in, k, k});
  d.offset_b = Tensor<S>::zeros({2 * int64_t(k) * k});
  d.weight.set_requires_grad(true);
  d.bias.set_requires_grad(true);
  d.offset_w.set_requires_grad(true);
  d.offset_b.set_requires_grad(true);
  return d;
}

template <class S>
void DeformableKernelT<S>::collect_params(const std::string& prefix,
                                          std::vector<std::pair<std::string, Tensor<S>>>& out) {
  out.emplace_back(prefix + ".w", weight);
  out.emplace_back(prefix + ".b", bias);
  out.emplace_back(prefix + ".off_w", offset_w);
  out.emplace_back(prefix + ".off_b", offset_b);
}

template <class S>
Tensor<S> uncertainty_query(const Tensor<S>& v_depth) {
  require(v_depth.rank() == 4, "uncertainty_query: expected [C,D,H,W]");
  const int64_t C = v_depth.dim(0), H = v_depth.dim(2), W = v_depth.dim(3);
  auto m = reshape(max_axis(v_depth, 1, true), Shape{C, H, W});
  return sigmoid(neg(m));
}

template <class S>
std::pair<Tensor<S>, Tensor<S>> deformable_kv(const ContextFeaturesT<S>& f,
                                              const DeformableKernelT<S>& kernel) {
  require(f.values.rank() == 3, "deformable_kv: context must be [C',H,W]");
  const int64_t c_out = kernel.weight.dim(0);
  require(c_out % 2 == 0, "deformable_kv: C_out must be even, got " + std::to_string(c_out));
  const int pad = (kernel.k - 1) / 2;
  auto offsets = conv2d(f.values, kernel.offset_w, kernel.offset_b, pad, PadMode::Zero);
  auto kv = deform_conv2d(f.values, kernel.weight, kernel.bias, offsets);
  auto k = slice(kv, 0, 0, c_out / 2);
  auto v = slice(kv, 0, c_out / 2, c_out / 2);
  return {k, v};
}

template <class S>
Tensor<S> linear_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
          "linear_attention: expected rank-2 token matrices");
  require(q.dim(1) == k.dim(1),
          "linear_attention: inner dimension mismatch " + shape_str(q.shape()) + " vs " +
              shape_str(k.shape()));
  require(k.dim(0) == v.dim(0) && k.dim(1) == v.dim(1),
          "linear_attention: K/V shape mismatch " + shape_str(k.shape()) + " vs " +
              shape_str(v.shape()));
  auto phi_q = softmax_axis(q, 1);  // along each row
  auto phi_k = softmax_axis(k, 0);  // along each column
  auto kv = matmul(transpose2d(phi_k), v);  // [C_a, C_a]
  return matmul(phi_q, kv);
}

template <class S>
Tensor<S> lift_context(const Tensor<S>& f_conf, const Tensor<S>& depth_dist) {
  require(f_conf.rank() == 3, "lift_context: features must be [C,H,W]");
  require(depth_dist.rank() == 4 && depth_dist.dim(0) == 1,
          "lift_context: depth distribution must be [1,D,H,W]");
  require(f_conf.dim(1) == depth_dist.dim(2) && f_conf.dim(2) == depth_dist.dim(3),
          "lift_context: spatial mismatch " + shape_str(f_conf.shape()) + " vs " +
              shape_str(depth_dist.shape()));
  const int64_t C = f_conf.dim(0), H = f_conf.dim(1), W = f_conf.dim(2);
  auto f4 = reshape(f_conf, Shape{C, 1, H, W});
  return f4 * depth_dist;  // broadcast outer product along D
}

template <class S>
Tensor<S> refine(const Tensor<S>& v_depth, const Tensor<S>& conf, const Tensor<S>& v_context) {
  require(v_depth.rank() == 4, "refine: volume must be [C,D,H,W]");
  check_same_shape(v_depth.shape(), v_context.shape(), "refine");
  Shape want{v_depth.dim(0), v_depth.dim(2), v_depth.dim(3)};
  require(conf.shape() == want, "refine: confidence must be " + shape_str(want) + ", got " +
                                    shape_str(conf.shape()));
  auto conf4 = reshape(conf, Shape{v_depth.dim(0), 1, v_depth.dim(2), v_depth.dim(3)});
  return v_depth * conf4 + v_context;
}

template <class S>
CaccBlock<S>::CaccBlock(int64_t channels, int64_t context_channels, int deform_k, Rng& rng)
    : channels_(channels) {
  kernel_ = DeformableKernelT<S>::init(context_channels, 2 * channels, deform_k, rng);
  double std_w = std::sqrt(2.0 / static_cast<double>(channels));
  q_w_ = Tensor<S>::randn({channels, channels, 1, 1}, rng);
  for (auto& w : q_w_.data()) w = static_cast<S>(w * std_w);
  q_b_ = Tensor<S>::zeros({channels});
  q_w_.set_requires_grad(true);
  q_b_.set_requires_grad(true);
}

template <class S>
Tensor<S> CaccBlock<S>::forward(const Tensor<S>& v_depth,
                                const ContextFeaturesT<S>& f_context) const {
  require(v_depth.rank() == 4 && v_depth.dim(0) == channels_,
          "CaccBlock: volume must be [C,D,H,W] with C = " + std::to_string(channels_));
  require(f_context.values.dim(1) == v_depth.dim(2) && f_context.values.dim(2) == v_depth.dim(3),
          "CaccBlock: context scale mismatch " + shape_str(f_context.values.shape()) + " vs " +
              shape_str(v_depth.shape()));
  const int64_t C = channels_, H = v_depth.dim(2), W = v_depth.dim(3);

  // Confidence and uncertainty both derive from the per-pixel peak value.
  auto m = reshape(max_axis(v_depth, 1, true), Shape{C, H, W});
  auto conf = sigmoid(m);
  auto q_unc = sigmoid(neg(m));

  auto q_tok = transpose2d(reshape(conv2d(q_unc, q_w_, q_b_, 0), Shape{C, H * W}));
  auto [k_map, v_map] = deformable_kv(f_context, kernel_);
  auto k_tok = transpose2d(reshape(k_map, Shape{C, H * W}));
  auto v_tok = transpose2d(reshape(v_map, Shape{C, H * W}));

  auto f_conf = reshape(transpose2d(linear_attention(q_tok, k_tok, v_tok)), Shape{C, H, W});

  auto dist = softmax_axis(mean_axis(v_depth, 0, true), 1);
  auto v_context = lift_context(f_conf, dist);
  return refine(v_depth, conf, v_context);
}

template <class S>
void CaccBlock<S>::collect_params(const std::string& prefix,
                                  std::vector<std::pair<std::string, Tensor<S>>>& out) {
  kernel_.collect_params(prefix + ".deform", out);
  out.emplace_back(prefix + ".q_w", q_w_);
  out.emplace_back(prefix + ".q_b", q_b_);
}

#define VPD_INSTANTIATE_CACC(S)                                                            \
  template struct DeformableKernelT<S>;                                                    \
  template class CaccBlock<S>;                                                             \
  template Tensor<S> uncertainty_query<S>(const Tensor<S>&);                               \
  template std::pair<Tensor<S>, Tensor<S>> deformable_kv<S>(const ContextFeaturesT<S>&,    \
                                                            const DeformableKernelT<S>&);  \
  template Tensor<S> linear_attention<S>(const Tensor<S>&, const Tensor<S>&,               \
                                         const Tensor<S>&);                                \
  template Tensor<S> lift_context<S>(const Tensor<S>&, const Tensor<S>&);                  \
  template Tensor<S> refine<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);

VPD_INSTANTIATE_CACC(float)
VPD_INSTANTIATE_CACC(double)

}  // namespace vpd
