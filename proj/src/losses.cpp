#include "vpd/losses.hpp"

#include <cmath>

namespace vpd {

namespace {

template <class S>
Tensor<S> mask_tensor(const std::vector<uint8_t>& mask, const Shape& shape) {
  std::vector<S> m(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) m[i] = mask[i] ? S(1) : S(0);
  return Tensor<S>::from(shape, std::move(m));
}

}  // namespace

template <class S>
Tensor<S> regression_loss(const DepthMapT<S>& pred, const DepthMapT<S>& gt, double beta) {
  require(beta > 0.0, "regression_loss: beta must be > 0");
  check_same_shape(pred.depths.shape(), gt.depths.shape(), "regression_loss");
  require(pred.mask.size() == gt.mask.size(), "regression_loss: masks do not align");
  const int64_t n_valid = gt.valid_count();
  require(n_valid >= 1, "regression_loss: no valid pixels");

  auto diff = pred.depths - gt.depths;
  auto a = vpd::abs(diff);
  // branch on forward values: quadratic below beta, linear above
  std::vector<S> sel(a.data().size());
  for (size_t i = 0; i < sel.size(); ++i)
    sel[i] = (gt.mask[i] && static_cast<double>(a.data()[i]) < beta) ? S(1) : S(0);
  auto quad_mask = Tensor<S>::from(a.shape(), std::move(sel));
  auto lin_mask = mask_tensor<S>(gt.mask, a.shape()) - quad_mask;
  auto quad = mul_scalar(square(diff), static_cast<S>(0.5 / beta));
  auto lin = add_scalar(a, static_cast<S>(-0.5 * beta));
  auto total = sum_all(quad_mask * quad + lin_mask * lin);
  return mul_scalar(total, S(1) / static_cast<S>(n_valid));
}

template <class S>
Tensor<S> classification_loss(const ProbabilityVolumeT<S>& pred, const DepthMapT<S>& gt,
                              const HypothesisPlanes& planes, double gamma) {
  require(gamma >= 0.0, "classification_loss: gamma must be >= 0");
  const auto& v = pred.values;
  require(v.rank() == 4 && v.dim(0) == 1, "classification_loss: volume must be [1,D,H,W]");
  const int64_t D = v.dim(1), H = v.dim(2), W = v.dim(3);
  require(D == planes.count(), "classification_loss: plane count mismatch");
  require(gt.height() == H && gt.width() == W, "classification_loss: spatial mismatch");
  const int64_t n_valid = gt.valid_count();
  require(n_valid >= 1, "classification_loss: no valid pixels");

  // select P at the hypothesis nearest to ground truth via a one-hot volume
  std::vector<S> onehot(static_cast<size_t>(D * H * W), S(0));
  for (int64_t px = 0; px < H * W; ++px) {
    if (!gt.mask[static_cast<size_t>(px)]) continue;
    int64_t h = planes.nearest_index(static_cast<double>(gt.depths.data()[px]));
    onehot[h * H * W + px] = S(1);
  }
  auto sel = Tensor<S>::from({1, D, H, W}, std::move(onehot));
  auto p = sum_axis(v * sel, 1, true);  // [1,1,H,W]; zero at invalid pixels
  auto pc = vpd::clamp(p, 1e-7, 1.0);
  auto weight = pow_scalar(add_scalar(neg(pc), S(1)), gamma);  // (1 - P)^gamma
  auto per_px = neg(weight * vpd::log(pc));
  auto vm = mask_tensor<S>(gt.mask, {1, 1, H, W});
  return sum_all(per_px * vm);
}

template <class S>
Tensor<S> build_unity_target(const DepthMapT<S>& gt, const HypothesisPlanes& planes) {
  const int64_t H = gt.height(), W = gt.width(), D = planes.count();
  std::vector<S> q(static_cast<size_t>(D * H * W), S(0));
  for (int64_t px = 0; px < H * W; ++px) {
    if (!gt.mask[static_cast<size_t>(px)]) continue;
    const double d = static_cast<double>(gt.depths.data()[px]);
    require(d >= planes.d_min() && d <= planes.d_max(),
            "build_unity_target: depth outside the hypothesis range");
    int64_t lo = planes.lower_index(d);
    int64_t m = planes.nearest_index(d);
    double bin = planes[lo + 1] - planes[lo];
    q[m * H * W + px] = static_cast<S>(1.0 - std::abs(d - planes[m]) / bin);
  }
  return Tensor<S>::from({1, D, H, W}, std::move(q));
}

template <class S>
Tensor<S> unification_loss(const Tensor<S>& u, const Tensor<S>& q,
                           const std::vector<uint8_t>& valid, const LossConfig& cfg) {
  cfg.validate();
  check_same_shape(u.shape(), q.shape(), "unification_loss");
  require(u.rank() == 4 && u.dim(0) == 1, "unification_loss: volumes must be [1,D,H,W]");
  const int64_t D = u.dim(1), H = u.dim(2), W = u.dim(3);
  require(static_cast<int64_t>(valid.size()) == H * W, "unification_loss: mask size mismatch");

  // q+ per pixel: the positive target value (max over D of the target)
  std::vector<S> qpos(static_cast<size_t>(H * W), S(0));
  const auto& qd = q.data();
  for (int64_t px = 0; px < H * W; ++px) {
    S best = 0;
    for (int64_t d = 0; d < D; ++d) best = std::max(best, qd[d * H * W + px]);
    if (valid[static_cast<size_t>(px)])
      require(best > S(0), "unification_loss: q+ is zero on a supervised pixel " +
                               std::to_string(px));
    qpos[px] = best > S(0) ? best : S(1);  // placeholder on unsupervised pixels
  }
  auto qp = reshape(Tensor<S>::from({H * W}, std::move(qpos)), Shape{1, 1, H, W});

  // branch masks from the target (constants w.r.t. the prediction)
  std::vector<S> pos(static_cast<size_t>(D * H * W));
  for (size_t i = 0; i < pos.size(); ++i) pos[i] = qd[i] > S(0) ? S(1) : S(0);
  auto pos_mask = Tensor<S>::from(u.shape(), std::move(pos));
  auto vm = mask_tensor<S>(valid, {1, 1, H, W});
  pos_mask = pos_mask * vm;
  auto neg_mask = vm - pos_mask;  // broadcasts to [1,D,H,W]; zero at invalid pixels

  auto uc = vpd::clamp(u, 1e-7, 1.0 - 1e-7);
  auto bce = neg(q * vpd::log(uc) +
                 (add_scalar(neg(q), S(1))) * vpd::log(add_scalar(neg(uc), S(1))));

  const double ln_b = std::log(cfg.unify_b);
  auto s_of = [&](const Tensor<S>& x) {  // S_b(x) = sigmoid(x * ln b)
    return sigmoid(mul_scalar(x, static_cast<S>(ln_b)));
  };
  auto pos_w = pow_scalar(s_of(vpd::abs(q - u) / qp), cfg.unify_gamma);
  auto neg_w = pow_scalar(s_of(u / qp), cfg.unify_gamma);

  auto pos_term = mul_scalar(pos_mask * pos_w * bce, static_cast<S>(cfg.unify_alpha));
  auto neg_term = mul_scalar(neg_mask * neg_w * bce, static_cast<S>(1.0 - cfg.unify_alpha));
  return sum_all(pos_term + neg_term);
}

#define VPD_INSTANTIATE_LOSSES(S)                                                           \
  template Tensor<S> regression_loss<S>(const DepthMapT<S>&, const DepthMapT<S>&, double);  \
  template Tensor<S> classification_loss<S>(const ProbabilityVolumeT<S>&,                   \
                                            const DepthMapT<S>&, const HypothesisPlanes&,   \
                                            double);                                        \
  template Tensor<S> unification_loss<S>(const Tensor<S>&, const Tensor<S>&,                \
                                         const std::vector<uint8_t>&, const LossConfig&);   \
  template Tensor<S> build_unity_target<S>(const DepthMapT<S>&, const HypothesisPlanes&);

VPD_INSTANTIATE_LOSSES(float)
VPD_INSTANTIATE_LOSSES(double)

}  // namespace vpd
