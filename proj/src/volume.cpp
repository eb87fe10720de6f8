#include "vpd/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vpd {

HypothesisPlanes::HypothesisPlanes(std::vector<double> depths) : depths_(std::move(depths)) {
  require(depths_.size() >= 2, "HypothesisPlanes: need at least 2 planes");
  for (size_t i = 1; i < depths_.size(); ++i)
    require(depths_[i] > depths_[i - 1], "HypothesisPlanes: depths must be strictly increasing");
}

HypothesisPlanes HypothesisPlanes::uniform(int64_t count, double d_min, double d_max) {
  require(count >= 2 && d_max > d_min, "HypothesisPlanes::uniform: invalid range");
  std::vector<double> d(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i)
    d[i] = d_min + (d_max - d_min) * static_cast<double>(i) / static_cast<double>(count - 1);
  d.back() = d_max;
  return HypothesisPlanes(std::move(d));
}

int64_t HypothesisPlanes::lower_index(double d) const {
  auto it = std::upper_bound(depths_.begin(), depths_.end(), d);
  int64_t i = static_cast<int64_t>(it - depths_.begin()) - 1;
  return std::clamp<int64_t>(i, 0, count() - 2);
}

int64_t HypothesisPlanes::nearest_index(double d) const {
  int64_t m = lower_index(d);
  double lo = depths_[m], hi = depths_[m + 1];
  if (d - lo <= hi - d) return m;  // ties go to the lower index
  return m + 1;
}

namespace {

template <class S>
void check_volume_shape(const Tensor<S>& v, const char* op) {
  require(v.defined() && v.rank() == 4 && v.dim(0) >= 1,
          std::string(op) + ": expected [C,D,H,W] volume");
}

}  // namespace

template <class S>
ProbabilityVolumeT<S> probabilize(const CostVolumeT<S>& cost) {
  check_volume_shape(cost.values, "probabilize");
  require(cost.values.dim(0) == 1, "probabilize: cost volume must have a single channel");
  for (S v : cost.values.data())
    require(std::isfinite(static_cast<double>(v)), "probabilize: non-finite cost value");
  return {softmax_axis(cost.values, 1)};
}

template <class S>
ProbabilityVolumeT<S> project_unimodal(const DepthMapT<S>& gt, const HypothesisPlanes& planes,
                                       ProjectionMode mode) {
  const int64_t H = gt.height(), W = gt.width(), D = planes.count();
  std::vector<S> out(static_cast<size_t>(D * H * W), S(0));
  const S uni = S(1) / static_cast<S>(D);
  for (int64_t h = 0; h < H; ++h)
    for (int64_t w = 0; w < W; ++w) {
      const int64_t px = h * W + w;
      if (!gt.mask[static_cast<size_t>(px)]) {
        for (int64_t d = 0; d < D; ++d) out[d * H * W + px] = uni;
        continue;
      }
      const double depth = static_cast<double>(gt.depths.data()[px]);
      if (depth < planes.d_min() || depth > planes.d_max())
        fail("project_unimodal: depth " + std::to_string(depth) + " at pixel (h=" +
             std::to_string(h) + ", w=" + std::to_string(w) + ") outside [" +
             std::to_string(planes.d_min()) + ", " + std::to_string(planes.d_max()) + "]");
      if (mode == ProjectionMode::OneHot) {
        out[planes.nearest_index(depth) * H * W + px] = S(1);
      } else {
        int64_t m = planes.lower_index(depth);
        double lo = planes[m], hi = planes[m + 1];
        double w_lo = (hi - depth) / (hi - lo);
        out[m * H * W + px] = static_cast<S>(w_lo);
        out[(m + 1) * H * W + px] = static_cast<S>(1.0 - w_lo);
      }
    }
  return {Tensor<S>::from({1, D, H, W}, std::move(out))};
}

template <class S>
WtaResult<S> wta(const ProbabilityVolumeT<S>& v, const HypothesisPlanes& planes) {
  check_volume_shape(v.values, "wta");
  const int64_t D = v.values.dim(1), H = v.values.dim(2), W = v.values.dim(3);
  require(D == planes.count(), "wta: volume depth " + std::to_string(D) +
                                   " does not match plane count " + std::to_string(planes.count()));
  auto idx = argmax_axis(v.values, 1);  // ties -> lowest index
  std::vector<S> depth(static_cast<size_t>(H * W));
  std::vector<S> conf(static_cast<size_t>(H * W));
  const auto& val = v.values.data();
  for (int64_t px = 0; px < H * W; ++px) {
    int64_t m = idx[static_cast<size_t>(px)];
    depth[px] = static_cast<S>(planes[m]);
    conf[px] = val[m * H * W + px];
  }
  WtaResult<S> r;
  r.depth.depths = Tensor<S>::from({H, W}, std::move(depth));
  r.depth.mask.assign(static_cast<size_t>(H * W), 1);
  r.confidence.values = Tensor<S>::from({1, H, W}, std::move(conf));
  return r;
}

template <class S>
ProbabilityVolumeT<S> online_filter(const ProbabilityVolumeT<S>& y, const HypothesisPlanes& planes,
                                    ProjectionMode mode) {
  return project_unimodal(wta(y, planes).depth, planes, mode);
}

template <class S>
ConfidenceMapT<S> confidence_map(const Tensor<S>& v) {
  check_volume_shape(v, "confidence_map");
  const int64_t C = v.dim(0), H = v.dim(2), W = v.dim(3);
  return {reshape(max_axis(v, 1, true), Shape{C, H, W})};
}

template <class S>
DepthMapT<S> soft_argmin_depth(const ProbabilityVolumeT<S>& v, const HypothesisPlanes& planes) {
  check_volume_shape(v.values, "soft_argmin_depth");
  const int64_t D = v.values.dim(1), H = v.values.dim(2), W = v.values.dim(3);
  require(D == planes.count(), "soft_argmin_depth: plane count mismatch");
  std::vector<S> pl(static_cast<size_t>(D));
  for (int64_t d = 0; d < D; ++d) pl[d] = static_cast<S>(planes[d]);
  auto col = Tensor<S>::from({1, D, 1, 1}, std::move(pl));
  auto expected = sum_axis(v.values * col, 1, true);  // [1,1,H,W]
  DepthMapT<S> r;
  r.depths = reshape(expected, Shape{H, W});
  r.mask.assign(static_cast<size_t>(H * W), 1);
  return r;
}

template <class S>
DepthMapT<S> unity_regress_depth(const Tensor<S>& unity, const HypothesisPlanes& planes) {
  check_volume_shape(unity, "unity_regress_depth");
  require(unity.dim(0) == 1, "unity_regress_depth: expected single channel");
  const int64_t D = unity.dim(1), H = unity.dim(2), W = unity.dim(3);
  require(D == planes.count(), "unity_regress_depth: plane count mismatch");
  const auto& u = unity.data();
  auto idx = argmax_axis(unity, 1);
  std::vector<S> depth(static_cast<size_t>(H * W));
  for (int64_t px = 0; px < H * W; ++px) {
    const int64_t m = idx[static_cast<size_t>(px)];
    const double um = static_cast<double>(u[m * H * W + px]);
    // Step toward the larger-valued adjacent bin; ties (and the lower edge)
    // toward +1.
    double next = m + 1 < D ? static_cast<double>(u[(m + 1) * H * W + px])
                            : -std::numeric_limits<double>::infinity();
    double prev = m > 0 ? static_cast<double>(u[(m - 1) * H * W + px])
                        : -std::numeric_limits<double>::infinity();
    int dir = (m + 1 >= D) ? -1 : (m == 0 ? +1 : (next >= prev ? +1 : -1));
    double d = planes[m] + (1.0 - um) * (planes[m + dir] - planes[m]);
    depth[px] = static_cast<S>(std::clamp(d, planes.d_min(), planes.d_max()));
  }
  DepthMapT<S> r;
  r.depths = Tensor<S>::from({H, W}, std::move(depth));
  r.mask.assign(static_cast<size_t>(H * W), 1);
  return r;
}

template <class S>
Tensor<S> occupancy_head(const Tensor<S>& v, int factor, int64_t num_classes,
                         const Tensor<S>& proj_w, const Tensor<S>& proj_b) {
  check_volume_shape(v, "occupancy_head");
  require(factor >= 1,
          "occupancy_head: upsample factor must be >= 1, got " + std::to_string(factor));
  Tensor<S> logits = v;
  if (proj_w.defined()) {
    logits = conv3d(v, proj_w, proj_b, 1, 0);
  } else {
    require(v.dim(0) == num_classes,
            "occupancy_head: channel count " + std::to_string(v.dim(0)) +
                " does not match num_classes " + std::to_string(num_classes) +
                " and no projection given");
  }
  require(logits.dim(0) == num_classes, "occupancy_head: projection output mismatch");
  if (factor > 1) logits = upsample_trilinear(logits, factor);
  return softmax_axis(logits, 0);
}

template <class S>
ProbabilityVolumeT<S> renormalize(const Tensor<S>& values) {
  check_volume_shape(values, "renormalize");
  auto denom = clamp(sum_axis(values, 1, true), 1e-12, std::numeric_limits<double>::infinity());
  return {values / denom};
}

std::string to_string(ProjectionMode m) {
  return m == ProjectionMode::OneHot ? "one_hot" : "two_bin";
}

ProjectionMode projection_mode_from_string(const std::string& s) {
  if (s == "one_hot") return ProjectionMode::OneHot;
  if (s == "two_bin") return ProjectionMode::TwoBin;
  fail("unknown projection mode: " + s);
}

#define VPD_INSTANTIATE_VOLUME(S)                                                              \
  template ProbabilityVolumeT<S> probabilize<S>(const CostVolumeT<S>&);                        \
  template ProbabilityVolumeT<S> project_unimodal<S>(const DepthMapT<S>&,                      \
                                                     const HypothesisPlanes&, ProjectionMode); \
  template WtaResult<S> wta<S>(const ProbabilityVolumeT<S>&, const HypothesisPlanes&);         \
  template ProbabilityVolumeT<S> online_filter<S>(const ProbabilityVolumeT<S>&,                \
                                                  const HypothesisPlanes&, ProjectionMode);    \
  template ConfidenceMapT<S> confidence_map<S>(const Tensor<S>&);                              \
  template DepthMapT<S> soft_argmin_depth<S>(const ProbabilityVolumeT<S>&,                     \
                                             const HypothesisPlanes&);                         \
  template DepthMapT<S> unity_regress_depth<S>(const Tensor<S>&, const HypothesisPlanes&);     \
  template Tensor<S> occupancy_head<S>(const Tensor<S>&, int, int64_t, const Tensor<S>&,       \
                                       const Tensor<S>&);                                      \
  template ProbabilityVolumeT<S> renormalize<S>(const Tensor<S>&);

VPD_INSTANTIATE_VOLUME(float)
VPD_INSTANTIATE_VOLUME(double)

}  // namespace vpd
