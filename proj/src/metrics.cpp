#include "vpd/metrics.hpp"

#include <cmath>

namespace vpd {

template <class S>
DepthMetricsReport depth_metrics(const DepthMapT<S>& pred, const DepthMapT<S>& gt,
                                 const std::vector<double>& th_thresholds,
                                 const std::vector<int>& delta_powers, double th_unit) {
  check_same_shape(pred.depths.shape(), gt.depths.shape(), "depth_metrics");
  require(pred.mask.size() == gt.mask.size(), "depth_metrics: masks do not align");
  const int64_t n = static_cast<int64_t>(gt.mask.size());

  DepthMetricsReport r;
  double sum_abs = 0, sum_abs_rel = 0, sum_sq_rel = 0, sum_sq = 0;
  std::map<double, int64_t> th_hits;
  for (double t : th_thresholds) th_hits[t] = 0;
  std::map<int, int64_t> delta_hits;
  for (int i : delta_powers) delta_hits[i] = 0;

  for (int64_t px = 0; px < n; ++px) {
    if (!gt.mask[px] || !pred.mask[px]) continue;
    const double g = static_cast<double>(gt.depths.data()[px]);
    const double p = static_cast<double>(pred.depths.data()[px]);
    require(g != 0.0, "depth_metrics: ground truth is zero at a valid pixel (relative metrics "
                      "undefined)");
    const double err = std::abs(p - g);
    sum_abs += err;
    sum_abs_rel += err / g;
    sum_sq_rel += (p - g) * (p - g) / g;
    sum_sq += (p - g) * (p - g);
    for (double t : th_thresholds)
      if (err > t * th_unit) th_hits[t]++;
    const double ratio = std::max(p / g, g / p);
    for (int i : delta_powers)
      if (ratio < std::pow(1.25, i)) delta_hits[i]++;
    r.pixel_count++;
  }
  require(r.pixel_count >= 1, "depth_metrics: no valid pixels");
  const double nn = static_cast<double>(r.pixel_count);
  r.abs = sum_abs / nn;
  r.abs_rel = sum_abs_rel / nn;
  r.sq_rel = sum_sq_rel / nn;
  r.rmse = std::sqrt(sum_sq / nn);
  for (double t : th_thresholds) r.th[t] = static_cast<double>(th_hits[t]) / nn;
  for (int i : delta_powers) r.delta[i] = static_cast<double>(delta_hits[i]) / nn;
  return r;
}

SemanticReport semantic_metrics(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt,
                                const Shape& extents, int num_classes, int ignore_index) {
  const int64_t n = numel(extents);
  require(static_cast<int64_t>(pred.size()) == n && static_cast<int64_t>(gt.size()) == n,
          "semantic_metrics: grid extent mismatch " + shape_str(extents));
  std::vector<int64_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  int64_t considered = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (gt[i] == ignore_index) continue;
    considered++;
    require(gt[i] >= 0 && gt[i] < num_classes, "semantic_metrics: gt label out of range");
    require(pred[i] >= 0 && pred[i] < num_classes, "semantic_metrics: pred label out of range");
    if (pred[i] == gt[i]) {
      tp[gt[i]]++;
    } else {
      fp[pred[i]]++;
      fn[gt[i]]++;
    }
  }
  require(considered >= 1, "semantic_metrics: every voxel is ignored");

  SemanticReport r;
  r.iou.assign(num_classes, 0.0);
  r.evaluated.assign(num_classes, 0);
  double acc = 0;
  int64_t evaluated = 0;
  for (int c = 0; c < num_classes; ++c) {
    const int64_t denom = tp[c] + fp[c] + fn[c];
    if (denom == 0) continue;  // absent from both pred and gt
    r.evaluated[c] = 1;
    r.iou[c] = static_cast<double>(tp[c]) / static_cast<double>(denom);
    acc += r.iou[c];
    evaluated++;
  }
  require(evaluated >= 1, "semantic_metrics: no evaluable classes");
  r.miou = acc / static_cast<double>(evaluated);
  return r;
}

template DepthMetricsReport depth_metrics<float>(const DepthMapT<float>&, const DepthMapT<float>&,
                                                 const std::vector<double>&,
                                                 const std::vector<int>&, double);
template DepthMetricsReport depth_metrics<double>(const DepthMapT<double>&,
                                                  const DepthMapT<double>&,
                                                  const std::vector<double>&,
                                                  const std::vector<int>&, double);

}  // namespace vpd
