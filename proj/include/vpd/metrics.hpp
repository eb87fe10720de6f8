#pragma once

#include <map>
#include <vector>

#include "vpd/volume.hpp"

namespace vpd {

struct DepthMetricsReport {
  double abs_rel = 0, abs = 0, sq_rel = 0, rmse = 0;
  std::map<double, double> th;  // threshold key (mm by default) -> fraction |err| > threshold
  std::map<int, double> delta;  // power i -> fraction max(p/g, g/p) < 1.25^i
  int64_t pixel_count = 0;
};

struct SemanticReport {
  std::vector<double> iou;          // per class; meaningful where evaluated[c]
  std::vector<uint8_t> evaluated;   // class appears in pred or gt
  double miou = 0;
};

// Depth-error metrics over the pixels valid in both masks. Threshold keys are
// interpreted in units of `th_unit` meters (default millimeters).
template <class S>
DepthMetricsReport depth_metrics(const DepthMapT<S>& pred, const DepthMapT<S>& gt,
                                 const std::vector<double>& th_thresholds = {8.0, 20.0},
                                 const std::vector<int>& delta_powers = {1, 2},
                                 double th_unit = 1e-3);

// Per-class IoU over non-ignored voxels; classes absent from both grids are
// excluded from the mean.
SemanticReport semantic_metrics(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt,
                                const Shape& extents, int num_classes, int ignore_index = -1);

}  // namespace vpd
