#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vpd/tensor.hpp"
#include "vpd/volume.hpp"

namespace vpd {

enum class ScheduleKind { Linear, Cosine };

// Per-step coefficients alpha_t, alpha_bar_t for t = 1..T, with
// alpha_bar(0) == 1 as the boundary convention.
class NoiseSchedule {
 public:
  static NoiseSchedule make(int64_t T, ScheduleKind kind, double beta_start, double beta_end);

  int64_t steps() const { return T_; }
  double beta(int64_t t) const { return betas_[index(t)]; }
  double alpha(int64_t t) const { return alphas_[index(t)]; }
  double alpha_bar(int64_t t) const {
    require(t >= 0 && t <= T_, "alpha_bar: t out of range");
    return t == 0 ? 1.0 : alpha_bars_[static_cast<size_t>(t - 1)];
  }
  // Training schedules should end in (near) pure noise.
  bool terminal_noise_ok() const { return alpha_bar(T_) < 0.01; }

  std::string to_csv() const;  // "t,alpha,alpha_bar" rows for plotting

 private:
  size_t index(int64_t t) const {
    require(t >= 1 && t <= T_, "NoiseSchedule: t out of range [1," + std::to_string(T_) + "]");
    return static_cast<size_t>(t - 1);
  }
  int64_t T_ = 0;
  std::vector<double> betas_, alphas_, alpha_bars_;
};

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind k);

// Mid-chain state of one diffusion trajectory.
template <class S>
struct DiffusionState {
  Tensor<S> y;  // volume-shaped, not necessarily normalized mid-chain
  int64_t t = 0;
  uint64_t rng_seed = 0;
};

// y_t = sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * noise
template <class S>
Tensor<S> forward_sample(const Tensor<S>& y0, int64_t t, const NoiseSchedule& schedule,
                         const Tensor<S>& noise);

// Deterministic (eta = 0) update from t to t_next < t under the
// x0-parameterization; eta > 0 adds non-Markovian noise and needs an Rng.
template <class S>
Tensor<S> reverse_step_to(const Tensor<S>& y_t, int64_t t, int64_t t_next,
                          const Tensor<S>& y0_hat, const NoiseSchedule& schedule, double eta = 0.0,
                          Rng* rng = nullptr);

// Single-step convenience: t -> t-1.
template <class S>
Tensor<S> reverse_step(const Tensor<S>& y_t, int64_t t, const Tensor<S>& y0_hat,
                       const NoiseSchedule& schedule, double eta = 0.0, Rng* rng = nullptr);

// Denoiser closure: maps (concat(y_t, prior) [2,D,H,W], t) to a y0 estimate
// [1,D,H,W]. Context conditioning is bound inside the closure.
template <class S>
using DenoiseFn = std::function<Tensor<S>(const Tensor<S>&, int64_t)>;

struct SampleOptions {
  int64_t num_iterations = 4;
  uint64_t seed = 0;
  bool use_online_filter = true;
  ProjectionMode filter_mode = ProjectionMode::OneHot;
  double eta = 0.0;
};

// Iterative conditional reverse process: starts from y_T ~ N(0, I), visits
// num_iterations timesteps spaced uniformly over [1, T] descending, filters
// each y0 estimate before the update, and returns the final (re-normalized)
// estimate.
template <class S>
ProbabilityVolumeT<S> sample(const ProbabilityVolumeT<S>& prior, const HypothesisPlanes& planes,
                             const DenoiseFn<S>& model, const NoiseSchedule& schedule,
                             const SampleOptions& opts);

// The timestep ladder used by sample(): T down to ceil(T/S).
std::vector<int64_t> sample_timesteps(int64_t T, int64_t num_iterations);

}  // namespace vpd
