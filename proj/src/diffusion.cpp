#include "vpd/diffusion.hpp"

#include <cmath>
#include <sstream>

namespace vpd {

NoiseSchedule NoiseSchedule::make(int64_t T, ScheduleKind kind, double beta_start,
                                  double beta_end) {
  require(T >= 1, "make_schedule: T must be >= 1");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T_ = T;
  s.betas_.resize(static_cast<size_t>(T));
  if (kind == ScheduleKind::Linear) {
    for (int64_t t = 1; t <= T; ++t) {
      double f = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
      s.betas_[t - 1] = beta_start + (beta_end - beta_start) * f;
    }
  } else {
    // squared-cosine alpha_bar; betas derived from its ratio and clipped
    const double off = 0.008;
    auto f = [&](double t) {
      double v = std::cos((t / static_cast<double>(T) + off) / (1.0 + off) * 3.14159265358979323846 / 2.0);
      return v * v;
    };
    double prev = 1.0;
    for (int64_t t = 1; t <= T; ++t) {
      double ab = f(static_cast<double>(t)) / f(0.0);
      double beta = 1.0 - ab / prev;
      s.betas_[t - 1] = std::min(std::max(beta, 1e-8), 0.999);
      prev = ab;
    }
  }
  s.alphas_.resize(static_cast<size_t>(T));
  s.alpha_bars_.resize(static_cast<size_t>(T));
  double prod = 1.0;
  for (int64_t t = 1; t <= T; ++t) {
    s.alphas_[t - 1] = 1.0 - s.betas_[t - 1];
    prod *= s.alphas_[t - 1];
    s.alpha_bars_[t - 1] = prod;
  }
  return s;
}

std::string NoiseSchedule::to_csv() const {
  std::ostringstream os;
  os << "t,alpha,alpha_bar\n";
  os.precision(12);
  for (int64_t t = 1; t <= T_; ++t)
    os << t << ',' << alpha(t) << ',' << alpha_bar(t) << '\n';
  return os.str();
}

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "cosine") return ScheduleKind::Cosine;
  fail("unknown schedule kind: " + s);
}

std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

template <class S>
Tensor<S> forward_sample(const Tensor<S>& y0, int64_t t, const NoiseSchedule& schedule,
                         const Tensor<S>& noise) {
  require(t >= 1 && t <= schedule.steps(),
          "forward_sample: t=" + std::to_string(t) + " outside [1," +
              std::to_string(schedule.steps()) + "]");
  check_same_shape(y0.shape(), noise.shape(), "forward_sample");
  const double ab = schedule.alpha_bar(t);
  return add(mul_scalar(y0, static_cast<S>(std::sqrt(ab))),
             mul_scalar(noise, static_cast<S>(std::sqrt(1.0 - ab))));
}

template <class S>
Tensor<S> reverse_step_to(const Tensor<S>& y_t, int64_t t, int64_t t_next,
                          const Tensor<S>& y0_hat, const NoiseSchedule& schedule, double eta,
                          Rng* rng) {
  require(t >= 1 && t <= schedule.steps(),
          t == 0 ? std::string("reverse_step: chain already terminated (t = 0)")
                 : "reverse_step: t=" + std::to_string(t) + " outside [1," +
                       std::to_string(schedule.steps()) + "]");
  require(t_next >= 0 && t_next < t, "reverse_step: t_next must lie in [0, t)");
  check_same_shape(y_t.shape(), y0_hat.shape(), "reverse_step");
  const double ab_t = schedule.alpha_bar(t);
  const double ab_n = schedule.alpha_bar(t_next);
  // eps_hat = (y_t - sqrt(ab_t) * y0_hat) / sqrt(1 - ab_t)
  auto eps_hat = mul_scalar(sub(y_t, mul_scalar(y0_hat, static_cast<S>(std::sqrt(ab_t)))),
                            static_cast<S>(1.0 / std::sqrt(1.0 - ab_t)));
  double sigma = 0.0;
  if (eta > 0.0) {
    sigma = eta * std::sqrt((1.0 - ab_n) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_n);
  }
  double eps_coef = std::sqrt(std::max(0.0, 1.0 - ab_n - sigma * sigma));
  auto out = add(mul_scalar(y0_hat, static_cast<S>(std::sqrt(ab_n))),
                 mul_scalar(eps_hat, static_cast<S>(eps_coef)));
  if (sigma > 0.0) {
    require(rng != nullptr, "reverse_step: eta > 0 requires an Rng");
    auto z = Tensor<S>::randn(y_t.shape(), *rng);
    out = add(out, mul_scalar(z, static_cast<S>(sigma)));
  }
  return out;
}

template <class S>
Tensor<S> reverse_step(const Tensor<S>& y_t, int64_t t, const Tensor<S>& y0_hat,
                       const NoiseSchedule& schedule, double eta, Rng* rng) {
  require(t != 0, "reverse_step: chain already terminated (t = 0)");
  return reverse_step_to(y_t, t, t - 1, y0_hat, schedule, eta, rng);
}

std::vector<int64_t> sample_timesteps(int64_t T, int64_t num_iterations) {
  require(num_iterations >= 1, "sample: num_iterations must be >= 1");
  std::vector<int64_t> ts(static_cast<size_t>(num_iterations));
  for (int64_t k = 0; k < num_iterations; ++k) ts[k] = T - (k * T) / num_iterations;
  return ts;
}

template <class S>
ProbabilityVolumeT<S> sample(const ProbabilityVolumeT<S>& prior, const HypothesisPlanes& planes,
                             const DenoiseFn<S>& model, const NoiseSchedule& schedule,
                             const SampleOptions& opts) {
  NoGradGuard ng;
  require(prior.values.defined() && prior.values.rank() == 4 && prior.values.dim(0) == 1,
          "sample: prior must be [1,D,H,W]");
  auto ts = sample_timesteps(schedule.steps(), opts.num_iterations);
  Rng rng(opts.seed);
  DiffusionState<S> state;
  state.rng_seed = opts.seed;
  state.t = schedule.steps();
  state.y = Tensor<S>::randn(prior.values.shape(), rng);
  ProbabilityVolumeT<S> estimate;
  for (size_t k = 0; k < ts.size(); ++k) {
    const int64_t t = ts[k];
    const int64_t t_next = (k + 1 < ts.size()) ? ts[k + 1] : 0;
    auto y0_hat = model(concat<S>({state.y, prior.values}, 0), t);
    require(y0_hat.defined() && y0_hat.shape() == prior.values.shape(),
            "sample: model output shape " +
                (y0_hat.defined() ? shape_str(y0_hat.shape()) : std::string("(undefined)")) +
                " does not match prior " + shape_str(prior.values.shape()));
    estimate = renormalize(y0_hat);
    if (opts.use_online_filter) estimate = online_filter(estimate, planes, opts.filter_mode);
    state.y = reverse_step_to(state.y, t, t_next, estimate.values, schedule, opts.eta,
                              opts.eta > 0.0 ? &rng : nullptr);
    state.t = t_next;
  }
  return estimate;
}

#define VPD_INSTANTIATE_DIFFUSION(S)                                                       \
  template Tensor<S> forward_sample<S>(const Tensor<S>&, int64_t, const NoiseSchedule&,    \
                                       const Tensor<S>&);                                  \
  template Tensor<S> reverse_step_to<S>(const Tensor<S>&, int64_t, int64_t,                \
                                        const Tensor<S>&, const NoiseSchedule&, double,    \
                                        Rng*);                                             \
  template Tensor<S> reverse_step<S>(const Tensor<S>&, int64_t, const Tensor<S>&,          \
                                     const NoiseSchedule&, double, Rng*);                  \
  template ProbabilityVolumeT<S> sample<S>(const ProbabilityVolumeT<S>&,                   \
                                           const HypothesisPlanes&, const DenoiseFn<S>&,   \
                                           const NoiseSchedule&, const SampleOptions&);

VPD_INSTANTIATE_DIFFUSION(float)
VPD_INSTANTIATE_DIFFUSION(double)

}  // namespace vpd
