#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <utility>
#include <vector>

#include "vpd/common.hpp"
#include "vpd/rng.hpp"

namespace vpd {

// Dynamic tape-based reverse-mode autodiff over dense row-major arrays.
// Recording is on by default; wrap inference paths in NoGradGuard.
struct GradMode {
  static bool& flag() {
    thread_local bool enabled = true;
    return enabled;
  }
  static bool enabled() { return flag(); }
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::flag()) { GradMode::flag() = false; }
  ~NoGradGuard() { GradMode::flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

// Value-semantics handle onto a graph node. Copies share the node.
template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : n_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<S> values) {
    require(!shape.empty(), "Tensor: rank-0 shapes not supported");
    require(::vpd::numel(shape) == static_cast<int64_t>(values.size()),
            "Tensor: shape " + shape_str(shape) + " does not match value count");
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor full(const Shape& shape, S v) { return from(shape, std::vector<S>(::vpd::numel(shape), v)); }
  static Tensor zeros(const Shape& shape) { return full(shape, S(0)); }
  static Tensor ones(const Shape& shape) { return full(shape, S(1)); }
  static Tensor scalar(S v) { return from({1}, {v}); }

  static Tensor randn(const Shape& shape, Rng& rng) {
    std::vector<S> v(::vpd::numel(shape));
    for (auto& x : v) x = static_cast<S>(rng.normal());
    return from(shape, std::move(v));
  }

  static Tensor uniform(const Shape& shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    std::vector<S> v(::vpd::numel(shape));
    for (auto& x : v) x = static_cast<S>(rng.uniform(lo, hi));
    return from(shape, std::move(v));
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }
  int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(n_->shape.size()); }

  std::vector<S>& data() { return n_->value; }
  const std::vector<S>& data() const { return n_->value; }

  S item() const {
    require(numel() == 1, "item(): tensor has " + std::to_string(numel()) + " elements");
    return n_->value[0];
  }

  S at(std::initializer_list<int64_t> idx) const {
    auto st = strides_of(n_->shape);
    int64_t off = 0;
    size_t d = 0;
    for (int64_t i : idx) off += i * st[d++];
    return n_->value[static_cast<size_t>(off)];
  }

  Tensor& set_requires_grad(bool b = true) {
    n_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return n_->requires_grad; }

  const std::vector<S>& grad() const {
    require(n_->grad.size() == n_->value.size(), "grad(): no gradient recorded; call backward() first");
    return n_->grad;
  }

  void zero_grad() { n_->grad.assign(n_->value.size(), S(0)); }

  // Seeds this tensor's gradient with ones and walks the tape once in
  // reverse topological order.
  void backward() const;

  // Same values, detached from the tape.
  Tensor detach() const {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = n_->shape;
    n->value = n_->value;
    return Tensor(std::move(n));
  }

  std::shared_ptr<TensorNode<S>> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<S>> n_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// Thread count used by the matmul/conv kernels. Defaults to
// min(hardware_concurrency, 4); override with env VPD_NUM_THREADS.
int num_threads();
void set_num_threads(int n);

// ---- elementwise ----
template <class S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <class S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <class S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <class S> Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b);
template <class S> Tensor<S> add_scalar(const Tensor<S>& a, S c);
template <class S> Tensor<S> mul_scalar(const Tensor<S>& a, S c);
template <class S> Tensor<S> neg(const Tensor<S>& a);
template <class S> Tensor<S> exp(const Tensor<S>& a);
template <class S> Tensor<S> log(const Tensor<S>& a);
template <class S> Tensor<S> sqrt(const Tensor<S>& a);
template <class S> Tensor<S> abs(const Tensor<S>& a);
template <class S> Tensor<S> square(const Tensor<S>& a);
template <class S> Tensor<S> pow_scalar(const Tensor<S>& a, double p);
template <class S> Tensor<S> sigmoid(const Tensor<S>& a);
template <class S> Tensor<S> silu(const Tensor<S>& a);
template <class S> Tensor<S> clamp(const Tensor<S>& a, double lo, double hi);

// ---- shape ----
template <class S> Tensor<S> reshape(const Tensor<S>& a, Shape shape);
template <class S> Tensor<S> transpose2d(const Tensor<S>& a);
template <class S> Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis);
template <class S> Tensor<S> slice(const Tensor<S>& a, int axis, int64_t start, int64_t len);

// ---- reductions ----
template <class S> Tensor<S> sum_all(const Tensor<S>& a);
template <class S> Tensor<S> mean_all(const Tensor<S>& a);
template <class S> Tensor<S> sum_axis(const Tensor<S>& a, int axis, bool keepdim = true);
template <class S> Tensor<S> mean_axis(const Tensor<S>& a, int axis, bool keepdim = true);
// Max values along an axis; ties resolve to the lowest index, and the
// gradient is routed to that element only.
template <class S> Tensor<S> max_axis(const Tensor<S>& a, int axis, bool keepdim = true);
template <class S> std::vector<int64_t> argmax_axis(const Tensor<S>& a, int axis);

template <class S> Tensor<S> softmax_axis(const Tensor<S>& a, int axis);

// ---- linear algebra ----
template <class S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);

// ---- convolution / resampling ----
// input [Ci,D,H,W], weight [Co,Ci,k,k,k], bias [Co] (optional, pass undefined
// Tensor to skip). Zero padding.
template <class S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int stride, int pad);

enum class PadMode { Zero, Clamp };

// input [Ci,H,W], weight [Co,Ci,k,k], bias [Co] (optional). Stride 1.
template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int pad, PadMode pad_mode = PadMode::Zero);

// Deformable 2D convolution, stride 1, pad k/2, bilinear sampling with border
// clamping. offsets [2*k*k,H,W] hold (dy,dx) pairs per kernel tap. Shares the
// im2col+GEMM path with conv2d so zero offsets reproduce conv2d(PadMode::Clamp)
// bitwise.
template <class S>
Tensor<S> deform_conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                        const Tensor<S>& offsets);

// [C,D,H,W] -> [C,fD,fH,fW], trilinear, half-pixel centers.
template <class S> Tensor<S> upsample_trilinear(const Tensor<S>& a, int factor);

// Group normalization over channel-major input [C, ...]; gamma/beta are
// per-channel. Fused forward/backward (one tape node).
template <class S>
Tensor<S> group_norm(const Tensor<S>& x, int64_t groups, const Tensor<S>& gamma,
                     const Tensor<S>& beta, double eps = 1e-5);

// ---- verification ----
// Max over coordinates of |analytic - central difference| /
// (|analytic| + |central| + 1e-12). f must return a scalar tensor.
template <class S>
double grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& point,
                  double eps);

// operator sugar (same-shape or broadcastable)
template <class S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S> Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <class S> Tensor<S> operator/(const Tensor<S>& a, const Tensor<S>& b) { return div(a, b); }

}  // namespace vpd
