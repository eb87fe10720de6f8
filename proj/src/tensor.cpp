#define EIGEN_DONT_PARALLELIZE
#include "vpd/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <unordered_set>

namespace vpd {

namespace {

std::atomic<int> g_threads{0};

int default_threads() {
  if (const char* env = std::getenv("VPD_NUM_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return std::min(v, 64);
  }
  unsigned hc = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hc, 1u, 4u));
}

// f(begin, end) over disjoint chunks. Each output element is produced by
// exactly one chunk, so results do not depend on the thread count.
template <class F>
void parallel_chunks(int64_t n, int nt, F&& f) {
  nt = static_cast<int>(std::min<int64_t>(nt, n));
  if (nt <= 1 || n == 0) {
    if (n > 0) f(int64_t(0), n);
    return;
  }
  int64_t chunk = (n + nt - 1) / nt;
  std::vector<std::thread> workers;
  workers.reserve(static_cast<size_t>(nt - 1));
  for (int i = 1; i < nt; ++i) {
    int64_t b = i * chunk, e = std::min<int64_t>(n, b + chunk);
    if (b >= e) break;
    workers.emplace_back([&f, b, e] { f(b, e); });
  }
  f(int64_t(0), std::min<int64_t>(chunk, n));
  for (auto& w : workers) w.join();
}

Shape pad_rank(const Shape& s, size_t r) {
  Shape p(r, 1);
  std::copy(s.begin(), s.end(), p.begin() + (r - s.size()));
  return p;
}

std::vector<int64_t> bcast_strides(const Shape& padded, const Shape& out) {
  auto st = strides_of(padded);
  std::vector<int64_t> r(out.size());
  for (size_t i = 0; i < out.size(); ++i) r[i] = (padded[i] == 1 && out[i] != 1) ? 0 : st[i];
  return r;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t av = (i < r - a.size()) ? 1 : a[i - (r - a.size())];
    int64_t bv = (i < r - b.size()) ? 1 : b[i - (r - b.size())];
    if (av != bv && av != 1 && bv != 1)
      fail(std::string(op) + ": shapes not broadcastable " + shape_str(a) + " vs " + shape_str(b));
    out[i] = std::max(av, bv);
  }
  return out;
}

// Calls f(out_index, a_index, b_index) over every element of `out`.
template <class F>
void broadcast_iter(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const size_t r = out.size();
  Shape ap = pad_rank(a, r), bp = pad_rank(b, r);
  const int64_t n = numel(out);
  if (ap == out && bp == out) {
    for (int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  auto ast = bcast_strides(ap, out);
  auto bst = bcast_strides(bp, out);
  std::vector<int64_t> idx(r, 0);
  int64_t ai = 0, bi = 0, o = 0;
  const int64_t inner = out[r - 1];
  const int64_t ainc = ast[r - 1], binc = bst[r - 1];
  while (o < n) {
    for (int64_t j = 0; j < inner; ++j) f(o + j, ai + j * ainc, bi + j * binc);
    o += inner;
    int d = static_cast<int>(r) - 2;
    while (d >= 0) {
      idx[d]++;
      ai += ast[d];
      bi += bst[d];
      if (idx[d] < out[d]) break;
      ai -= ast[d] * out[d];
      bi -= bst[d] * out[d];
      idx[d] = 0;
      --d;
    }
  }
}

template <class S>
bool track(std::initializer_list<const Tensor<S>*> parents) {
  if (!GradMode::enabled()) return false;
  for (auto* p : parents)
    if (p->defined() && p->requires_grad()) return true;
  return false;
}

template <class S>
void attach(Tensor<S>& out, std::initializer_list<const Tensor<S>*> parents,
            std::function<void()> fn) {
  auto n = out.node();
  n->requires_grad = true;
  for (auto* p : parents)
    if (p->defined()) n->parents.push_back(p->node());
  n->backward_fn = std::move(fn);
}

// ---- generic binary/unary scaffolding ----

// fwd(x, y) -> out; ga(g, x, y), gb(g, x, y) -> gradient contributions.
template <class S, class FwdF, class GaF, class GbF>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b, FwdF fwd, GaF ga,
                    GbF gb) {
  Shape os = broadcast_shape(a.shape(), b.shape(), name);
  std::vector<S> ov(static_cast<size_t>(numel(os)));
  {
    const auto& av = a.data();
    const auto& bv = b.data();
    broadcast_iter(os, a.shape(), b.shape(),
                   [&](int64_t o, int64_t ai, int64_t bi) { ov[o] = fwd(av[ai], bv[bi]); });
  }
  auto out = Tensor<S>::from(os, std::move(ov));
  if (track<S>({&a, &b})) {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    attach(out, {&a, &b}, [an, bn, on, ga, gb]() {
      const auto& g = on->grad;
      if (an->requires_grad) {
        an->ensure_grad();
        broadcast_iter(on->shape, an->shape, bn->shape, [&](int64_t o, int64_t ai, int64_t bi) {
          an->grad[ai] += ga(g[o], an->value[ai], bn->value[bi]);
        });
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        broadcast_iter(on->shape, an->shape, bn->shape, [&](int64_t o, int64_t ai, int64_t bi) {
          bn->grad[bi] += gb(g[o], an->value[ai], bn->value[bi]);
        });
      }
    });
  }
  return out;
}

// fwd(x) -> y; bwd(g, x, y) -> gradient contribution.
template <class S, class FwdF, class BwdF>
Tensor<S> unary_op(const Tensor<S>& a, FwdF fwd, BwdF bwd) {
  std::vector<S> ov(a.data().size());
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(a.data()[i]);
  auto out = Tensor<S>::from(a.shape(), std::move(ov));
  if (track<S>({&a})) {
    auto an = a.node();
    auto* on = out.node().get();
    attach(out, {&a}, [an, on, bwd]() {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += bwd(on->grad[i], an->value[i], on->value[i]);
    });
  }
  return out;
}

template <class S>
S stable_sigmoid(S x) {
  if (x >= 0) {
    S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace

int num_threads() {
  int t = g_threads.load();
  if (t > 0) return t;
  int def = default_threads();
  g_threads.store(def);
  return def;
}

void set_num_threads(int n) { g_threads.store(std::max(1, n)); }

// ---- backward ----

template <class S>
void Tensor<S>::backward() const {
  require(defined(), "backward(): undefined tensor");
  // Post-order DFS: every reachable node appended exactly once, root last.
  std::vector<std::shared_ptr<TensorNode<S>>> order;
  std::unordered_set<TensorNode<S>*> visited;
  std::vector<std::pair<std::shared_ptr<TensorNode<S>>, size_t>> stack;
  visited.insert(n_.get());
  stack.push_back({n_, 0});
  while (!stack.empty()) {
    auto node = stack.back().first;
    size_t ci = stack.back().second;
    if (ci < node->parents.size()) {
      stack.back().second++;
      auto p = node->parents[ci];
      if (visited.insert(p.get()).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (auto& n : order) n->ensure_grad();
  std::fill(n_->grad.begin(), n_->grad.end(), S(1));
  for (size_t i = order.size(); i-- > 0;) {
    if (order[i]->backward_fn) order[i]->backward_fn();
  }
}

// ---- elementwise ----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return g; });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S g, S, S) { return g; },
      [](S g, S, S) { return -g; });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S g, S, S y) { return g * y; },
      [](S g, S x, S) { return g * x; });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>(
      "div", a, b, [](S x, S y) { return x / y; }, [](S g, S, S y) { return g / y; },
      [](S g, S x, S y) { return -g * x / (y * y); });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return unary_op<S>(
      a, [c](S x) { return x + c; }, [](S g, S, S) { return g; });
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  return unary_op<S>(
      a, [c](S x) { return x * c; }, [c](S g, S, S) { return g * c; });
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
  return mul_scalar(a, S(-1));
}

template <class S>
Tensor<S> exp(const Tensor<S>& a) {
  return unary_op<S>(
      a, [](S x) { return std::exp(x); }, [](S g, S, S y) { return g * y; });
}

template <class S>
Tensor<S> log(const Tensor<S>& a) {
  return unary_op<S>(
      a, [](S x) { return std::log(x); }, [](S g, S x, S) { return g / x; });
}

template <class S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return unary_op<S>(
      a, [](S x) { return std::sqrt(x); }, [](S g, S, S y) { return g / (S(2) * y); });
}

template <class S>
Tensor<S> abs(const Tensor<S>& a) {
  return unary_op<S>(
      a, [](S x) { return std::abs(x); },
      [](S g, S x, S) { return x > 0 ? g : (x < 0 ? -g : S(0)); });
}

template <class S>
Tensor<S> square(const Tensor<S>& a) {
  return unary_op<S>(
      a, [](S x) { return x * x; }, [](S g, S x, S) { return S(2) * g * x; });
}

template <class S>
Tensor<S> pow_scalar(const Tensor<S>& a, double p) {
  S sp = static_cast<S>(p);
  return unary_op<S>(
      a, [sp](S x) { return std::pow(x, sp); },
      [sp](S g, S x, S) { return g * sp * std::pow(x, sp - S(1)); });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return unary_op<S>(
      a, [](S x) { return stable_sigmoid(x); }, [](S g, S, S y) { return g * y * (S(1) - y); });
}

template <class S>
Tensor<S> silu(const Tensor<S>& a) {
  return unary_op<S>(
      a, [](S x) { return x * stable_sigmoid(x); },
      [](S g, S x, S) {
        S s = stable_sigmoid(x);
        return g * s * (S(1) + x * (S(1) - s));
      });
}

template <class S>
Tensor<S> clamp(const Tensor<S>& a, double lo, double hi) {
  S l = static_cast<S>(lo), h = static_cast<S>(hi);
  return unary_op<S>(
      a, [l, h](S x) { return std::min(std::max(x, l), h); },
      [l, h](S g, S x, S) { return (x >= l && x <= h) ? g : S(0); });
}

// ---- shape ----

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  require(numel(shape) == a.numel(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  auto out = Tensor<S>::from(std::move(shape), a.data());
  if (track<S>({&a})) {
    auto an = a.node();
    auto* on = out.node().get();
    attach(out, {&a}, [an, on]() {
      an->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <class S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  require(a.rank() == 2, "transpose2d: expected rank 2, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  std::vector<S> ov(static_cast<size_t>(m * n));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) ov[j * m + i] = a.data()[i * n + j];
  auto out = Tensor<S>::from({n, m}, std::move(ov));
  if (track<S>({&a})) {
    auto an = a.node();
    auto* on = out.node().get();
    attach(out, {&a}, [an, on, m, n]() {
      an->ensure_grad();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
    });
  }
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  size_t r = s0.size();
  require(axis >= 0 && axis < static_cast<int>(r), "concat: bad axis");
  Shape os = s0;
  int64_t total = 0;
  for (const auto& p : parts) {
    require(p.shape().size() == r, "concat: rank mismatch");
    for (size_t d = 0; d < r; ++d)
      if (d != static_cast<size_t>(axis))
        require(p.shape()[d] == s0[d], "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                           shape_str(s0));
    total += p.shape()[axis];
  }
  os[axis] = total;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (size_t d = axis + 1; d < r; ++d) inner *= s0[d];

  std::vector<S> ov(static_cast<size_t>(numel(os)));
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t chunk = p.shape()[axis] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(ov.data() + o * total * inner + off, p.data().data() + o * chunk,
                  sizeof(S) * static_cast<size_t>(chunk));
    off += chunk;
  }
  auto out = Tensor<S>::from(os, std::move(ov));

  std::vector<const Tensor<S>*> ptrs;
  bool needs = GradMode::enabled();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (needs && any) {
    std::vector<std::shared_ptr<TensorNode<S>>> pn;
    for (const auto& p : parts) pn.push_back(p.node());
    auto* on = out.node().get();
    auto n = out.node();
    n->requires_grad = true;
    n->parents = pn;
    n->backward_fn = [pn, on, outer, inner, total]() {
      int64_t off2 = 0;
      for (auto& p : pn) {
        int64_t chunk = (static_cast<int64_t>(p->value.size()) / outer);
        if (p->requires_grad) {
          p->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            const S* src = on->grad.data() + o * total * inner + off2;
            S* dst = p->grad.data() + o * chunk;
            for (int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
        off2 += chunk;
      }
    };
  }
  return out;
}

template <class S>
Tensor<S> slice(const Tensor<S>& a, int axis, int64_t start, int64_t len) {
  const Shape& s = a.shape();
  require(axis >= 0 && axis < a.rank(), "slice: bad axis");
  require(start >= 0 && len >= 1 && start + len <= s[axis], "slice: range out of bounds");
  Shape os = s;
  os[axis] = len;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s[d];
  for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  int64_t A = s[axis];
  std::vector<S> ov(static_cast<size_t>(numel(os)));
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(ov.data() + o * len * inner, a.data().data() + (o * A + start) * inner,
                sizeof(S) * static_cast<size_t>(len * inner));
  auto out = Tensor<S>::from(os, std::move(ov));
  if (track<S>({&a})) {
    auto an = a.node();
    auto* on = out.node().get();
    attach(out, {&a}, [an, on, outer, inner, A, start, len]() {
      an->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const S* src = on->grad.data() + o * len * inner;
        S* dst = an->grad.data() + (o * A + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// ---- reductions ----

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
  S acc = 0;
  for (S v : a.data()) acc += v;
  auto out = Tensor<S>::scalar(acc);
  if (track<S>({&a})) {
    auto an = a.node();
    auto* on = out.node().get();
    attach(out, {&a}, [an, on]() {
      an->ensure_grad();
      S g = on->grad[0];
      for (auto& gv : an->grad) gv += g;
    });
  }
  return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return mul_scalar(sum_all(a), S(1) / static_cast<S>(a.numel()));
}

namespace {
struct AxisDims {
  int64_t outer, axis, inner;
};

AxisDims axis_dims(const Shape& s, int axis) {
  AxisDims d{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) d.outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) d.inner *= s[i];
  return d;
}

Shape reduced_shape(const Shape& s, int axis, bool keepdim) {
  Shape os = s;
  if (keepdim) {
    os[axis] = 1;
  } else {
    os.erase(os.begin() + axis);
    if (os.empty()) os = {1};
  }
  return os;
}
}  // namespace

template <class S>
Tensor<S> sum_axis(const Tensor<S>& a, int axis, bool keepdim) {
  require(axis >= 0 && axis < a.rank(), "sum_axis: bad axis");
  auto d = axis_dims(a.shape(), axis);
  std::vector<S> ov(static_cast<size_t>(d.outer * d.inner), S(0));
  const auto& av = a.data();
  for (int64_t o = 0; o < d.outer; ++o)
    for (int64_t k = 0; k < d.axis; ++k) {
      const S* src = av.data() + (o * d.axis + k) * d.inner;
      S* dst = ov.data() + o * d.inner;
      for (int64_t i = 0; i < d.inner; ++i) dst[i] += src[i];
    }
  auto out = Tensor<S>::from(reduced_shape(a.shape(), axis, keepdim), std::move(ov));
  if (track<S>({&a})) {
    auto an = a.node();
    auto* on = out.node().get();
    attach(out, {&a}, [an, on, d]() {
      an->ensure_grad();
      for (int64_t o = 0; o < d.outer; ++o)
        for (int64_t k = 0; k < d.axis; ++k) {
          const S* g = on->grad.data() + o * d.inner;
          S* dst = an->grad.data() + (o * d.axis + k) * d.inner;
          for (int64_t i = 0; i < d.inner; ++i) dst[i] += g[i];
        }
    });
  }
  return out;
}

template <class S>
Tensor<S> mean_axis(const Tensor<S>& a, int axis, bool keepdim) {
  S scale = S(1) / static_cast<S>(a.shape()[axis]);
  return mul_scalar(sum_axis(a, axis, keepdim), scale);
}

template <class S>
std::vector<int64_t> argmax_axis(const Tensor<S>& a, int axis) {
  require(axis >= 0 && axis < a.rank(), "argmax_axis: bad axis");
  auto d = axis_dims(a.shape(), axis);
  std::vector<int64_t> idx(static_cast<size_t>(d.outer * d.inner), 0);
  const auto& av = a.data();
  for (int64_t o = 0; o < d.outer; ++o)
    for (int64_t i = 0; i < d.inner; ++i) {
      S best = av[o * d.axis * d.inner + i];
      int64_t bk = 0;
      for (int64_t k = 1; k < d.axis; ++k) {
        S v = av[(o * d.axis + k) * d.inner + i];
        if (v > best) {  // strict: ties keep the lowest index
          best = v;
          bk = k;
        }
      }
      idx[o * d.inner + i] = bk;
    }
  return idx;
}

template <class S>
Tensor<S> max_axis(const Tensor<S>& a, int axis, bool keepdim) {
  auto arg = argmax_axis(a, axis);
  auto d = axis_dims(a.shape(), axis);
  std::vector<S> ov(arg.size());
  for (int64_t o = 0; o < d.outer; ++o)
    for (int64_t i = 0; i < d.inner; ++i) {
      int64_t k = arg[o * d.inner + i];
      ov[o * d.inner + i] = a.data()[(o * d.axis + k) * d.inner + i];
    }
  auto out = Tensor<S>::from(reduced_shape(a.shape(), axis, keepdim), std::move(ov));
  if (track<S>({&a})) {
    auto an = a.node();
    auto* on = out.node().get();
    auto saved = std::make_shared<std::vector<int64_t>>(std::move(arg));
    attach(out, {&a}, [an, on, d, saved]() {
      an->ensure_grad();
      for (int64_t o = 0; o < d.outer; ++o)
        for (int64_t i = 0; i < d.inner; ++i) {
          int64_t k = (*saved)[o * d.inner + i];
          an->grad[(o * d.axis + k) * d.inner + i] += on->grad[o * d.inner + i];
        }
    });
  }
  return out;
}

template <class S>
Tensor<S> softmax_axis(const Tensor<S>& a, int axis) {
  require(axis >= 0 && axis < a.rank(), "softmax_axis: bad axis");
  auto d = axis_dims(a.shape(), axis);
  std::vector<S> ov(a.data().size());
  const auto& av = a.data();
  for (int64_t o = 0; o < d.outer; ++o)
    for (int64_t i = 0; i < d.inner; ++i) {
      const int64_t base = o * d.axis * d.inner + i;
      S mx = av[base];
      for (int64_t k = 1; k < d.axis; ++k) mx = std::max(mx, av[base + k * d.inner]);
      S denom = 0;
      for (int64_t k = 0; k < d.axis; ++k) {
        S e = std::exp(av[base + k * d.inner] - mx);
        ov[base + k * d.inner] = e;
        denom += e;
      }
      for (int64_t k = 0; k < d.axis; ++k) ov[base + k * d.inner] /= denom;
    }
  auto out = Tensor<S>::from(a.shape(), std::move(ov));
  if (track<S>({&a})) {
    auto an = a.node();
    auto* on = out.node().get();
    attach(out, {&a}, [an, on, d]() {
      an->ensure_grad();
      for (int64_t o = 0; o < d.outer; ++o)
        for (int64_t i = 0; i < d.inner; ++i) {
          const int64_t base = o * d.axis * d.inner + i;
          S dot = 0;
          for (int64_t k = 0; k < d.axis; ++k)
            dot += on->grad[base + k * d.inner] * on->value[base + k * d.inner];
          for (int64_t k = 0; k < d.axis; ++k) {
            S y = on->value[base + k * d.inner];
            an->grad[base + k * d.inner] += y * (on->grad[base + k * d.inner] - dot);
          }
        }
    });
  }
  return out;
}

// ---- GEMM ----

namespace {

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m,n] (+)= op(A) * op(B), row-major buffers. Column chunks are assigned to
// threads; every output element keeps a fixed accumulation order over k.
template <class S>
void gemm(const S* A, const S* B, S* C, int64_t m, int64_t k, int64_t n, bool transA, bool transB,
          bool accumulate) {
  int nt = (m * k * n >= (int64_t(1) << 20)) ? num_threads() : 1;
  auto work = [&](int64_t c0, int64_t c1) {
    Eigen::Map<MatRM<S>> Cm(C, m, n);
    auto Cb = Cm.middleCols(c0, c1 - c0);
    Eigen::Map<const MatRM<S>> Am(A, transA ? k : m, transA ? m : k);
    Eigen::Map<const MatRM<S>> Bm(B, transB ? n : k, transB ? k : n);
    if (!transA && !transB) {
      if (accumulate)
        Cb.noalias() += Am * Bm.middleCols(c0, c1 - c0);
      else
        Cb.noalias() = Am * Bm.middleCols(c0, c1 - c0);
    } else if (!transA && transB) {
      if (accumulate)
        Cb.noalias() += Am * Bm.middleRows(c0, c1 - c0).transpose();
      else
        Cb.noalias() = Am * Bm.middleRows(c0, c1 - c0).transpose();
    } else if (transA && !transB) {
      if (accumulate)
        Cb.noalias() += Am.transpose() * Bm.middleCols(c0, c1 - c0);
      else
        Cb.noalias() = Am.transpose() * Bm.middleCols(c0, c1 - c0);
    } else {
      if (accumulate)
        Cb.noalias() += Am.transpose() * Bm.middleRows(c0, c1 - c0).transpose();
      else
        Cb.noalias() = Am.transpose() * Bm.middleRows(c0, c1 - c0).transpose();
    }
  };
  parallel_chunks(n, nt, work);
}

}  // namespace

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: expected rank-2 operands, got " +
                                              shape_str(a.shape()) + " and " + shape_str(b.shape()));
  require(a.dim(1) == b.dim(0), "matmul: inner dimension mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> ov(static_cast<size_t>(m * n));
  gemm(a.data().data(), b.data().data(), ov.data(), m, k, n, false, false, false);
  auto out = Tensor<S>::from({m, n}, std::move(ov));
  if (track<S>({&a, &b})) {
    auto an = a.node();
    auto bn = b.node();
    auto* on = out.node().get();
    attach(out, {&a, &b}, [an, bn, on, m, k, n]() {
      if (an->requires_grad) {
        an->ensure_grad();
        // gA[m,k] += g[m,n] * B^T
        gemm(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k, false, true, true);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        // gB[k,n] += A^T * g[m,n]
        gemm(an->value.data(), on->grad.data(), bn->grad.data(), k, m, n, true, false, true);
      }
    });
  }
  return out;
}

// ---- conv3d ----

namespace {

template <class S>
void im2col_3d(const S* in, int64_t Ci, int64_t D, int64_t H, int64_t W, int k, int stride,
               int pad, int64_t Do, int64_t Ho, int64_t Wo, S* cols) {
  const int64_t Npos = Do * Ho * Wo;
  int64_t row = 0;
  for (int64_t ci = 0; ci < Ci; ++ci) {
    const S* src = in + ci * D * H * W;
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx, ++row) {
          S* dst = cols + row * Npos;
          int64_t p = 0;
          for (int64_t z = 0; z < Do; ++z) {
            int64_t iz = z * stride - pad + kz;
            for (int64_t y = 0; y < Ho; ++y) {
              int64_t iy = y * stride - pad + ky;
              if (iz < 0 || iz >= D || iy < 0 || iy >= H) {
                for (int64_t x = 0; x < Wo; ++x) dst[p++] = S(0);
                continue;
              }
              const S* srow = src + (iz * H + iy) * W;
              for (int64_t x = 0; x < Wo; ++x) {
                int64_t ix = x * stride - pad + kx;
                dst[p++] = (ix >= 0 && ix < W) ? srow[ix] : S(0);
              }
            }
          }
        }
  }
}

template <class S>
void col2im_3d(const S* cols, int64_t Ci, int64_t D, int64_t H, int64_t W, int k, int stride,
               int pad, int64_t Do, int64_t Ho, int64_t Wo, S* gin) {
  const int64_t Npos = Do * Ho * Wo;
  int64_t row = 0;
  for (int64_t ci = 0; ci < Ci; ++ci) {
    S* dst = gin + ci * D * H * W;
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx, ++row) {
          const S* src = cols + row * Npos;
          int64_t p = 0;
          for (int64_t z = 0; z < Do; ++z) {
            int64_t iz = z * stride - pad + kz;
            for (int64_t y = 0; y < Ho; ++y) {
              int64_t iy = y * stride - pad + ky;
              if (iz < 0 || iz >= D || iy < 0 || iy >= H) {
                p += Wo;
                continue;
              }
              S* drow = dst + (iz * H + iy) * W;
              for (int64_t x = 0; x < Wo; ++x, ++p) {
                int64_t ix = x * stride - pad + kx;
                if (ix >= 0 && ix < W) drow[ix] += src[p];
              }
            }
          }
        }
  }
}

}  // namespace

template <class S>
Tensor<S> conv3d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int stride, int pad) {
  require(input.rank() == 4, "conv3d: input must be [C,D,H,W], got " + shape_str(input.shape()));
  require(weight.rank() == 5, "conv3d: weight must be [Co,Ci,k,k,k], got " +
                                  shape_str(weight.shape()));
  const int64_t Ci = input.dim(0), D = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Co = weight.dim(0);
  require(weight.dim(1) == Ci, "conv3d: channel mismatch " + shape_str(input.shape()) + " vs " +
                                   shape_str(weight.shape()));
  const int k = static_cast<int>(weight.dim(2));
  require(weight.dim(3) == k && weight.dim(4) == k, "conv3d: kernel must be cubic");
  const int64_t Do = (D + 2 * pad - k) / stride + 1;
  const int64_t Ho = (H + 2 * pad - k) / stride + 1;
  const int64_t Wo = (W + 2 * pad - k) / stride + 1;
  require(Do >= 1 && Ho >= 1 && Wo >= 1, "conv3d: output would be empty");
  const int64_t K = Ci * k * k * k, Npos = Do * Ho * Wo;

  std::vector<S> cols(static_cast<size_t>(K * Npos));
  im2col_3d(input.data().data(), Ci, D, H, W, k, stride, pad, Do, Ho, Wo, cols.data());

  std::vector<S> ov(static_cast<size_t>(Co * Npos));
  gemm(weight.data().data(), cols.data(), ov.data(), Co, K, Npos, false, false, false);
  if (bias.defined()) {
    require(bias.numel() == Co, "conv3d: bias size mismatch");
    for (int64_t c = 0; c < Co; ++c) {
      S b = bias.data()[c];
      S* row = ov.data() + c * Npos;
      for (int64_t p = 0; p < Npos; ++p) row[p] += b;
    }
  }
  auto out = Tensor<S>::from({Co, Do, Ho, Wo}, std::move(ov));

  if (track<S>({&input, &weight, &bias})) {
    auto in = input.node();
    auto wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    auto* on = out.node().get();
    // cols are rebuilt in the backward pass; keeping them alive across the
    // whole tape costs far more in page traffic than the recompute
    attach(out, {&input, &weight, &bias},
           [in, wn, bn, on, Ci, D, H, W, k, stride, pad, Do, Ho, Wo, Co, K, Npos]() {
             if (wn->requires_grad) {
               wn->ensure_grad();
               std::vector<S> cols(static_cast<size_t>(K * Npos));
               im2col_3d(in->value.data(), Ci, D, H, W, k, stride, pad, Do, Ho, Wo, cols.data());
               gemm(on->grad.data(), cols.data(), wn->grad.data(), Co, Npos, K, false, true, true);
             }
             if (bn && bn->requires_grad) {
               bn->ensure_grad();
               for (int64_t c = 0; c < Co; ++c) {
                 S acc = 0;
                 const S* row = on->grad.data() + c * Npos;
                 for (int64_t p = 0; p < Npos; ++p) acc += row[p];
                 bn->grad[c] += acc;
               }
             }
             if (in->requires_grad) {
               in->ensure_grad();
               std::vector<S> gcols(static_cast<size_t>(K * Npos));
               gemm(wn->value.data(), on->grad.data(), gcols.data(), K, Co, Npos, true, false,
                    false);
               col2im_3d(gcols.data(), Ci, D, H, W, k, stride, pad, Do, Ho, Wo, in->grad.data());
             }
           });
  }
  return out;
}

// ---- conv2d / deformable conv2d ----

namespace {

template <class S>
void im2col_2d(const S* in, int64_t Ci, int64_t H, int64_t W, int k, int pad, PadMode mode,
               S* cols) {
  const int64_t Npos = H * W;
  int64_t row = 0;
  for (int64_t ci = 0; ci < Ci; ++ci) {
    const S* src = in + ci * H * W;
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx, ++row) {
        S* dst = cols + row * Npos;
        int64_t p = 0;
        for (int64_t y = 0; y < H; ++y) {
          int64_t iy = y - pad + ky;
          for (int64_t x = 0; x < W; ++x, ++p) {
            int64_t ix = x - pad + kx;
            if (mode == PadMode::Clamp) {
              int64_t cy = std::clamp<int64_t>(iy, 0, H - 1);
              int64_t cx = std::clamp<int64_t>(ix, 0, W - 1);
              dst[p] = src[cy * W + cx];
            } else {
              dst[p] = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? src[iy * W + ix] : S(0);
            }
          }
        }
      }
  }
}

template <class S>
void col2im_2d(const S* cols, int64_t Ci, int64_t H, int64_t W, int k, int pad, PadMode mode,
               S* gin) {
  const int64_t Npos = H * W;
  int64_t row = 0;
  for (int64_t ci = 0; ci < Ci; ++ci) {
    S* dst = gin + ci * H * W;
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx, ++row) {
        const S* src = cols + row * Npos;
        int64_t p = 0;
        for (int64_t y = 0; y < H; ++y) {
          int64_t iy = y - pad + ky;
          for (int64_t x = 0; x < W; ++x, ++p) {
            int64_t ix = x - pad + kx;
            if (mode == PadMode::Clamp) {
              int64_t cy = std::clamp<int64_t>(iy, 0, H - 1);
              int64_t cx = std::clamp<int64_t>(ix, 0, W - 1);
              dst[cy * W + cx] += src[p];
            } else if (iy >= 0 && iy < H && ix >= 0 && ix < W) {
              dst[iy * W + ix] += src[p];
            }
          }
        }
      }
  }
}

}  // namespace

template <class S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias, int pad,
                 PadMode pad_mode) {
  require(input.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_str(input.shape()));
  require(weight.rank() == 4, "conv2d: weight must be [Co,Ci,k,k], got " +
                                  shape_str(weight.shape()));
  const int64_t Ci = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int64_t Co = weight.dim(0);
  require(weight.dim(1) == Ci, "conv2d: channel mismatch " + shape_str(input.shape()) + " vs " +
                                   shape_str(weight.shape()));
  const int k = static_cast<int>(weight.dim(2));
  require(weight.dim(3) == k, "conv2d: kernel must be square");
  require(2 * pad == k - 1, "conv2d: only same-size output supported (pad == (k-1)/2)");
  const int64_t K = Ci * k * k, Npos = H * W;

  std::vector<S> cols(static_cast<size_t>(K * Npos));
  im2col_2d(input.data().data(), Ci, H, W, k, pad, pad_mode, cols.data());

  std::vector<S> ov(static_cast<size_t>(Co * Npos));
  gemm(weight.data().data(), cols.data(), ov.data(), Co, K, Npos, false, false, false);
  if (bias.defined()) {
    require(bias.numel() == Co, "conv2d: bias size mismatch");
    for (int64_t c = 0; c < Co; ++c)
      for (int64_t p = 0; p < Npos; ++p) ov[c * Npos + p] += bias.data()[c];
  }
  auto out = Tensor<S>::from({Co, H, W}, std::move(ov));

  if (track<S>({&input, &weight, &bias})) {
    auto in = input.node();
    auto wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    auto* on = out.node().get();
    attach(out, {&input, &weight, &bias},
           [in, wn, bn, on, Ci, H, W, k, pad, pad_mode, Co, K, Npos]() {
             if (wn->requires_grad) {
               wn->ensure_grad();
               std::vector<S> cols(static_cast<size_t>(K * Npos));
               im2col_2d(in->value.data(), Ci, H, W, k, pad, pad_mode, cols.data());
               gemm(on->grad.data(), cols.data(), wn->grad.data(), Co, Npos, K, false, true, true);
             }
             if (bn && bn->requires_grad) {
               bn->ensure_grad();
               for (int64_t c = 0; c < Co; ++c) {
                 S acc = 0;
                 for (int64_t p = 0; p < Npos; ++p) acc += on->grad[c * Npos + p];
                 bn->grad[c] += acc;
               }
             }
             if (in->requires_grad) {
               in->ensure_grad();
               std::vector<S> gcols(static_cast<size_t>(K * Npos));
               gemm(wn->value.data(), on->grad.data(), gcols.data(), K, Co, Npos, true, false,
                    false);
               col2im_2d(gcols.data(), Ci, H, W, k, pad, pad_mode, in->grad.data());
             }
           });
  }
  return out;
}

namespace {

// Bilinear tap with border clamping. Returns the four corner indices/weights
// and the in-bounds flags needed for offset gradients.
struct BilinearTap {
  int64_t y0, y1, x0, x1;
  double fy, fx;
  bool clamped_y, clamped_x;
};

inline BilinearTap bilinear_tap(double py, double px, int64_t H, int64_t W) {
  BilinearTap t;
  t.clamped_y = py <= 0.0 || py >= static_cast<double>(H - 1);
  t.clamped_x = px <= 0.0 || px >= static_cast<double>(W - 1);
  py = std::clamp(py, 0.0, static_cast<double>(H - 1));
  px = std::clamp(px, 0.0, static_cast<double>(W - 1));
  t.y0 = static_cast<int64_t>(std::floor(py));
  t.x0 = static_cast<int64_t>(std::floor(px));
  t.y1 = std::min<int64_t>(t.y0 + 1, H - 1);
  t.x1 = std::min<int64_t>(t.x0 + 1, W - 1);
  t.fy = py - static_cast<double>(t.y0);
  t.fx = px - static_cast<double>(t.x0);
  return t;
}

}  // namespace


namespace {

// Bilinearly sampled im2col for the deformable convolution; shared by the
// forward pass and the weight-gradient rebuild.
template <class S>
void deform_im2col(const S* in, const S* off, int64_t Ci, int64_t H, int64_t W, int k, int pad,
                   S* cols) {
  const int64_t Npos = H * W;
  int64_t row = 0;
  for (int64_t ci = 0; ci < Ci; ++ci) {
    const S* src = in + ci * H * W;
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx, ++row) {
        const int tap = ky * k + kx;
        const S* offy = off + (2 * tap) * Npos;
        const S* offx = off + (2 * tap + 1) * Npos;
        S* dst = cols + row * Npos;
        int64_t p = 0;
        for (int64_t y = 0; y < H; ++y)
          for (int64_t x = 0; x < W; ++x, ++p) {
            double py = static_cast<double>(y - pad + ky) + static_cast<double>(offy[p]);
            double px = static_cast<double>(x - pad + kx) + static_cast<double>(offx[p]);
            auto t = bilinear_tap(py, px, H, W);
            S v00 = src[t.y0 * W + t.x0], v01 = src[t.y0 * W + t.x1];
            S v10 = src[t.y1 * W + t.x0], v11 = src[t.y1 * W + t.x1];
            dst[p] = static_cast<S>((1 - t.fy) * (1 - t.fx)) * v00 +
                     static_cast<S>((1 - t.fy) * t.fx) * v01 +
                     static_cast<S>(t.fy * (1 - t.fx)) * v10 + static_cast<S>(t.fy * t.fx) * v11;
          }
      }
  }
}

}  // namespace

template <class S>
Tensor<S> deform_conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                        const Tensor<S>& offsets) {
  require(input.rank() == 3, "deform_conv2d: input must be [C,H,W], got " +
                                 shape_str(input.shape()));
  require(weight.rank() == 4, "deform_conv2d: weight must be [Co,Ci,k,k]");
  const int64_t Ci = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int64_t Co = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  require(weight.dim(1) == Ci && weight.dim(3) == k, "deform_conv2d: weight shape mismatch " +
                                                         shape_str(weight.shape()));
  Shape want{2 * int64_t(k) * k, H, W};
  require(offsets.shape() == want, "deform_conv2d: offsets must be " + shape_str(want) +
                                       ", got " + shape_str(offsets.shape()));
  const int pad = k / 2;
  const int64_t K = Ci * k * k, Npos = H * W;

  std::vector<S> cols(static_cast<size_t>(K * Npos));
  deform_im2col(input.data().data(), offsets.data().data(), Ci, H, W, k, pad, cols.data());

  std::vector<S> ov(static_cast<size_t>(Co * Npos));
  gemm(weight.data().data(), cols.data(), ov.data(), Co, K, Npos, false, false, false);
  if (bias.defined()) {
    require(bias.numel() == Co, "deform_conv2d: bias size mismatch");
    for (int64_t c = 0; c < Co; ++c)
      for (int64_t p = 0; p < Npos; ++p) ov[c * Npos + p] += bias.data()[c];
  }
  auto out = Tensor<S>::from({Co, H, W}, std::move(ov));

  if (track<S>({&input, &weight, &bias, &offsets})) {
    auto in = input.node();
    auto wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    auto offn = offsets.node();
    auto* on = out.node().get();
    attach(out, {&input, &weight, &bias, &offsets},
           [in, wn, bn, offn, on, Ci, H, W, k, pad, Co, K, Npos]() {
             if (wn->requires_grad) {
               wn->ensure_grad();
               std::vector<S> cols(static_cast<size_t>(K * Npos));
               deform_im2col(in->value.data(), offn->value.data(), Ci, H, W, k, pad, cols.data());
               gemm(on->grad.data(), cols.data(), wn->grad.data(), Co, Npos, K, false, true, true);
             }
             if (bn && bn->requires_grad) {
               bn->ensure_grad();
               for (int64_t c = 0; c < Co; ++c) {
                 S acc = 0;
                 for (int64_t p = 0; p < Npos; ++p) acc += on->grad[c * Npos + p];
                 bn->grad[c] += acc;
               }
             }
             if (!in->requires_grad && !offn->requires_grad) return;
             std::vector<S> gcols(static_cast<size_t>(K * Npos));
             gemm(wn->value.data(), on->grad.data(), gcols.data(), K, Co, Npos, true, false,
                  false);
             if (in->requires_grad) in->ensure_grad();
             if (offn->requires_grad) offn->ensure_grad();
             int64_t row = 0;
             for (int64_t ci = 0; ci < Ci; ++ci) {
               const S* src = in->value.data() + ci * H * W;
               S* gin = in->requires_grad ? in->grad.data() + ci * H * W : nullptr;
               for (int ky = 0; ky < k; ++ky)
                 for (int kx = 0; kx < k; ++kx, ++row) {
                   const int tap = ky * k + kx;
                   const S* offy = offn->value.data() + (2 * tap) * Npos;
                   const S* offx = offn->value.data() + (2 * tap + 1) * Npos;
                   S* goffy = offn->requires_grad ? offn->grad.data() + (2 * tap) * Npos : nullptr;
                   S* goffx =
                       offn->requires_grad ? offn->grad.data() + (2 * tap + 1) * Npos : nullptr;
                   const S* g = gcols.data() + row * Npos;
                   int64_t p = 0;
                   for (int64_t y = 0; y < H; ++y)
                     for (int64_t x = 0; x < W; ++x, ++p) {
                       double py = static_cast<double>(y - pad + ky) + static_cast<double>(offy[p]);
                       double px = static_cast<double>(x - pad + kx) + static_cast<double>(offx[p]);
                       auto t = bilinear_tap(py, px, H, W);
                       double gv = static_cast<double>(g[p]);
                       if (gin) {
                         gin[t.y0 * W + t.x0] += static_cast<S>(gv * (1 - t.fy) * (1 - t.fx));
                         gin[t.y0 * W + t.x1] += static_cast<S>(gv * (1 - t.fy) * t.fx);
                         gin[t.y1 * W + t.x0] += static_cast<S>(gv * t.fy * (1 - t.fx));
                         gin[t.y1 * W + t.x1] += static_cast<S>(gv * t.fy * t.fx);
                       }
                       if (goffy) {
                         double v00 = src[t.y0 * W + t.x0], v01 = src[t.y0 * W + t.x1];
                         double v10 = src[t.y1 * W + t.x0], v11 = src[t.y1 * W + t.x1];
                         if (!t.clamped_y) {
                           double d = (1 - t.fx) * (v10 - v00) + t.fx * (v11 - v01);
                           goffy[p] += static_cast<S>(gv * d);
                         }
                         if (!t.clamped_x) {
                           double d = (1 - t.fy) * (v01 - v00) + t.fy * (v11 - v10);
                           goffx[p] += static_cast<S>(gv * d);
                         }
                       }
                     }
                 }
             }
           });
  }
  return out;
}

// ---- trilinear upsampling ----

namespace {
struct LerpIdx {
  int64_t i0, i1;
  double f;
};

std::vector<LerpIdx> lerp_table(int64_t n_in, int64_t n_out) {
  std::vector<LerpIdx> t(static_cast<size_t>(n_out));
  double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
  for (int64_t o = 0; o < n_out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
    int64_t i0 = static_cast<int64_t>(std::floor(src));
    t[o].i0 = i0;
    t[o].i1 = std::min(i0 + 1, n_in - 1);
    t[o].f = src - static_cast<double>(i0);
  }
  return t;
}
}  // namespace

template <class S>
Tensor<S> upsample_trilinear(const Tensor<S>& a, int factor) {
  require(a.rank() == 4, "upsample_trilinear: input must be [C,D,H,W]");
  require(factor >= 1, "upsample_trilinear: factor must be >= 1, got " + std::to_string(factor));
  const int64_t C = a.dim(0), D = a.dim(1), H = a.dim(2), W = a.dim(3);
  const int64_t Do = D * factor, Ho = H * factor, Wo = W * factor;
  auto tz = lerp_table(D, Do), ty = lerp_table(H, Ho), tx = lerp_table(W, Wo);
  std::vector<S> ov(static_cast<size_t>(C * Do * Ho * Wo));
  const auto& av = a.data();
  for (int64_t c = 0; c < C; ++c) {
    const S* src = av.data() + c * D * H * W;
    S* dst = ov.data() + c * Do * Ho * Wo;
    int64_t p = 0;
    for (int64_t z = 0; z < Do; ++z)
      for (int64_t y = 0; y < Ho; ++y)
        for (int64_t x = 0; x < Wo; ++x, ++p) {
          const auto &lz = tz[z], &ly = ty[y], &lx = tx[x];
          double v = 0;
          v += (1 - lz.f) * (1 - ly.f) * (1 - lx.f) * src[(lz.i0 * H + ly.i0) * W + lx.i0];
          v += (1 - lz.f) * (1 - ly.f) * lx.f * src[(lz.i0 * H + ly.i0) * W + lx.i1];
          v += (1 - lz.f) * ly.f * (1 - lx.f) * src[(lz.i0 * H + ly.i1) * W + lx.i0];
          v += (1 - lz.f) * ly.f * lx.f * src[(lz.i0 * H + ly.i1) * W + lx.i1];
          v += lz.f * (1 - ly.f) * (1 - lx.f) * src[(lz.i1 * H + ly.i0) * W + lx.i0];
          v += lz.f * (1 - ly.f) * lx.f * src[(lz.i1 * H + ly.i0) * W + lx.i1];
          v += lz.f * ly.f * (1 - lx.f) * src[(lz.i1 * H + ly.i1) * W + lx.i0];
          v += lz.f * ly.f * lx.f * src[(lz.i1 * H + ly.i1) * W + lx.i1];
          dst[p] = static_cast<S>(v);
        }
  }
  auto out = Tensor<S>::from({C, Do, Ho, Wo}, std::move(ov));
  if (track<S>({&a})) {
    auto an = a.node();
    auto* on = out.node().get();
    attach(out, {&a}, [an, on, C, D, H, W, Do, Ho, Wo, tz, ty, tx]() {
      an->ensure_grad();
      for (int64_t c = 0; c < C; ++c) {
        S* gin = an->grad.data() + c * D * H * W;
        const S* g = on->grad.data() + c * Do * Ho * Wo;
        int64_t p = 0;
        for (int64_t z = 0; z < Do; ++z)
          for (int64_t y = 0; y < Ho; ++y)
            for (int64_t x = 0; x < Wo; ++x, ++p) {
              const auto &lz = tz[z], &ly = ty[y], &lx = tx[x];
              double gv = static_cast<double>(g[p]);
              gin[(lz.i0 * H + ly.i0) * W + lx.i0] +=
                  static_cast<S>(gv * (1 - lz.f) * (1 - ly.f) * (1 - lx.f));
              gin[(lz.i0 * H + ly.i0) * W + lx.i1] +=
                  static_cast<S>(gv * (1 - lz.f) * (1 - ly.f) * lx.f);
              gin[(lz.i0 * H + ly.i1) * W + lx.i0] +=
                  static_cast<S>(gv * (1 - lz.f) * ly.f * (1 - lx.f));
              gin[(lz.i0 * H + ly.i1) * W + lx.i1] += static_cast<S>(gv * (1 - lz.f) * ly.f * lx.f);
              gin[(lz.i1 * H + ly.i0) * W + lx.i0] +=
                  static_cast<S>(gv * lz.f * (1 - ly.f) * (1 - lx.f));
              gin[(lz.i1 * H + ly.i0) * W + lx.i1] += static_cast<S>(gv * lz.f * (1 - ly.f) * lx.f);
              gin[(lz.i1 * H + ly.i1) * W + lx.i0] += static_cast<S>(gv * lz.f * ly.f * (1 - lx.f));
              gin[(lz.i1 * H + ly.i1) * W + lx.i1] += static_cast<S>(gv * lz.f * ly.f * lx.f);
            }
      }
    });
  }
  return out;
}

// ---- group normalization ----

template <class S>
Tensor<S> group_norm(const Tensor<S>& x, int64_t groups, const Tensor<S>& gamma,
                     const Tensor<S>& beta, double eps) {
  require(x.rank() >= 2, "group_norm: need channel-major input");
  const int64_t C = x.dim(0);
  require(C % groups == 0, "group_norm: groups " + std::to_string(groups) +
                               " must divide channels " + std::to_string(C));
  require(gamma.numel() == C && beta.numel() == C, "group_norm: gamma/beta must be length C");
  const int64_t spatial = x.numel() / C;
  const int64_t per_group = (C / groups) * spatial;  // contiguous slice per group

  std::vector<S> ov(x.data().size());
  std::vector<double> mu(static_cast<size_t>(groups)), inv(static_cast<size_t>(groups));
  const auto& xv = x.data();
  for (int64_t g = 0; g < groups; ++g) {
    const S* src = xv.data() + g * per_group;
    double m = 0;
    for (int64_t i = 0; i < per_group; ++i) m += src[i];
    m /= static_cast<double>(per_group);
    double v = 0;
    for (int64_t i = 0; i < per_group; ++i) {
      double d = src[i] - m;
      v += d * d;
    }
    v /= static_cast<double>(per_group);
    mu[g] = m;
    inv[g] = 1.0 / std::sqrt(v + eps);
  }
  for (int64_t c = 0; c < C; ++c) {
    const int64_t g = c / (C / groups);
    const double m = mu[g], iv_ = inv[g];
    const double sc = gamma.data()[c], sh = beta.data()[c];
    const S* src = xv.data() + c * spatial;
    S* dst = ov.data() + c * spatial;
    for (int64_t i = 0; i < spatial; ++i)
      dst[i] = static_cast<S>((src[i] - m) * iv_ * sc + sh);
  }
  auto out = Tensor<S>::from(x.shape(), std::move(ov));

  if (track<S>({&x, &gamma, &beta})) {
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    auto* on = out.node().get();
    attach(out, {&x, &gamma, &beta}, [xn, gn, bn, on, groups, C, spatial, per_group, mu, inv]() {
      const int64_t gs = C / groups;
      for (int64_t g = 0; g < groups; ++g) {
        const double m = mu[g], iv_ = inv[g];
        const S* src = xn->value.data() + g * per_group;
        const S* gout = on->grad.data() + g * per_group;
        // a_i = dL/dout_i * gamma_c(i); accumulate its mean and <a, yhat>
        double a_mean = 0, ay_mean = 0;
        for (int64_t i = 0; i < per_group; ++i) {
          const int64_t c = g * gs + i / spatial;
          double a = static_cast<double>(gout[i]) * gn->value[c];
          double yh = (src[i] - m) * iv_;
          a_mean += a;
          ay_mean += a * yh;
        }
        a_mean /= static_cast<double>(per_group);
        ay_mean /= static_cast<double>(per_group);
        if (xn->requires_grad) {
          xn->ensure_grad();
          S* gin = xn->grad.data() + g * per_group;
          for (int64_t i = 0; i < per_group; ++i) {
            const int64_t c = g * gs + i / spatial;
            double a = static_cast<double>(gout[i]) * gn->value[c];
            double yh = (src[i] - m) * iv_;
            gin[i] += static_cast<S>(iv_ * (a - a_mean - yh * ay_mean));
          }
        }
        if (gn->requires_grad || bn->requires_grad) {
          if (gn->requires_grad) gn->ensure_grad();
          if (bn->requires_grad) bn->ensure_grad();
          for (int64_t c = g * gs; c < (g + 1) * gs; ++c) {
            const S* xs = xn->value.data() + c * spatial;
            const S* gs_ = on->grad.data() + c * spatial;
            double dg = 0, db = 0;
            for (int64_t i = 0; i < spatial; ++i) {
              dg += gs_[i] * (xs[i] - m) * iv_;
              db += gs_[i];
            }
            if (gn->requires_grad) gn->grad[c] += static_cast<S>(dg);
            if (bn->requires_grad) bn->grad[c] += static_cast<S>(db);
          }
        }
      }
    });
  }
  return out;
}

// ---- grad_check ----

template <class S>
double grad_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& point,
                  double eps) {
  Tensor<S> x = point.detach();
  x.set_requires_grad(true);
  Tensor<S> y = f(x);
  require(y.numel() == 1, "grad_check: f must return a scalar, got " + shape_str(y.shape()));
  y.backward();
  std::vector<S> analytic = x.grad();

  double max_rel = 0.0;
  NoGradGuard ng;
  for (int64_t i = 0; i < point.numel(); ++i) {
    Tensor<S> xp = point.detach();
    xp.data()[i] += static_cast<S>(eps);
    double fp = static_cast<double>(f(xp).item());
    Tensor<S> xm = point.detach();
    xm.data()[i] -= static_cast<S>(eps);
    double fm = static_cast<double>(f(xm).item());
    double central = (fp - fm) / (2.0 * eps);
    double a = static_cast<double>(analytic[i]);
    double rel = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

// ---- explicit instantiations ----

#define VPD_INSTANTIATE_TENSOR_OPS(S)                                                           \
  template class Tensor<S>;                                                                     \
  template Tensor<S> add<S>(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> sub<S>(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> mul<S>(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> div<S>(const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> add_scalar<S>(const Tensor<S>&, S);                                        \
  template Tensor<S> mul_scalar<S>(const Tensor<S>&, S);                                        \
  template Tensor<S> neg<S>(const Tensor<S>&);                                                  \
  template Tensor<S> exp<S>(const Tensor<S>&);                                                  \
  template Tensor<S> log<S>(const Tensor<S>&);                                                  \
  template Tensor<S> sqrt<S>(const Tensor<S>&);                                                 \
  template Tensor<S> abs<S>(const Tensor<S>&);                                                  \
  template Tensor<S> square<S>(const Tensor<S>&);                                               \
  template Tensor<S> pow_scalar<S>(const Tensor<S>&, double);                                   \
  template Tensor<S> sigmoid<S>(const Tensor<S>&);                                              \
  template Tensor<S> silu<S>(const Tensor<S>&);                                                 \
  template Tensor<S> clamp<S>(const Tensor<S>&, double, double);                                \
  template Tensor<S> reshape<S>(const Tensor<S>&, Shape);                                       \
  template Tensor<S> transpose2d<S>(const Tensor<S>&);                                          \
  template Tensor<S> concat<S>(const std::vector<Tensor<S>>&, int);                             \
  template Tensor<S> slice<S>(const Tensor<S>&, int, int64_t, int64_t);                         \
  template Tensor<S> sum_all<S>(const Tensor<S>&);                                              \
  template Tensor<S> mean_all<S>(const Tensor<S>&);                                             \
  template Tensor<S> sum_axis<S>(const Tensor<S>&, int, bool);                                  \
  template Tensor<S> mean_axis<S>(const Tensor<S>&, int, bool);                                 \
  template Tensor<S> max_axis<S>(const Tensor<S>&, int, bool);                                  \
  template std::vector<int64_t> argmax_axis<S>(const Tensor<S>&, int);                          \
  template Tensor<S> softmax_axis<S>(const Tensor<S>&, int);                                    \
  template Tensor<S> matmul<S>(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> conv3d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int); \
  template Tensor<S> conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int,      \
                               PadMode);                                                        \
  template Tensor<S> deform_conv2d<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,    \
                                      const Tensor<S>&);                                        \
  template Tensor<S> upsample_trilinear<S>(const Tensor<S>&, int);                              \
  template Tensor<S> group_norm<S>(const Tensor<S>&, int64_t, const Tensor<S>&,                 \
                                   const Tensor<S>&, double);                                   \
  template double grad_check<S>(const std::function<Tensor<S>(const Tensor<S>&)>&,             \
                                const Tensor<S>&, double);

VPD_INSTANTIATE_TENSOR_OPS(float)
VPD_INSTANTIATE_TENSOR_OPS(double)

}  // namespace vpd
