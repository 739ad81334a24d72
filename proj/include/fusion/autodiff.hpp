// SPDX-License-Identifier: Apache-2.0
//
// Minimal reverse-mode autodiff over dense row-major double arrays.
// One Tape per forward/backward pass; parameters live outside the tape in a
// ParamStore and are re-inserted as leaves each step. Single-threaded per
// tape; independent tapes are safe to run concurrently.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "fusion/common.hpp"

namespace fusion::ad {

/// Large tensor buffers churn every step; keeping them on the heap free
/// lists instead of mmap round-trips roughly halves the step time.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
    return true;
  }();
  (void)once;
#endif
}

// ---------------------------------------------------------------------------
// Array: shape + shared flat buffer. Buffers are written once at node
// creation and treated as immutable afterwards; views share storage.
// ---------------------------------------------------------------------------

struct Array {
  std::vector<int64_t> shape;
  std::shared_ptr<std::vector<double>> data;
  bool requires_grad = false;

  Array() : data(std::make_shared<std::vector<double>>()) {}

  static Array zeros(std::vector<int64_t> shape) {
    Array a;
    a.shape = std::move(shape);
    a.data = std::make_shared<std::vector<double>>(numel(a.shape), 0.0);
    return a;
  }
  static Array full(std::vector<int64_t> shape, double v) {
    Array a = zeros(std::move(shape));
    std::fill(a.data->begin(), a.data->end(), v);
    return a;
  }
  static Array scalar(double v) { return full({1}, v); }
  static Array from(std::vector<int64_t> shape, std::vector<double> values) {
    check(numel(shape) == static_cast<int64_t>(values.size()), "Array::from: shape/value mismatch");
    Array a;
    a.shape = std::move(shape);
    a.data = std::make_shared<std::vector<double>>(std::move(values));
    return a;
  }

  static int64_t numel(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      check(d > 0, "Array: nonpositive extent");
      n *= d;
    }
    return n;
  }

  int64_t size() const { return static_cast<int64_t>(data->size()); }
  int64_t rows() const { return shape.empty() ? 1 : size() / shape.back(); }
  int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }
  double at(int64_t i) const { return (*data)[i]; }
};

// ---------------------------------------------------------------------------
// Dense kernels.
// ---------------------------------------------------------------------------

namespace kern {

// C[M,N] (+)= A[M,K] * B[K,N]
inline void mm_nn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
                  bool accum) {
  for (int64_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    if (!accum) std::fill(c, c + N, 0.0);
    const double* a = A + i * K;
    for (int64_t k = 0; k < K; ++k) {
      const double av = a[k];
      const double* b = B + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
inline void mm_nt(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
                  bool accum) {
  for (int64_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (int64_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double s = 0;
      for (int64_t k = 0; k < K; ++k) s += a[k] * b[k];
      c[j] = accum ? c[j] + s : s;
    }
  }
}

// C[K,N] (+)= A[M,K]^T * B[M,N]
inline void mm_tn(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N,
                  bool accum) {
  if (!accum) std::fill(C, C + K * N, 0.0);
  for (int64_t m = 0; m < M; ++m) {
    const double* a = A + m * K;
    const double* b = B + m * N;
    for (int64_t k = 0; k < K; ++k) {
      const double av = a[k];
      double* c = C + k * N;
      for (int64_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace kern

// ---------------------------------------------------------------------------
// Tape.
// ---------------------------------------------------------------------------

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  using BackFn = std::function<void(Tape&, int32_t)>;

  struct Node {
    Array value;
    std::vector<int32_t> parents;
    BackFn backward;  // empty for leaves/constants
    bool requires_grad = false;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { tune_allocator(); }

  bool grad_enabled() const { return grad_enabled_; }

  Var leaf(Array value) {
    value.requires_grad = grad_enabled_;
    return push(std::move(value), {}, {}, grad_enabled_);
  }
  Var constant(Array value) {
    value.requires_grad = false;
    return push(std::move(value), {}, {}, false);
  }
  Var constant(double v) { return constant(Array::scalar(v)); }

  Var push(Array value, std::vector<int32_t> parents, BackFn back, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    if (grad_enabled_ && requires_grad) {
      n.parents = std::move(parents);
      n.backward = std::move(back);
      n.requires_grad = true;
      n.value.requires_grad = true;
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  const Array& val(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  size_t num_nodes() const { return nodes_.size(); }

  /// Gradient buffer for a node; allocated zero on first touch during backward.
  std::vector<double>& grad_buf(int32_t id) {
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    auto& g = grads_[id];
    if (g.size() != nodes_[id].value.data->size()) g.assign(nodes_[id].value.data->size(), 0.0);
    return g;
  }

  Array grad(Var v) {
    Array g = Array::zeros(nodes_[v.id].value.shape);
    auto& buf = grad_buf(v.id);
    std::copy(buf.begin(), buf.end(), g.data->begin());
    return g;
  }

  /// Reverse sweep from a scalar loss. Populates gradients of every
  /// grad-required node reachable from it.
  void backward(Var loss) {
    check(grad_enabled_, "backward: tape recorded with gradients disabled");
    check(nodes_[loss.id].value.size() == 1, "backward: loss is not scalar");
    grads_.assign(nodes_.size(), {});
    visited_.assign(nodes_.size(), false);
    grad_buf(loss.id)[0] = 1.0;
    mark(loss.id);
    for (int32_t i = loss.id; i >= 0; --i) {
      if (!visited_[i]) continue;
      auto& n = nodes_[i];
      if (n.backward && n.requires_grad) n.backward(*this, i);
    }
  }

 private:
  void mark(int32_t id) {
    // Iterative DFS over the needed subgraph.
    std::vector<int32_t> stack{id};
    while (!stack.empty()) {
      int32_t cur = stack.back();
      stack.pop_back();
      if (visited_[cur]) continue;
      visited_[cur] = true;
      for (int32_t p : nodes_[cur].parents)
        if (nodes_[p].requires_grad && !visited_[p]) stack.push_back(p);
    }
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::vector<char> visited_;
};

namespace detail {
inline bool needs(Tape& t, std::initializer_list<Var> vs) {
  if (!t.grad_enabled()) return false;
  for (Var v : vs)
    if (t.requires_grad(v)) return true;
  return false;
}
inline void accum(Tape& t, int32_t id, const std::vector<double>& g) {
  auto& buf = t.grad_buf(id);
  for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and shape ops.
// ---------------------------------------------------------------------------

inline Var add(Tape& t, Var a, Var b) {
  const Array &A = t.val(a), &B = t.val(b);
  check(A.size() == B.size(), "add: size mismatch");
  Array out = Array::zeros(A.shape);
  for (int64_t i = 0; i < A.size(); ++i) (*out.data)[i] = A.at(i) + B.at(i);
  return t.push(std::move(out), {a.id, b.id},
                [a, b](Tape& tp, int32_t id) {
                  const auto& g = tp.grad_buf(id);
                  if (tp.requires_grad(a)) detail::accum(tp, a.id, g);
                  if (tp.requires_grad(b)) detail::accum(tp, b.id, g);
                },
                detail::needs(t, {a, b}));
}

inline Var sub(Tape& t, Var a, Var b) {
  const Array &A = t.val(a), &B = t.val(b);
  check(A.size() == B.size(), "sub: size mismatch");
  Array out = Array::zeros(A.shape);
  for (int64_t i = 0; i < A.size(); ++i) (*out.data)[i] = A.at(i) - B.at(i);
  return t.push(std::move(out), {a.id, b.id},
                [a, b](Tape& tp, int32_t id) {
                  const auto& g = tp.grad_buf(id);
                  if (tp.requires_grad(a)) detail::accum(tp, a.id, g);
                  if (tp.requires_grad(b)) {
                    auto& gb = tp.grad_buf(b.id);
                    for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                  }
                },
                detail::needs(t, {a, b}));
}

inline Var mul(Tape& t, Var a, Var b) {
  const Array &A = t.val(a), &B = t.val(b);
  check(A.size() == B.size(), "mul: size mismatch");
  Array out = Array::zeros(A.shape);
  for (int64_t i = 0; i < A.size(); ++i) (*out.data)[i] = A.at(i) * B.at(i);
  return t.push(std::move(out), {a.id, b.id},
                [a, b](Tape& tp, int32_t id) {
                  const auto& g = tp.grad_buf(id);
                  const Array &A2 = tp.val(a), &B2 = tp.val(b);
                  if (tp.requires_grad(a)) {
                    auto& ga = tp.grad_buf(a.id);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B2.at(i);
                  }
                  if (tp.requires_grad(b)) {
                    auto& gb = tp.grad_buf(b.id);
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A2.at(i);
                  }
                },
                detail::needs(t, {a, b}));
}

inline Var scale(Tape& t, Var a, double c) {
  const Array& A = t.val(a);
  Array out = Array::zeros(A.shape);
  for (int64_t i = 0; i < A.size(); ++i) (*out.data)[i] = A.at(i) * c;
  return t.push(std::move(out), {a.id},
                [a, c](Tape& tp, int32_t id) {
                  if (!tp.requires_grad(a)) return;
                  const auto& g = tp.grad_buf(id);
                  auto& ga = tp.grad_buf(a.id);
                  for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                },
                detail::needs(t, {a}));
}

namespace detail {

template <class F, class DF>
Var unary(Tape& t, Var a, F f, DF df) {
  const Array& A = t.val(a);
  Array out = Array::zeros(A.shape);
  for (int64_t i = 0; i < A.size(); ++i) (*out.data)[i] = f(A.at(i));
  return t.push(std::move(out), {a.id},
                [a, df](Tape& tp, int32_t id) {
                  if (!tp.requires_grad(a)) return;
                  const auto& g = tp.grad_buf(id);
                  auto& ga = tp.grad_buf(a.id);
                  const Array& A2 = tp.val(a);
                  const Array& Y = tp.val(Var{id});
                  for (size_t i = 0; i < g.size(); ++i)
                    ga[i] += g[i] * df(A2.at(static_cast<int64_t>(i)), Y.at(static_cast<int64_t>(i)));
                },
                needs(t, {a}));
}

}  // namespace detail

inline Var exp_op(Tape& t, Var a) {
  return detail::unary(t, a, [](double x) { return std::exp(x); },
                       [](double, double y) { return y; });
}
inline Var log_op(Tape& t, Var a) {
  return detail::unary(t, a, [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}
inline Var tanh_op(Tape& t, Var a) {
  return detail::unary(t, a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}
inline Var abs_op(Tape& t, Var a) {
  return detail::unary(t, a, [](double x) { return std::fabs(x); },
                       [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
inline Var square(Tape& t, Var a) {
  return detail::unary(t, a, [](double x) { return x * x; },
                       [](double x, double) { return 2.0 * x; });
}
inline Var sqrt_op(Tape& t, Var a) {
  return detail::unary(t, a, [](double x) { return std::sqrt(x); },
                       [](double, double y) { return 0.5 / std::max(y, 1e-12); });
}

inline Var gelu(Tape& t, Var a) {
  constexpr double inv_sqrt2 = 0.7071067811865476;
  constexpr double inv_sqrt2pi = 0.3989422804014327;
  return detail::unary(
      t, a, [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [=](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

/// View with a new shape; shares the buffer.
inline Var view(Tape& t, Var a, std::vector<int64_t> shape) {
  const Array& A = t.val(a);
  check(Array::numel(shape) == A.size(), "view: size mismatch");
  Array out;
  out.shape = std::move(shape);
  out.data = A.data;
  return t.push(std::move(out), {a.id},
                [a](Tape& tp, int32_t id) {
                  if (tp.requires_grad(a)) detail::accum(tp, a.id, tp.grad_buf(id));
                },
                detail::needs(t, {a}));
}

/// Gradient barrier: value passes through, gradient does not.
inline Var detach(Tape& t, Var a) { return t.constant(t.val(a)); }

// ---------------------------------------------------------------------------
// Matrix ops.
// ---------------------------------------------------------------------------

inline Var matmul(Tape& t, Var a, Var b) {
  const Array &A = t.val(a), &B = t.val(b);
  check(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[0],
        "matmul: bad shapes");
  const int64_t M = A.shape[0], K = A.shape[1], N = B.shape[1];
  Array out = Array::zeros({M, N});
  kern::mm_nn(A.ptr(), B.ptr(), out.ptr(), M, K, N, false);
  return t.push(std::move(out), {a.id, b.id},
                [a, b, M, K, N](Tape& tp, int32_t id) {
                  const auto& g = tp.grad_buf(id);
                  const Array &A2 = tp.val(a), &B2 = tp.val(b);
                  if (tp.requires_grad(a))
                    kern::mm_nt(g.data(), B2.ptr(), tp.grad_buf(a.id).data(), M, N, K, true);
                  if (tp.requires_grad(b))
                    kern::mm_tn(A2.ptr(), g.data(), tp.grad_buf(b.id).data(), M, K, N, true);
                },
                detail::needs(t, {a, b}));
}

/// Adds a length-C bias vector to every row of x[R,C].
inline Var add_bias(Tape& t, Var x, Var b) {
  const Array &X = t.val(x), &B = t.val(b);
  const int64_t C = X.cols(), R = X.rows();
  check(B.size() == C, "add_bias: bias size mismatch");
  Array out = Array::zeros(X.shape);
  for (int64_t r = 0; r < R; ++r)
    for (int64_t c = 0; c < C; ++c) (*out.data)[r * C + c] = X.at(r * C + c) + B.at(c);
  return t.push(std::move(out), {x.id, b.id},
                [x, b, R, C](Tape& tp, int32_t id) {
                  const auto& g = tp.grad_buf(id);
                  if (tp.requires_grad(x)) detail::accum(tp, x.id, g);
                  if (tp.requires_grad(b)) {
                    auto& gb = tp.grad_buf(b.id);
                    for (int64_t r = 0; r < R; ++r)
                      for (int64_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
                  }
                },
                detail::needs(t, {x, b}));
}

/// Batched matmul over nb independent blocks. transB selects A*B or A*B^T.
inline Var bmm(Tape& t, Var a, Var b, int64_t nb, int64_t m, int64_t k, int64_t n, bool transB) {
  const Array &A = t.val(a), &B = t.val(b);
  check(A.size() == nb * m * k, "bmm: lhs size mismatch");
  check(B.size() == nb * k * n, "bmm: rhs size mismatch");
  Array out = Array::zeros({nb * m, n});
  for (int64_t i = 0; i < nb; ++i) {
    const double* pa = A.ptr() + i * m * k;
    const double* pb = B.ptr() + i * k * n;
    double* pc = out.ptr() + i * m * n;
    if (transB)
      kern::mm_nt(pa, pb, pc, m, k, n, false);
    else
      kern::mm_nn(pa, pb, pc, m, k, n, false);
  }
  return t.push(std::move(out), {a.id, b.id},
                [a, b, nb, m, k, n, transB](Tape& tp, int32_t id) {
                  const auto& g = tp.grad_buf(id);
                  const Array &A2 = tp.val(a), &B2 = tp.val(b);
                  for (int64_t i = 0; i < nb; ++i) {
                    const double* pg = g.data() + i * m * n;
                    const double* pa = A2.ptr() + i * m * k;
                    const double* pb = B2.ptr() + i * k * n;
                    if (tp.requires_grad(a)) {
                      double* ga = tp.grad_buf(a.id).data() + i * m * k;
                      if (transB)
                        kern::mm_nn(pg, pb, ga, m, n, k, true);  // dA = G * B
                      else
                        kern::mm_nt(pg, pb, ga, m, n, k, true);  // dA = G * B^T
                    }
                    if (tp.requires_grad(b)) {
                      double* gb = tp.grad_buf(b.id).data() + i * k * n;
                      if (transB)
                        kern::mm_tn(pg, pa, gb, m, n, k, true);  // dB = G^T * A
                      else
                        kern::mm_tn(pa, pg, gb, m, k, n, true);  // dB = A^T * G
                    }
                  }
                },
                detail::needs(t, {a, b}));
}

/// [R, h*dh] -> [h*R, dh]: moves the head dimension in front of the rows so
/// per-head blocks become contiguous bmm batches.
inline Var head_split(Tape& t, Var x, int64_t heads) {
  const Array& X = t.val(x);
  const int64_t R = X.rows(), C = X.cols();
  check(C % heads == 0, "head_split: cols not divisible by heads");
  const int64_t dh = C / heads;
  Array out = Array::zeros({heads * R, dh});
  for (int64_t r = 0; r < R; ++r)
    for (int64_t h = 0; h < heads; ++h)
      std::copy(X.ptr() + r * C + h * dh, X.ptr() + r * C + (h + 1) * dh,
                out.ptr() + (h * R + r) * dh);
  return t.push(std::move(out), {x.id},
                [x, heads, R, C, dh](Tape& tp, int32_t id) {
                  if (!tp.requires_grad(x)) return;
                  const auto& g = tp.grad_buf(id);
                  auto& gx = tp.grad_buf(x.id);
                  for (int64_t r = 0; r < R; ++r)
                    for (int64_t h = 0; h < heads; ++h)
                      for (int64_t j = 0; j < dh; ++j)
                        gx[r * C + h * dh + j] += g[(h * R + r) * dh + j];
                },
                detail::needs(t, {x}));
}

/// Inverse of head_split: [h*R, dh] -> [R, h*dh].
inline Var head_merge(Tape& t, Var x, int64_t heads) {
  const Array& X = t.val(x);
  const int64_t dh = X.cols(), R = X.rows() / heads;
  const int64_t C = heads * dh;
  Array out = Array::zeros({R, C});
  for (int64_t r = 0; r < R; ++r)
    for (int64_t h = 0; h < heads; ++h)
      std::copy(X.ptr() + (h * R + r) * dh, X.ptr() + (h * R + r + 1) * dh,
                out.ptr() + r * C + h * dh);
  return t.push(std::move(out), {x.id},
                [x, heads, R, C, dh](Tape& tp, int32_t id) {
                  if (!tp.requires_grad(x)) return;
                  const auto& g = tp.grad_buf(id);
                  auto& gx = tp.grad_buf(x.id);
                  for (int64_t r = 0; r < R; ++r)
                    for (int64_t h = 0; h < heads; ++h)
                      for (int64_t j = 0; j < dh; ++j)
                        gx[(h * R + r) * dh + j] += g[r * C + h * dh + j];
                },
                detail::needs(t, {x}));
}

/// y[i,:] = x[idx[i],:]; backward scatter-adds.
inline Var gather_rows(Tape& t, Var x, std::vector<int64_t> idx) {
  const Array& X = t.val(x);
  const int64_t C = X.cols(), R = X.rows();
  const int64_t n = static_cast<int64_t>(idx.size());
  Array out = Array::zeros({n, C});
  for (int64_t i = 0; i < n; ++i) {
    check(idx[i] >= 0 && idx[i] < R, "gather_rows: index out of range");
    std::copy(X.ptr() + idx[i] * C, X.ptr() + (idx[i] + 1) * C, out.ptr() + i * C);
  }
  auto shared = std::make_shared<std::vector<int64_t>>(std::move(idx));
  return t.push(std::move(out), {x.id},
                [x, shared, C](Tape& tp, int32_t id) {
                  if (!tp.requires_grad(x)) return;
                  const auto& g = tp.grad_buf(id);
                  auto& gx = tp.grad_buf(x.id);
                  for (size_t i = 0; i < shared->size(); ++i)
                    for (int64_t c = 0; c < C; ++c) gx[(*shared)[i] * C + c] += g[i * C + c];
                },
                detail::needs(t, {x}));
}

/// Stacks inputs along the row axis; all must share the column count.
inline Var concat_rows(Tape& t, const std::vector<Var>& xs) {
  check(!xs.empty(), "concat_rows: empty input");
  const int64_t C = t.val(xs[0]).cols();
  int64_t R = 0;
  for (Var v : xs) {
    check(t.val(v).cols() == C, "concat_rows: column mismatch");
    R += t.val(v).rows();
  }
  Array out = Array::zeros({R, C});
  int64_t off = 0;
  std::vector<int32_t> parents;
  std::vector<int64_t> offsets;
  for (Var v : xs) {
    const Array& X = t.val(v);
    std::copy(X.ptr(), X.ptr() + X.size(), out.ptr() + off);
    parents.push_back(v.id);
    offsets.push_back(off);
    off += X.size();
  }
  bool rg = false;
  for (Var v : xs) rg = rg || t.requires_grad(v);
  auto vs = std::make_shared<std::vector<Var>>(xs);
  auto offs = std::make_shared<std::vector<int64_t>>(std::move(offsets));
  return t.push(std::move(out), std::move(parents),
                [vs, offs](Tape& tp, int32_t id) {
                  const auto& g = tp.grad_buf(id);
                  for (size_t i = 0; i < vs->size(); ++i) {
                    Var v = (*vs)[i];
                    if (!tp.requires_grad(v)) continue;
                    auto& gv = tp.grad_buf(v.id);
                    const int64_t n = tp.val(v).size();
                    for (int64_t j = 0; j < n; ++j) gv[j] += g[(*offs)[i] + j];
                  }
                },
                t.grad_enabled() && rg);
}

/// Column slice [c0, c1) of x[R,C].
inline Var slice_cols(Tape& t, Var x, int64_t c0, int64_t c1) {
  const Array& X = t.val(x);
  const int64_t R = X.rows(), C = X.cols();
  check(0 <= c0 && c0 < c1 && c1 <= C, "slice_cols: bad range");
  const int64_t W = c1 - c0;
  Array out = Array::zeros({R, W});
  for (int64_t r = 0; r < R; ++r)
    std::copy(X.ptr() + r * C + c0, X.ptr() + r * C + c1, out.ptr() + r * W);
  return t.push(std::move(out), {x.id},
                [x, c0, R, C, W](Tape& tp, int32_t id) {
                  if (!tp.requires_grad(x)) return;
                  const auto& g = tp.grad_buf(id);
                  auto& gx = tp.grad_buf(x.id);
                  for (int64_t r = 0; r < R; ++r)
                    for (int64_t j = 0; j < W; ++j) gx[r * C + c0 + j] += g[r * W + j];
                },
                detail::needs(t, {x}));
}

/// Concatenates along columns.
inline Var concat_cols(Tape& t, const std::vector<Var>& xs) {
  check(!xs.empty(), "concat_cols: empty input");
  const int64_t R = t.val(xs[0]).rows();
  int64_t C = 0;
  for (Var v : xs) {
    check(t.val(v).rows() == R, "concat_cols: row mismatch");
    C += t.val(v).cols();
  }
  Array out = Array::zeros({R, C});
  int64_t off = 0;
  std::vector<int32_t> parents;
  std::vector<int64_t> offsets;
  for (Var v : xs) {
    const Array& X = t.val(v);
    const int64_t w = X.cols();
    for (int64_t r = 0; r < R; ++r)
      std::copy(X.ptr() + r * w, X.ptr() + (r + 1) * w, out.ptr() + r * C + off);
    parents.push_back(v.id);
    offsets.push_back(off);
    off += w;
  }
  bool rg = false;
  for (Var v : xs) rg = rg || t.requires_grad(v);
  auto vs = std::make_shared<std::vector<Var>>(xs);
  auto offs = std::make_shared<std::vector<int64_t>>(std::move(offsets));
  return t.push(std::move(out), std::move(parents),
                [vs, offs, R, C](Tape& tp, int32_t id) {
                  const auto& g = tp.grad_buf(id);
                  for (size_t i = 0; i < vs->size(); ++i) {
                    Var v = (*vs)[i];
                    if (!tp.requires_grad(v)) continue;
                    auto& gv = tp.grad_buf(v.id);
                    const int64_t w = tp.val(v).cols();
                    for (int64_t r = 0; r < R; ++r)
                      for (int64_t j = 0; j < w; ++j) gv[r * w + j] += g[r * C + (*offs)[i] + j];
                  }
                },
                t.grad_enabled() && rg);
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

inline Var sum_all(Tape& t, Var a) {
  const Array& A = t.val(a);
  double s = 0;
  for (int64_t i = 0; i < A.size(); ++i) s += A.at(i);
  return t.push(Array::scalar(s), {a.id},
                [a](Tape& tp, int32_t id) {
                  if (!tp.requires_grad(a)) return;
                  const double g = tp.grad_buf(id)[0];
                  auto& ga = tp.grad_buf(a.id);
                  for (auto& v : ga) v += g;
                },
                detail::needs(t, {a}));
}

inline Var mean_all(Tape& t, Var a) { return scale(t, sum_all(t, a), 1.0 / t.val(a).size()); }

/// Row sums of x[R,C] -> [R,1].
inline Var sum_rows(Tape& t, Var x) {
  const Array& X = t.val(x);
  const int64_t R = X.rows(), C = X.cols();
  Array out = Array::zeros({R, 1});
  for (int64_t r = 0; r < R; ++r) {
    double s = 0;
    for (int64_t c = 0; c < C; ++c) s += X.at(r * C + c);
    (*out.data)[r] = s;
  }
  return t.push(std::move(out), {x.id},
                [x, R, C](Tape& tp, int32_t id) {
                  if (!tp.requires_grad(x)) return;
                  const auto& g = tp.grad_buf(id);
                  auto& gx = tp.grad_buf(x.id);
                  for (int64_t r = 0; r < R; ++r)
                    for (int64_t c = 0; c < C; ++c) gx[r * C + c] += g[r];
                },
                detail::needs(t, {x}));
}

// ---------------------------------------------------------------------------
// Neural-net ops.
// ---------------------------------------------------------------------------

/// Row-wise softmax over unmasked entries (mask entry > 0.5 means "attend").
/// Masked entries are exactly zero. Max-subtraction stabilized.
/// A row with no unmasked entry raises "empty attention row".
inline Var masked_softmax(Tape& t, Var logits, const Array& mask) {
  const Array& X = t.val(logits);
  const int64_t R = X.rows(), C = X.cols();
  check(mask.size() == X.size(), "masked_softmax: mask size mismatch");
  Array out = Array::zeros(X.shape);
  for (int64_t r = 0; r < R; ++r) {
    double mx = -1e300;
    bool any = false;
    for (int64_t c = 0; c < C; ++c)
      if (mask.at(r * C + c) > 0.5) {
        any = true;
        mx = std::max(mx, X.at(r * C + c));
      }
    check(any, "empty attention row");
    double z = 0;
    for (int64_t c = 0; c < C; ++c)
      if (mask.at(r * C + c) > 0.5) {
        const double e = std::exp(X.at(r * C + c) - mx);
        (*out.data)[r * C + c] = e;
        z += e;
      }
    for (int64_t c = 0; c < C; ++c) (*out.data)[r * C + c] /= z;
  }
  auto m = std::make_shared<Array>(mask);
  return t.push(std::move(out), {logits.id},
                [logits, m, R, C](Tape& tp, int32_t id) {
                  if (!tp.requires_grad(logits)) return;
                  const auto& g = tp.grad_buf(id);
                  const Array& P = tp.val(Var{id});
                  auto& gx = tp.grad_buf(logits.id);
                  for (int64_t r = 0; r < R; ++r) {
                    double dot = 0;
                    for (int64_t c = 0; c < C; ++c) dot += g[r * C + c] * P.at(r * C + c);
                    for (int64_t c = 0; c < C; ++c)
                      if (m->at(r * C + c) > 0.5)
                        gx[r * C + c] += P.at(r * C + c) * (g[r * C + c] - dot);
                  }
                },
                detail::needs(t, {logits}));
}

/// Row-wise layer normalization over the last dimension (population variance)
/// with learned gain and bias.
inline Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5) {
  const Array &X = t.val(x), &G = t.val(gain), &B = t.val(bias);
  const int64_t R = X.rows(), C = X.cols();
  check(C >= 2, "layer_norm: needs at least 2 features");
  check(G.size() == C && B.size() == C, "layer_norm: gain/bias size mismatch");
  Array out = Array::zeros(X.shape);
  auto stats = std::make_shared<std::vector<double>>(2 * R);  // mean, inv_std per row
  for (int64_t r = 0; r < R; ++r) {
    double m = 0;
    for (int64_t c = 0; c < C; ++c) m += X.at(r * C + c);
    m /= C;
    double var = 0;
    for (int64_t c = 0; c < C; ++c) {
      const double d = X.at(r * C + c) - m;
      var += d * d;
    }
    var /= C;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[2 * r] = m;
    (*stats)[2 * r + 1] = inv;
    for (int64_t c = 0; c < C; ++c)
      (*out.data)[r * C + c] = (X.at(r * C + c) - m) * inv * G.at(c) + B.at(c);
  }
  return t.push(std::move(out), {x.id, gain.id, bias.id},
                [x, gain, bias, stats, R, C](Tape& tp, int32_t id) {
                  const auto& g = tp.grad_buf(id);
                  const Array &X2 = tp.val(x), &G2 = tp.val(gain);
                  for (int64_t r = 0; r < R; ++r) {
                    const double m = (*stats)[2 * r], inv = (*stats)[2 * r + 1];
                    double s1 = 0, s2 = 0;
                    for (int64_t c = 0; c < C; ++c) {
                      const double xh = (X2.at(r * C + c) - m) * inv;
                      const double dxh = g[r * C + c] * G2.at(c);
                      s1 += dxh;
                      s2 += dxh * xh;
                    }
                    if (tp.requires_grad(x)) {
                      auto& gx = tp.grad_buf(x.id);
                      for (int64_t c = 0; c < C; ++c) {
                        const double xh = (X2.at(r * C + c) - m) * inv;
                        const double dxh = g[r * C + c] * G2.at(c);
                        gx[r * C + c] += inv * (dxh - s1 / C - xh * s2 / C);
                      }
                    }
                    if (tp.requires_grad(gain)) {
                      auto& gg = tp.grad_buf(gain.id);
                      for (int64_t c = 0; c < C; ++c)
                        gg[c] += g[r * C + c] * (X2.at(r * C + c) - m) * inv;
                    }
                    if (tp.requires_grad(bias)) {
                      auto& gb = tp.grad_buf(bias.id);
                      for (int64_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
                    }
                  }
                },
                detail::needs(t, {x, gain, bias}));
}

/// Inverted dropout driven by an explicit stream; identity when rate == 0.
inline Var dropout(Tape& t, Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  const Array& X = t.val(x);
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<double>>(X.size());
  Array out = Array::zeros(X.shape);
  for (int64_t i = 0; i < X.size(); ++i) {
    const double m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    (*mask)[i] = m;
    (*out.data)[i] = X.at(i) * m;
  }
  return t.push(std::move(out), {x.id},
                [x, mask](Tape& tp, int32_t id) {
                  if (!tp.requires_grad(x)) return;
                  const auto& g = tp.grad_buf(id);
                  auto& gx = tp.grad_buf(x.id);
                  for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
                },
                detail::needs(t, {x}));
}

inline constexpr double kLogSigmaMin = -5.0;
inline constexpr double kLogSigmaMax = 2.0;
inline constexpr double kHalfLog2Pi = 0.9189385332046727;

/// Diagonal-Gaussian negative log-likelihood, weighted mean over elements:
///   mean_i w_i * [log s_i + 0.5 log(2pi) + 0.5 ((x_i - mu_i)/s_i)^2] / mean(w)
/// log_sigma is clamped to [-5, 2] before use; the clamp blocks gradient
/// outside the range. target and weights are constants.
inline Var gaussian_nll(Tape& t, const Array& target, Var mu, Var log_sigma,
                        const Array* weights = nullptr) {
  const Array &M = t.val(mu), &L = t.val(log_sigma);
  check(M.size() == target.size() && L.size() == target.size(), "gaussian_nll: size mismatch");
  check(!weights || weights->size() == target.size(), "gaussian_nll: weight size mismatch");
  const int64_t n = target.size();
  double wsum = 0, acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double w = weights ? weights->at(i) : 1.0;
    if (w == 0.0) continue;
    const double ls = std::clamp(L.at(i), kLogSigmaMin, kLogSigmaMax);
    const double s = std::exp(ls);
    const double z = (target.at(i) - M.at(i)) / s;
    acc += w * (ls + kHalfLog2Pi + 0.5 * z * z);
    wsum += w;
  }
  if (wsum == 0.0) wsum = 1.0;
  auto tgt = std::make_shared<Array>(target);
  auto wts = std::make_shared<Array>(weights ? *weights : Array());
  const bool has_w = weights != nullptr;
  return t.push(Array::scalar(acc / wsum), {mu.id, log_sigma.id},
                [mu, log_sigma, tgt, wts, has_w, n, wsum](Tape& tp, int32_t id) {
                  const double g = tp.grad_buf(id)[0];
                  const Array &M2 = tp.val(mu), &L2 = tp.val(log_sigma);
                  const bool need_mu = tp.requires_grad(mu);
                  const bool need_ls = tp.requires_grad(log_sigma);
                  auto* gm = need_mu ? &tp.grad_buf(mu.id) : nullptr;
                  auto* gl = need_ls ? &tp.grad_buf(log_sigma.id) : nullptr;
                  for (int64_t i = 0; i < n; ++i) {
                    const double w = has_w ? wts->at(i) : 1.0;
                    if (w == 0.0) continue;
                    const double raw = L2.at(i);
                    const double ls = std::clamp(raw, kLogSigmaMin, kLogSigmaMax);
                    const double s = std::exp(ls);
                    const double z = (tgt->at(i) - M2.at(i)) / s;
                    const double c = g * w / wsum;
                    if (gm) (*gm)[i] += c * (-z / s);
                    if (gl && raw > kLogSigmaMin && raw < kLogSigmaMax)
                      (*gl)[i] += c * (1.0 - z * z);
                  }
                },
                detail::needs(t, {mu, log_sigma}));
}

// ---------------------------------------------------------------------------
// Parameter store: named arrays living across tapes.
// ---------------------------------------------------------------------------

struct ParamStore {
  struct Entry {
    std::string name;
    Array value;
  };
  std::vector<Entry> entries;

  int add(std::string name, Array init) {
    for (const auto& e : entries) check(e.name != name, "ParamStore: duplicate name " + name);
    init.requires_grad = true;
    entries.push_back({std::move(name), std::move(init)});
    return static_cast<int>(entries.size() - 1);
  }
  Array& value(int id) { return entries[id].value; }
  const Array& value(int id) const { return entries[id].value; }
  int64_t total_size() const {
    int64_t n = 0;
    for (const auto& e : entries) n += e.value.size();
    return n;
  }
};

/// Inserts every parameter as a leaf on the tape; index-aligned with the store.
inline std::vector<Var> make_leaves(Tape& t, const ParamStore& store) {
  std::vector<Var> vars;
  vars.reserve(store.entries.size());
  for (const auto& e : store.entries) vars.push_back(t.leaf(e.value));
  return vars;
}

}  // namespace fusion::ad
