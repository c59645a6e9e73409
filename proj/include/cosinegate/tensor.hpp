#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// The engine is a classic eager tape: every differentiable op computes its
// result immediately and, when a tape is active and an input requires
// gradients, pushes a backward closure. Tape<T>::backward replays the
// closures in reverse. Tensors are value-semantic handles onto shared nodes;
// one tape lives per mini-batch and is discarded after the optimizer step.
//
// Precision is a template parameter: float for training, double for the
// finite-difference gradient checks (which need the headroom).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <cblas.h>

#include "cosinegate/rng.hpp"

namespace cosinegate {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches this node
  bool requires_grad = false;
  uint64_t tape_serial = 0;  // tape that produced this node; 0 for leaves
};

template <typename T>
class TensorT;

template <typename T>
class TapeScope;

// Records backward closures for one forward pass.
template <typename T>
class Tape {
 public:
  Tape() : serial_(++next_serial_) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }
  uint64_t serial() const { return serial_; }

  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  size_t size() const { return ops_.size(); }

  void backward(const TensorT<T>& loss);

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
  uint64_t serial_;

  inline static uint64_t next_serial_ = 0;
  inline static thread_local Tape* current_ = nullptr;

  friend class TapeScope<T>;
};

// RAII activation of a tape on the current thread.
template <typename T>
class TapeScope {
 public:
  TapeScope() : prev_(Tape<T>::current_) { Tape<T>::current_ = &tape_; }
  ~TapeScope() { Tape<T>::current_ = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T> tape_;
  Tape<T>* prev_;
};

template <typename T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static TensorT zeros(const Shape& shape, bool requires_grad = false) {
    return full(shape, T(0), requires_grad);
  }

  static TensorT full(const Shape& shape, T value, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = shape;
    n->data.assign(static_cast<size_t>(shape_numel(shape)), value);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_data(const Shape& shape, std::vector<T> data,
                           bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = shape;
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(T value, bool requires_grad = false) {
    return full({1}, value, requires_grad);
  }

  static TensorT randn(const Shape& shape, RngStream& rng, T stddev = T(1),
                       bool requires_grad = false) {
    auto t = zeros(shape, requires_grad);
    for (auto& v : t.node_->data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return static_cast<int64_t>(node_->data.size()); }
  bool requires_grad() const { return node_->requires_grad; }

  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  // Gradient buffer; empty vector means "no gradient accumulated yet".
  const std::vector<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void clear_grad() {
    node_->grad.clear();
    node_->grad.shrink_to_fit();
  }

  T item() const {
    if (size() != 1) {
      throw std::invalid_argument("item() requires a scalar tensor, got shape " +
                                  shape_str(shape()));
    }
    return node_->data[0];
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

namespace detail {

template <typename T>
inline std::vector<T>& ensure_grad(const std::shared_ptr<TensorNode<T>>& n) {
  if (n->grad.empty()) n->grad.assign(n->data.size(), T(0));
  return n->grad;
}

// Creates the node for an op result and reports whether a backward closure
// should be recorded (tape active and some input tracked).
template <typename T>
inline TensorT<T> make_op_result(Shape shape, std::vector<T> data,
                                 std::initializer_list<const TensorT<T>*> inputs,
                                 bool* record) {
  Tape<T>* tape = Tape<T>::current();
  bool tracked = false;
  if (tape) {
    for (const TensorT<T>* in : inputs) {
      if ((*in).defined() && (*in).requires_grad()) tracked = true;
    }
  }
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = tracked;
  node->tape_serial = tracked ? tape->serial() : 0;
  *record = tracked;
  return TensorT<T>(node);
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                                " vs " + shape_str(b));
  }
}

// Row-major strides.
inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

}  // namespace detail

template <typename T>
void Tape<T>::backward(const TensorT<T>& loss) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss tensor");
  if (loss.size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
  }
  if (!loss.requires_grad() || loss.node()->tape_serial != serial_) {
    throw std::runtime_error(
        "backward: loss is detached (not produced by a tracked op on this tape)");
  }
  if (consumed_) {
    throw std::runtime_error("backward already called on this tape; one pass per tape");
  }
  consumed_ = true;
  detail::ensure_grad(loss.node());
  loss.node()->grad[0] = T(1);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

// Runs backward on the thread's active tape.
template <typename T>
inline void backward(const TensorT<T>& loss) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape) throw std::runtime_error("backward: no active gradient tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// GEMM (row-major) over the BLAS backend.

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta, float* c,
                 int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta,
              c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta,
                 double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta,
              c, ldc);
}

// ---------------------------------------------------------------------------
// Elementwise binary ops.

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) out[i] = pa[i] + pb[i];
  bool rec;
  TensorT<T> y = detail::make_op_result<T>(a.shape(), std::move(out), {&a, &b}, &rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<T>::current()->record([an, bn, yn] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = detail::ensure_grad(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::ensure_grad(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
      }
    });
  }
  return y;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) out[i] = pa[i] - pb[i];
  bool rec;
  TensorT<T> y = detail::make_op_result<T>(a.shape(), std::move(out), {&a, &b}, &rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<T>::current()->record([an, bn, yn] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = detail::ensure_grad(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::ensure_grad(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] -= yn->grad[i];
      }
    });
  }
  return y;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) out[i] = pa[i] * pb[i];
  bool rec;
  TensorT<T> y = detail::make_op_result<T>(a.shape(), std::move(out), {&a, &b}, &rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<T>::current()->record([an, bn, yn] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = detail::ensure_grad(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::ensure_grad(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i] * an->data[i];
      }
    });
  }
  return y;
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "div");
  std::vector<T> out(a.size());
  const T* pa = a.data();
  const T* pb = b.data();
  for (int64_t i = 0; i < a.size(); ++i) out[i] = pa[i] / pb[i];
  bool rec;
  TensorT<T> y = detail::make_op_result<T>(a.shape(), std::move(out), {&a, &b}, &rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<T>::current()->record([an, bn, yn] {
      if (yn->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = detail::ensure_grad(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i] / bn->data[i];
      }
      if (bn->requires_grad) {
        auto& g = detail::ensure_grad(bn);
        for (size_t i = 0; i < g.size(); ++i) {
          T inv = T(1) / bn->data[i];
          g[i] -= yn->grad[i] * an->data[i] * inv * inv;
        }
      }
    });
  }
  return y;
}

// y = alpha * x + beta, elementwise with scalar coefficients.
template <typename T>
TensorT<T> affine(const TensorT<T>& x, T alpha, T beta) {
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (int64_t i = 0; i < x.size(); ++i) out[i] = alpha * px[i] + beta;
  bool rec;
  TensorT<T> y = detail::make_op_result<T>(x.shape(), std::move(out), {&x}, &rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape<T>::current()->record([xn, yn, alpha] {
      if (yn->grad.empty()) return;
      auto& g = detail::ensure_grad(xn);
      for (size_t i = 0; i < g.size(); ++i) g[i] += alpha * yn->grad[i];
    });
  }
  return y;
}

// Clamp to [lo, hi]; gradient passes only in the strict interior, so values
// pinned at a bound (including relu-style kinks) get subgradient 0.
template <typename T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi) {
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (int64_t i = 0; i < x.size(); ++i) out[i] = std::min(std::max(px[i], lo), hi);
  bool rec;
  TensorT<T> y = detail::make_op_result<T>(x.shape(), std::move(out), {&x}, &rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape<T>::current()->record([xn, yn, lo, hi] {
      if (yn->grad.empty()) return;
      auto& g = detail::ensure_grad(xn);
      for (size_t i = 0; i < g.size(); ++i) {
        if (xn->data[i] > lo && xn->data[i] < hi) g[i] += yn->grad[i];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// map_elementwise: the named unary function set.

enum class MapFn { kRelu, kSigmoid, kNeg, kLog, kExp, kSquare, kSqrt };

template <typename T>
TensorT<T> map_elementwise(const TensorT<T>& x, MapFn fn) {
  std::vector<T> out(x.size());
  const T* px = x.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    T v = px[i];
    switch (fn) {
      case MapFn::kRelu: out[i] = v > T(0) ? v : T(0); break;
      case MapFn::kSigmoid: out[i] = T(1) / (T(1) + std::exp(-v)); break;
      case MapFn::kNeg: out[i] = -v; break;
      case MapFn::kLog:
        if (v <= T(0)) {
          throw std::domain_error("map_elementwise(log): non-positive input " +
                                  std::to_string(static_cast<double>(v)));
        }
        out[i] = std::log(v);
        break;
      case MapFn::kExp: out[i] = std::exp(v); break;
      case MapFn::kSquare: out[i] = v * v; break;
      case MapFn::kSqrt:
        if (v < T(0)) {
          throw std::domain_error("map_elementwise(sqrt): negative input " +
                                  std::to_string(static_cast<double>(v)));
        }
        out[i] = std::sqrt(v);
        break;
    }
  }
  bool rec;
  TensorT<T> y = detail::make_op_result<T>(x.shape(), std::move(out), {&x}, &rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape<T>::current()->record([xn, yn, fn] {
      if (yn->grad.empty()) return;
      auto& g = detail::ensure_grad(xn);
      for (size_t i = 0; i < g.size(); ++i) {
        T up = yn->grad[i];
        switch (fn) {
          case MapFn::kRelu:
            if (xn->data[i] > T(0)) g[i] += up;
            break;
          case MapFn::kSigmoid: {
            T s = yn->data[i];
            g[i] += up * s * (T(1) - s);
            break;
          }
          case MapFn::kNeg: g[i] -= up; break;
          case MapFn::kLog: g[i] += up / xn->data[i]; break;
          case MapFn::kExp: g[i] += up * yn->data[i]; break;
          case MapFn::kSquare: g[i] += up * T(2) * xn->data[i]; break;
          case MapFn::kSqrt: g[i] += up / (T(2) * yn->data[i]); break;
        }
      }
    });
  }
  return y;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  return map_elementwise(x, MapFn::kRelu);
}
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  return map_elementwise(x, MapFn::kSigmoid);
}

// ---------------------------------------------------------------------------
// Shape ops.

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, const Shape& new_shape) {
  if (shape_numel(new_shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(new_shape));
  }
  std::vector<T> out(x.data(), x.data() + x.size());
  bool rec;
  TensorT<T> y = detail::make_op_result<T>(new_shape, std::move(out), {&x}, &rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape<T>::current()->record([xn, yn] {
      if (yn->grad.empty()) return;
      auto& g = detail::ensure_grad(xn);
      for (size_t i = 0; i < g.size(); ++i) g[i] += yn->grad[i];
    });
  }
  return y;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& x) {
  if (x.shape().size() != 2) {
    throw std::invalid_argument("transpose: expected rank-2 tensor, got " +
                                shape_str(x.shape()));
  }
  int m = x.shape()[0], n = x.shape()[1];
  std::vector<T> out(static_cast<size_t>(m) * n);
  const T* px = x.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = px[static_cast<size_t>(i) * n + j];
  bool rec;
  TensorT<T> y = detail::make_op_result<T>({n, m}, std::move(out), {&x}, &rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape<T>::current()->record([xn, yn, m, n] {
      if (yn->grad.empty()) return;
      auto& g = detail::ensure_grad(xn);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          g[static_cast<size_t>(i) * n + j] += yn->grad[static_cast<size_t>(j) * m + i];
    });
  }
  return y;
}

// Broadcast x to out_shape; each dim of x must equal the target or be 1.
template <typename T>
TensorT<T> expand(const TensorT<T>& x, const Shape& out_shape) {
  const Shape& xs = x.shape();
  if (xs.size() != out_shape.size()) {
    throw std::invalid_argument("expand: rank mismatch " + shape_str(xs) + " -> " +
                                shape_str(out_shape));
  }
  auto xstrides = detail::strides_of(xs);
  std::vector<int64_t> bstrides(xs.size());
  for (size_t d = 0; d < xs.size(); ++d) {
    if (xs[d] == out_shape[d]) {
      bstrides[d] = xstrides[d];
    } else if (xs[d] == 1) {
      bstrides[d] = 0;
    } else {
      throw std::invalid_argument("expand: dim " + std::to_string(d) + " of " +
                                  shape_str(xs) + " not broadcastable to " +
                                  shape_str(out_shape));
    }
  }
  int64_t total = shape_numel(out_shape);
  std::vector<T> out(static_cast<size_t>(total));
  const size_t rank = out_shape.size();
  std::vector<int> idx(rank, 0);
  const T* px = x.data();
  int64_t src = 0;
  for (int64_t i = 0; i < total; ++i) {
    out[i] = px[src];
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      src += bstrides[d];
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
      src -= bstrides[d] * out_shape[d];
    }
  }
  bool rec;
  TensorT<T> y = detail::make_op_result<T>(out_shape, std::move(out), {&x}, &rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Shape os = out_shape;
    Tape<T>::current()->record([xn, yn, bstrides, os, rank] {
      if (yn->grad.empty()) return;
      auto& g = detail::ensure_grad(xn);
      std::vector<int> id(rank, 0);
      int64_t src = 0;
      int64_t total = static_cast<int64_t>(yn->grad.size());
      for (int64_t i = 0; i < total; ++i) {
        g[src] += yn->grad[i];
        for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
          src += bstrides[d];
          if (++id[d] < os[d]) break;
          id[d] = 0;
          src -= bstrides[d] * os[d];
        }
      }
    });
  }
  return y;
}

// General axis permutation.
template <typename T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& axes) {
  const Shape& xs = x.shape();
  if (axes.size() != xs.size()) {
    throw std::invalid_argument("permute: axes rank mismatch for " + shape_str(xs));
  }
  std::vector<bool> seen(xs.size(), false);
  Shape os(xs.size());
  for (size_t d = 0; d < axes.size(); ++d) {
    int a = axes[d];
    if (a < 0 || a >= static_cast<int>(xs.size()) || seen[a]) {
      throw std::invalid_argument("permute: invalid axis list");
    }
    seen[a] = true;
    os[d] = xs[a];
  }
  auto xstrides = detail::strides_of(xs);
  std::vector<int64_t> ostrides_in_x(xs.size());
  for (size_t d = 0; d < axes.size(); ++d) ostrides_in_x[d] = xstrides[axes[d]];
  int64_t total = x.size();
  std::vector<T> out(static_cast<size_t>(total));
  const size_t rank = os.size();
  std::vector<int> idx(rank, 0);
  const T* px = x.data();
  int64_t src = 0;
  for (int64_t i = 0; i < total; ++i) {
    out[i] = px[src];
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      src += ostrides_in_x[d];
      if (++idx[d] < os[d]) break;
      idx[d] = 0;
      src -= ostrides_in_x[d] * os[d];
    }
  }
  bool rec;
  TensorT<T> y = detail::make_op_result<T>(os, std::move(out), {&x}, &rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Tape<T>::current()->record([xn, yn, ostrides_in_x, os, rank] {
      if (yn->grad.empty()) return;
      auto& g = detail::ensure_grad(xn);
      std::vector<int> id(rank, 0);
      int64_t src = 0;
      int64_t total = static_cast<int64_t>(yn->grad.size());
      for (int64_t i = 0; i < total; ++i) {
        g[src] += yn->grad[i];
        for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
          src += ostrides_in_x[d];
          if (++id[d] < os[d]) break;
          id[d] = 0;
          src -= ostrides_in_x[d] * os[d];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions.

enum class ReduceKind { kSum, kMean, kL2Norm };

// Reduce over the given axes. Reduced dims become size 1 when keepdims, else
// are dropped (a full reduction yields shape {1}). l2norm applies no epsilon
// guard; callers that can hit zero vectors must guard before dividing.
template <typename T>
TensorT<T> reduce(const TensorT<T>& x, std::vector<int> axes, ReduceKind kind,
                  bool keepdims = false) {
  const Shape& xs = x.shape();
  std::vector<bool> reduced(xs.size(), false);
  for (int a : axes) {
    if (a < 0 || a >= static_cast<int>(xs.size())) {
      throw std::invalid_argument("reduce: axis " + std::to_string(a) +
                                  " invalid for shape " + shape_str(xs));
    }
    reduced[a] = true;
  }
  Shape kept = xs;  // with reduced dims collapsed to 1
  int64_t count = 1;
  for (size_t d = 0; d < xs.size(); ++d) {
    if (reduced[d]) {
      count *= xs[d];
      kept[d] = 1;
    }
  }
  Shape out_shape;
  if (keepdims) {
    out_shape = kept;
  } else {
    for (size_t d = 0; d < xs.size(); ++d)
      if (!reduced[d]) out_shape.push_back(xs[d]);
    if (out_shape.empty()) out_shape = {1};
  }

  // Map each input element to its output slot via strides that are zero on
  // reduced dims.
  auto kstrides = detail::strides_of(kept);
  std::vector<int64_t> map_strides(xs.size());
  for (size_t d = 0; d < xs.size(); ++d) map_strides[d] = reduced[d] ? 0 : kstrides[d];

  int64_t out_n = shape_numel(kept);
  std::vector<T> acc(static_cast<size_t>(out_n), T(0));
  const T* px = x.data();
  const size_t rank = xs.size();
  std::vector<int> idx(rank, 0);
  int64_t dst = 0;
  for (int64_t i = 0; i < x.size(); ++i) {
    T v = px[i];
    acc[dst] += (kind == ReduceKind::kL2Norm) ? v * v : v;
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      dst += map_strides[d];
      if (++idx[d] < xs[d]) break;
      idx[d] = 0;
      dst -= map_strides[d] * xs[d];
    }
  }
  if (kind == ReduceKind::kMean) {
    for (auto& v : acc) v /= static_cast<T>(count);
  } else if (kind == ReduceKind::kL2Norm) {
    for (auto& v : acc) v = std::sqrt(v);
  }

  bool rec;
  TensorT<T> y = detail::make_op_result<T>(out_shape, std::move(acc), {&x}, &rec);
  if (rec) {
    auto xn = x.node(), yn = y.node();
    Shape xshape = xs;
    Tape<T>::current()->record([xn, yn, map_strides, xshape, count, kind, rank] {
      if (yn->grad.empty()) return;
      auto& g = detail::ensure_grad(xn);
      std::vector<int> id(rank, 0);
      int64_t dst = 0;
      int64_t total = static_cast<int64_t>(xn->data.size());
      for (int64_t i = 0; i < total; ++i) {
        T up = yn->grad[dst];
        switch (kind) {
          case ReduceKind::kSum: g[i] += up; break;
          case ReduceKind::kMean: g[i] += up / static_cast<T>(count); break;
          case ReduceKind::kL2Norm:
            // d||v|| / dv_i = v_i / ||v||; callers keep norms away from zero.
            g[i] += up * xn->data[i] / yn->data[dst];
            break;
        }
        for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
          dst += map_strides[d];
          if (++id[d] < xshape[d]) break;
          id[d] = 0;
          dst -= map_strides[d] * xshape[d];
        }
      }
    });
  }
  return y;
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  std::vector<int> axes(x.shape().size());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(x, axes, ReduceKind::kSum);
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  std::vector<int> axes(x.shape().size());
  std::iota(axes.begin(), axes.end(), 0);
  return reduce(x, axes, ReduceKind::kMean);
}

// ---------------------------------------------------------------------------
// Matrix product.

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw std::invalid_argument("matmul: expected rank-2 operands, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  int m = a.shape()[0], k = a.shape()[1];
  int k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<T> out(static_cast<size_t>(m) * n, T(0));
  if (m > 0 && n > 0 && k > 0) {
    gemm(false, false, m, n, k, T(1), a.data(), k, b.data(), n, T(0), out.data(), n);
  }
  bool rec;
  TensorT<T> y = detail::make_op_result<T>({m, n}, std::move(out), {&a, &b}, &rec);
  if (rec) {
    auto an = a.node(), bn = b.node(), yn = y.node();
    Tape<T>::current()->record([an, bn, yn, m, n, k] {
      if (yn->grad.empty()) return;
      const T* gy = yn->grad.data();
      if (an->requires_grad) {
        auto& ga = detail::ensure_grad(an);
        // dA = dC · B^T
        gemm(false, true, m, k, n, T(1), gy, n, bn->data.data(), n, T(1), ga.data(), k);
      }
      if (bn->requires_grad) {
        auto& gb = detail::ensure_grad(bn);
        // dB = A^T · dC
        gemm(true, false, k, n, m, T(1), an->data.data(), k, gy, n, T(1), gb.data(), n);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Utilities.

template <typename T>
bool all_finite(const TensorT<T>& x) {
  for (int64_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x.data()[i])) return false;
  }
  return true;
}

template <typename T>
void zero_grad(std::vector<TensorT<T>>& params) {
  for (auto& p : params) p.clear_grad();
}

}  // namespace cosinegate
