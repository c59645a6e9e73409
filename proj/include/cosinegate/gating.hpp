#pragma once

// Gating math: cosine incompatibility ratio, controller MLP, gate logits,
// Gumbel-Softmax relaxation, and deterministic hard thresholding.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cosinegate/nn.hpp"
#include "cosinegate/rng.hpp"
#include "cosinegate/tensor.hpp"

namespace cosinegate {

template <typename T>
struct GateConfigT {
  T temperature = T(1);            // tau
  T inference_threshold = T(0.45); // delta
  T epsilon_norm = T(1e-8);
  bool gamma_learnable = true;
  uint64_t rng_seed = 0;

  void validate() const {
    if (!(temperature > T(0))) {
      throw std::invalid_argument("gate config: temperature must be positive");
    }
    if (!(inference_threshold > T(0) && inference_threshold < T(1))) {
      throw std::invalid_argument("gate config: threshold must lie in (0,1)");
    }
    if (!(epsilon_norm > T(0))) {
      throw std::invalid_argument("gate config: epsilon_norm must be positive");
    }
  }
};

using GateConfig = GateConfigT<float>;

// Two-layer MLP over pooled features; hidden width max(ceil(C/4), 8) keeps it
// well under 1% of the network parameter budget.
template <typename T>
struct ControllerParamsT {
  LinearParamsT<T> w1;  // C -> hidden
  LinearParamsT<T> w2;  // hidden -> 1
};

inline int controller_hidden_width(int channels) {
  return std::max((channels + 3) / 4, 8);
}

template <typename T>
ControllerParamsT<T> make_controller(int channels, RngStream& rng) {
  ControllerParamsT<T> p;
  int hidden = controller_hidden_width(channels);
  p.w1 = make_linear<T>(channels, hidden, rng);
  p.w2 = make_linear<T>(hidden, 1, rng);
  return p;
}

template <typename T>
int64_t controller_param_count(const ControllerParamsT<T>& p) {
  return p.w1.weight.size() + p.w1.bias.size() + p.w2.weight.size() + p.w2.bias.size();
}

// Per-sample cosine between flattened x and r. When either norm falls below
// eps the similarity is defined as 0 (neutral) and its gradient is zeroed: a
// vanishing vector carries no direction. |cos| can exceed 1 by rounding, so
// the result is pinned to [-1, 1]; the pin never binds away from colinear
// inputs, where the true gradient vanishes along the colinear directions
// anyway.
template <typename T>
TensorT<T> cosine_similarity_batched(const TensorT<T>& x, const TensorT<T>& r, T eps) {
  detail::check_same_shape(x.shape(), r.shape(), "cosine_similarity_batched");
  if (x.shape().size() < 2) {
    throw std::invalid_argument("cosine_similarity_batched: need a batch dimension");
  }
  const int b_sz = x.shape()[0];
  const int64_t d = x.size() / b_sz;

  std::vector<T> cosv(b_sz), dot(b_sz), nx(b_sz), nr(b_sz);
  std::vector<char> guarded(b_sz), pinned(b_sz);
  for (int b = 0; b < b_sz; ++b) {
    const T* u = x.data() + b * d;
    const T* v = r.data() + b * d;
    T s_uv = T(0), s_uu = T(0), s_vv = T(0);
    for (int64_t i = 0; i < d; ++i) {
      s_uv += u[i] * v[i];
      s_uu += u[i] * u[i];
      s_vv += v[i] * v[i];
    }
    dot[b] = s_uv;
    nx[b] = std::sqrt(s_uu);
    nr[b] = std::sqrt(s_vv);
    if (nx[b] < eps || nr[b] < eps) {
      cosv[b] = T(0);
      guarded[b] = 1;
      pinned[b] = 0;
    } else {
      T c = s_uv / (nx[b] * nr[b]);
      guarded[b] = 0;
      pinned[b] = (c > T(1) || c < T(-1)) ? 1 : 0;
      cosv[b] = std::min(std::max(c, T(-1)), T(1));
    }
  }

  bool rec;
  TensorT<T> out = detail::make_op_result<T>({b_sz}, std::move(cosv), {&x, &r}, &rec);
  if (rec) {
    auto xn = x.node(), rn = r.node(), yn = out.node();
    Tape<T>::current()->record([xn, rn, yn, dot, nx, nr, guarded, pinned, b_sz, d] {
      if (yn->grad.empty()) return;
      for (int b = 0; b < b_sz; ++b) {
        if (guarded[b] || pinned[b]) continue;
        T up = yn->grad[b];
        if (up == T(0)) continue;
        T c = yn->data[b];
        T inv_xr = T(1) / (nx[b] * nr[b]);
        T inv_xx = T(1) / (nx[b] * nx[b]);
        T inv_rr = T(1) / (nr[b] * nr[b]);
        const T* u = xn->data.data() + b * d;
        const T* v = rn->data.data() + b * d;
        if (xn->requires_grad) {
          T* g = detail::ensure_grad(xn).data() + b * d;
          for (int64_t i = 0; i < d; ++i) g[i] += up * (v[i] * inv_xr - c * u[i] * inv_xx);
        }
        if (rn->requires_grad) {
          T* g = detail::ensure_grad(rn).data() + b * d;
          for (int64_t i = 0; i < d; ++i) g[i] += up * (u[i] * inv_xr - c * v[i] * inv_rr);
        }
      }
    });
  }
  return out;
}

// CIR = 1 - cos(x, r), in [0, 2].
template <typename T>
TensorT<T> cir(const TensorT<T>& x, const TensorT<T>& r, T eps) {
  return affine(cosine_similarity_batched(x, r, eps), T(-1), T(1));
}

// c(x) = W2 ReLU(W1 GAP(x)), a scalar per sample.
template <typename T>
TensorT<T> controller_forward(const TensorT<T>& x, const ControllerParamsT<T>& p) {
  TensorT<T> pooled = global_average_pool(x);
  TensorT<T> hidden = relu(linear(pooled, p.w1));
  TensorT<T> out = linear(hidden, p.w2);  // [B,1]
  return reshape(out, {x.shape()[0]});
}

// Residual-class logit l = gamma * (cir + c); the identity-class logit is
// fixed at 0.
template <typename T>
TensorT<T> gate_logit(const TensorT<T>& cir_val, const TensorT<T>& ctrl,
                      const TensorT<T>& gamma) {
  TensorT<T> s = add(cir_val, ctrl);
  TensorT<T> g = expand(gamma, {s.shape()[0]});
  return mul(g, s);
}

template <typename T>
TensorT<T> gate_logit(const TensorT<T>& cir_val, const TensorT<T>& ctrl, T gamma) {
  return affine(add(cir_val, ctrl), gamma, T(0));
}

// i.i.d. standard Gumbel draws, g = -log(-log u), u clamped into
// (1e-12, 1-1e-12). Constant w.r.t. the tape.
template <typename T>
TensorT<T> gumbel_sample(const Shape& shape, RngStream& rng) {
  TensorT<T> out = TensorT<T>::zeros(shape);
  constexpr double u_min = 1e-12;
  for (int64_t i = 0; i < out.size(); ++i) {
    double u = rng.uniform();
    u = std::min(std::max(u, u_min), 1.0 - u_min);
    out.data()[i] = static_cast<T>(-std::log(-std::log(u)));
  }
  return out;
}

// Two-class Gumbel-Softmax over {identity: 0 + g0, residual: l + g1},
// returning the residual coordinate: z = sigma((l + g1 - g0) / tau). The
// pre-sigmoid argument is clamped to ±15 so z stays inside the open interval
// (0,1) even at float precision; sigma(15) differs from 1 by ~3e-7, well
// inside every comparison tolerance used against the softmax form.
template <typename T>
TensorT<T> relaxed_gate(const TensorT<T>& logit_residual, const TensorT<T>& noise,
                        T tau) {
  if (!(tau > T(0))) {
    throw std::invalid_argument("relaxed_gate: temperature must be positive");
  }
  const int b_sz = logit_residual.shape()[0];
  if (noise.shape() != Shape{b_sz, 2}) {
    throw std::invalid_argument("relaxed_gate: noise must be [B,2], got " +
                                shape_str(noise.shape()));
  }
  std::vector<T> diff(b_sz);
  for (int b = 0; b < b_sz; ++b) {
    diff[b] = noise.data()[2 * b + 1] - noise.data()[2 * b];
  }
  TensorT<T> noise_diff = TensorT<T>::from_data({b_sz}, std::move(diff));
  TensorT<T> arg = affine(add(logit_residual, noise_diff), T(1) / tau, T(0));
  return sigmoid(clamp(arg, T(-15), T(15)));
}

// Deterministic inference gate: 1 iff sigma(l) > delta, strictly. Not on the
// tape; carries no gradient and consumes no randomness.
template <typename T>
TensorT<T> hard_gate(const TensorT<T>& logit_residual, T delta) {
  const int b_sz = logit_residual.shape()[0];
  TensorT<T> out = TensorT<T>::zeros({b_sz});
  for (int b = 0; b < b_sz; ++b) {
    T s = T(1) / (T(1) + std::exp(-logit_residual.data()[b]));
    out.data()[b] = s > delta ? T(1) : T(0);
  }
  return out;
}

// Per-sample gate telemetry for one block.
template <typename T>
struct GateDecisionT {
  TensorT<T> cir;             // [B], in [0,2]
  TensorT<T> controller_out;  // [B]
  TensorT<T> logit;           // [B]
  TensorT<T> z;               // [B], relaxed gate; defined in train mode only
  TensorT<T> hard;            // [B], {0,1}
};

using GateDecision = GateDecisionT<float>;

}  // namespace cosinegate
