#pragma once

// The three-term objective: cross-entropy + consistency + progressive FLOPs
// hinge. Everything here composes tensor primitives, so gradients come for
// free from the tape.

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <vector>

#include "cosinegate/gating.hpp"
#include "cosinegate/tensor.hpp"

namespace cosinegate {

// l2-normalizes each flattened sample of a [B,...] tensor. The guard clamps
// the squared norm at eps^2 *before* the square root: clamping after would
// multiply an infinite sqrt-gradient by the clamp's zero and produce NaN.
template <typename T>
TensorT<T> l2_normalize_rows(const TensorT<T>& x, T eps) {
  const int b_sz = x.shape()[0];
  const int64_t d = x.size() / b_sz;
  TensorT<T> flat = reshape(x, {b_sz, static_cast<int>(d)});
  TensorT<T> sq = map_elementwise(flat, MapFn::kSquare);
  TensorT<T> sumsq = reduce(sq, {1}, ReduceKind::kSum, /*keepdims=*/true);  // [B,1]
  TensorT<T> guarded = clamp(sumsq, eps * eps, std::numeric_limits<T>::infinity());
  TensorT<T> norm = map_elementwise(guarded, MapFn::kSqrt);
  return div(flat, expand(norm, {b_sz, static_cast<int>(d)}));
}

// Drift penalty: per block, mean over the batch of the squared distance
// between l2-normalized full and gated outputs; summed over blocks.
template <typename T>
TensorT<T> consistency_loss(const std::vector<TensorT<T>>& full_outputs,
                            const std::vector<TensorT<T>>& gated_outputs,
                            T eps = T(1e-8)) {
  if (full_outputs.size() != gated_outputs.size()) {
    throw std::invalid_argument("consistency_loss: " +
                                std::to_string(full_outputs.size()) + " full vs " +
                                std::to_string(gated_outputs.size()) +
                                " gated outputs");
  }
  TensorT<T> total = TensorT<T>::zeros({1});
  for (size_t i = 0; i < full_outputs.size(); ++i) {
    detail::check_same_shape(full_outputs[i].shape(), gated_outputs[i].shape(),
                             "consistency_loss");
    TensorT<T> nf = l2_normalize_rows(full_outputs[i], eps);
    TensorT<T> ng = l2_normalize_rows(gated_outputs[i], eps);
    TensorT<T> diff = sub(nf, ng);
    TensorT<T> per_sample = reduce(map_elementwise(diff, MapFn::kSquare), {1},
                                   ReduceKind::kSum);  // [B]
    total = add(total, mean_all(per_sample));
  }
  return total;
}

// Mean of the relaxed gate over all blocks and all samples; stays on the tape
// so the FLOPs pressure reaches the logits.
template <typename T>
TensorT<T> mean_gate(const std::vector<GateDecisionT<T>>& decisions) {
  if (decisions.empty()) {
    throw std::invalid_argument("mean_gate: no gate decisions");
  }
  int64_t count = 0;
  TensorT<T> acc = TensorT<T>::zeros({1});
  for (const auto& d : decisions) {
    if (!d.z.defined()) {
      throw std::invalid_argument("mean_gate: decision lacks a relaxed gate (eval mode?)");
    }
    acc = add(acc, sum_all(d.z));
    count += d.z.size();
  }
  return affine(acc, T(1) / static_cast<T>(count), T(0));
}

// prog(t) = min(1, t / warmup), epoch granularity.
inline double prog_schedule(int epoch, int warmup) {
  if (epoch < 0 || warmup <= 0) {
    throw std::invalid_argument("prog_schedule: epoch >= 0 and warmup > 0 required");
  }
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(warmup));
}

// prog * max(0, g_bar - tau_target)^2. The relu hinge gives exact zero (value
// and gradient) at and below the target.
template <typename T>
TensorT<T> flops_loss(const TensorT<T>& g_bar, T tau_target, T prog) {
  if (!(tau_target > T(0) && tau_target <= T(1))) {
    throw std::invalid_argument("flops_loss: tau_target must lie in (0,1]");
  }
  TensorT<T> hinge = relu(affine(g_bar, T(1), -tau_target));
  return affine(map_elementwise(hinge, MapFn::kSquare), prog, T(0));
}

template <typename T>
TensorT<T> total_loss(const TensorT<T>& ce, const TensorT<T>& cons,
                      const TensorT<T>& flops, T lambda_cons, T lambda_flops) {
  return add(ce, add(affine(cons, lambda_cons, T(0)), affine(flops, lambda_flops, T(0))));
}

// Scalar snapshot of one batch's objective.
template <typename T>
struct LossBreakdownT {
  T ce = T(0);
  T cons = T(0);
  T flops = T(0);
  T total = T(0);
  T mean_gate = T(0);
  T prog = T(0);
};

using LossBreakdown = LossBreakdownT<float>;

}  // namespace cosinegate
