#pragma once

// The full finite-difference suite at double precision: every differentiable
// op plus the composite gating pipeline and the three losses, on random small
// tensors. Shared by the `gradcheck` CLI subcommand and the acceptance tests.

#include <functional>
#include <string>
#include <vector>

#include "cosinegate/gating.hpp"
#include "cosinegate/gradcheck.hpp"
#include "cosinegate/losses.hpp"
#include "cosinegate/model.hpp"
#include "cosinegate/nn.hpp"
#include "cosinegate/tensor.hpp"

namespace cosinegate {

struct GradcheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

namespace gradcheck_detail {

using D = DTensor;

inline D rnd(const Shape& s, RngStream& rng, double stddev = 1.0, bool rg = false) {
  return D::randn(s, rng, stddev, rg);
}

// Pushes values away from zero so kinks (relu, clamp bounds) are never within
// an FD step of the evaluation point.
inline void shift_from_zero(D& t, double margin) {
  for (int64_t i = 0; i < t.size(); ++i) {
    double& v = *(t.data() + i);
    if (v >= 0 && v < margin) v += margin;
    if (v < 0 && v > -margin) v -= margin;
  }
}

// Weighted sum against a fixed random tensor, so upstream gradients vary per
// element instead of being uniformly 1.
inline D weighted_sum(const D& t, const D& w) { return sum_all(mul(t, w)); }

}  // namespace gradcheck_detail

inline std::vector<GradcheckEntry> run_gradcheck_suite(double tol = 1e-4,
                                                       uint64_t seed = 42) {
  using namespace gradcheck_detail;
  std::vector<GradcheckEntry> entries;
  RngStream rng(RngStream::mix(seed, 0xFD));
  const double h = 1e-6;

  auto check = [&](const std::string& name, D& x,
                   const std::function<D(D&)>& f) {
    FdCheckResult r = finite_difference_check<double>(f, x, h);
    entries.push_back({name, r.nan_seen ? 1.0 : r.max_rel_err, r.pass(tol)});
  };

  // --- tensor primitives ---
  {
    D a = rnd({3, 4}, rng, 1.0, true), b = rnd({3, 4}, rng), w = rnd({3, 4}, rng);
    check("tensor.add", a, [&](D& t) { return weighted_sum(add(t, b), w); });
    check("tensor.sub", a, [&](D& t) { return weighted_sum(sub(t, b), w); });
    check("tensor.mul", a, [&](D& t) { return weighted_sum(mul(t, b), w); });
    D bp = rnd({3, 4}, rng);
    shift_from_zero(bp, 0.5);
    check("tensor.div", a, [&](D& t) { return weighted_sum(div(t, bp), w); });
    check("tensor.affine", a,
          [&](D& t) { return weighted_sum(affine(t, 1.7, -0.3), w); });
  }
  {
    D a = rnd({4, 5}, rng, 1.0, true), w = rnd({4, 5}, rng);
    shift_from_zero(a, 0.2);  // keep away from relu kink and clamp bounds
    check("tensor.map.relu", a, [&](D& t) { return weighted_sum(relu(t), w); });
    check("tensor.map.sigmoid", a,
          [&](D& t) { return weighted_sum(sigmoid(t), w); });
    check("tensor.map.neg", a,
          [&](D& t) { return weighted_sum(map_elementwise(t, MapFn::kNeg), w); });
    check("tensor.map.exp", a,
          [&](D& t) { return weighted_sum(map_elementwise(t, MapFn::kExp), w); });
    check("tensor.map.square", a,
          [&](D& t) { return weighted_sum(map_elementwise(t, MapFn::kSquare), w); });
    check("tensor.clamp", a,
          [&](D& t) { return weighted_sum(clamp(t, -0.15, 0.15), w); });
  }
  {
    D pos = rnd({3, 3}, rng, 1.0, true);
    for (int64_t i = 0; i < pos.size(); ++i)
      pos.data()[i] = std::abs(pos.data()[i]) + 0.5;
    D w = rnd({3, 3}, rng);
    check("tensor.map.log", pos,
          [&](D& t) { return weighted_sum(map_elementwise(t, MapFn::kLog), w); });
    check("tensor.map.sqrt", pos,
          [&](D& t) { return weighted_sum(map_elementwise(t, MapFn::kSqrt), w); });
  }
  {
    D a = rnd({3, 4}, rng, 1.0, true), b = rnd({4, 2}, rng, 1.0, true);
    D w = rnd({3, 2}, rng);
    D wt = rnd({4, 3}, rng);
    check("tensor.matmul.lhs", a, [&](D& t) { return weighted_sum(matmul(t, b), w); });
    check("tensor.matmul.rhs", b, [&](D& t) { return weighted_sum(matmul(a, t), w); });
    check("tensor.transpose", a,
          [&](D& t) { return weighted_sum(transpose(t), wt); });
  }
  {
    D a = rnd({2, 3, 4}, rng, 1.0, true);
    D w1 = rnd({2, 12}, rng), w2 = rnd({4, 3, 2}, rng), w3 = rnd({2, 3, 4}, rng);
    check("tensor.reshape", a,
          [&](D& t) { return weighted_sum(reshape(t, {2, 12}), w1); });
    check("tensor.permute", a,
          [&](D& t) { return weighted_sum(permute(t, {2, 1, 0}), w2); });
    D small = rnd({2, 1, 4}, rng, 1.0, true);
    check("tensor.expand", small,
          [&](D& t) { return weighted_sum(expand(t, {2, 3, 4}), w3); });
    D wsum = rnd({3}, rng);
    check("tensor.reduce.sum", a, [&](D& t) {
      return weighted_sum(reduce(t, {0, 2}, ReduceKind::kSum), wsum);
    });
    check("tensor.reduce.mean", a, [&](D& t) {
      return weighted_sum(reduce(t, {0, 2}, ReduceKind::kMean), wsum);
    });
    D nz = rnd({3, 5}, rng, 1.0, true);
    shift_from_zero(nz, 0.3);
    D wl = rnd({3}, rng);
    check("tensor.reduce.l2norm", nz, [&](D& t) {
      return weighted_sum(reduce(t, {1}, ReduceKind::kL2Norm), wl);
    });
  }

  // --- nn layers ---
  {
    RngStream prng(RngStream::mix(seed, 0xC0));
    auto conv = make_conv2d<double>(3, 4, 3, 1, 1, prng, /*with_bias=*/true);
    D x = rnd({2, 3, 5, 5}, rng, 1.0, true);
    D w = rnd({2, 4, 5, 5}, rng);
    check("nn.conv2d.x", x, [&](D& t) { return weighted_sum(conv2d(t, conv), w); });
    check("nn.conv2d.weight", conv.weight,
          [&](D&) { return weighted_sum(conv2d(x, conv), w); });
    check("nn.conv2d.bias", conv.bias,
          [&](D&) { return weighted_sum(conv2d(x, conv), w); });
    auto proj = make_conv2d<double>(3, 4, 1, 2, 0, prng);
    D wp = rnd({2, 4, 3, 3}, rng);
    check("nn.conv2d.stride2.x", x,
          [&](D& t) { return weighted_sum(conv2d(t, proj), wp); });
    check("nn.conv2d.stride2.weight", proj.weight,
          [&](D&) { return weighted_sum(conv2d(x, proj), wp); });
  }
  {
    auto bn = make_batchnorm2d<double>(4);
    RngStream gr(RngStream::mix(seed, 0xB1));
    for (int i = 0; i < 4; ++i) {
      bn.gamma.data()[i] = 1.0 + 0.3 * gr.normal();
      bn.beta.data()[i] = 0.2 * gr.normal();
    }
    D x = rnd({2, 4, 5, 5}, rng, 1.0, true);
    D w = rnd({2, 4, 5, 5}, rng);
    check("nn.batchnorm.x", x,
          [&](D& t) { return weighted_sum(batchnorm2d(t, bn, true), w); });
    check("nn.batchnorm.gamma", bn.gamma,
          [&](D&) { return weighted_sum(batchnorm2d(x, bn, true), w); });
    check("nn.batchnorm.beta", bn.beta,
          [&](D&) { return weighted_sum(batchnorm2d(x, bn, true), w); });
  }
  {
    D x = rnd({2, 4, 5, 5}, rng, 1.0, true);
    D w = rnd({2, 4}, rng);
    check("nn.global_average_pool", x,
          [&](D& t) { return weighted_sum(global_average_pool(t), w); });
  }
  {
    RngStream prng(RngStream::mix(seed, 0xC1));
    auto lin = make_linear<double>(6, 4, prng);
    D x = rnd({3, 6}, rng, 1.0, true);
    D w = rnd({3, 4}, rng);
    check("nn.linear.x", x, [&](D& t) { return weighted_sum(linear(t, lin), w); });
    check("nn.linear.weight", lin.weight,
          [&](D&) { return weighted_sum(linear(x, lin), w); });
    check("nn.linear.bias", lin.bias,
          [&](D&) { return weighted_sum(linear(x, lin), w); });
  }
  {
    D logits = rnd({4, 5}, rng, 2.0, true);
    std::vector<int> labels = {0, 3, 1, 4};
    check("nn.cross_entropy", logits,
          [&](D& t) { return cross_entropy(t, labels); });
  }

  // --- gating ---
  {
    D x = rnd({2, 4, 3, 3}, rng, 1.0, true);
    D r = rnd({2, 4, 3, 3}, rng, 1.0, true);
    D w = rnd({2}, rng);
    check("gating.cosine.x", x, [&](D& t) {
      return weighted_sum(cosine_similarity_batched(t, r, 1e-8), w);
    });
    check("gating.cosine.r", r, [&](D& t) {
      return weighted_sum(cosine_similarity_batched(x, t, 1e-8), w);
    });
    check("gating.cir", x, [&](D& t) { return weighted_sum(cir(t, r, 1e-8), w); });
  }
  {
    RngStream prng(RngStream::mix(seed, 0xC2));
    auto ctrl = make_controller<double>(4, prng);
    D x = rnd({2, 4, 3, 3}, rng, 1.0, true);
    D w = rnd({2}, rng);
    check("gating.controller.x", x,
          [&](D& t) { return weighted_sum(controller_forward(t, ctrl), w); });
    check("gating.controller.w1", ctrl.w1.weight,
          [&](D&) { return weighted_sum(controller_forward(x, ctrl), w); });
    check("gating.controller.w2", ctrl.w2.weight,
          [&](D&) { return weighted_sum(controller_forward(x, ctrl), w); });
  }
  {
    D cirv = rnd({5}, rng, 0.5, true);
    D ctrl = rnd({5}, rng, 0.5, true);
    D gamma = D::full({1}, -2.5, true);
    D w = rnd({5}, rng);
    check("gating.gate_logit.cir", cirv, [&](D& t) {
      return weighted_sum(gate_logit(t, ctrl, gamma), w);
    });
    check("gating.gate_logit.gamma", gamma, [&](D&) {
      return weighted_sum(gate_logit(cirv, ctrl, gamma), w);
    });
    RngStream nrng(RngStream::mix(seed, 0x6B));
    D noise = gumbel_sample<double>({5, 2}, nrng);
    check("gating.relaxed_gate", cirv, [&](D& t) {
      return weighted_sum(relaxed_gate(gate_logit(t, ctrl, gamma), noise, 1.0), w);
    });
  }
  {
    // mean(z) through CIR and controller with frozen noise: the invariant the
    // gating module promises for its full differentiable path.
    RngStream prng(RngStream::mix(seed, 0xC3));
    auto ctrl = make_controller<double>(4, prng);
    D gamma = D::full({1}, -2.0, true);
    RngStream nrng(RngStream::mix(seed, 0x6C));
    D noise = gumbel_sample<double>({2, 2}, nrng);
    D x = rnd({2, 4, 3, 3}, rng, 1.0, true);
    D r = rnd({2, 4, 3, 3}, rng, 1.0, true);
    auto pipeline = [&](const D& xx, const D& rr) {
      D logit = gate_logit(cir(xx, rr, 1e-8), controller_forward(xx, ctrl), gamma);
      return mean_all(relaxed_gate(logit, noise, 0.8));
    };
    check("gating.pipeline.x", x, [&](D& t) { return pipeline(t, r); });
    check("gating.pipeline.r", r, [&](D& t) { return pipeline(x, t); });
  }

  // --- losses ---
  {
    D f0 = rnd({2, 3, 3, 3}, rng, 1.0, true), f1 = rnd({2, 3, 3, 3}, rng);
    D g0 = rnd({2, 3, 3, 3}, rng, 1.0, true), g1 = rnd({2, 3, 3, 3}, rng);
    auto cons = [&](const D& a, const D& b) {
      return consistency_loss<double>({a, f1}, {b, g1}, 1e-8);
    };
    check("losses.consistency.full", f0, [&](D& t) { return cons(t, g0); });
    check("losses.consistency.gated", g0, [&](D& t) { return cons(f0, t); });
  }
  {
    D raw = rnd({6}, rng, 1.0, true);
    check("losses.mean_gate", raw, [&](D& t) {
      GateDecisionT<double> d0, d1;
      d0.z = sigmoid(t);
      d1.z = sigmoid(affine(t, 0.5, 0.1));
      return mean_gate<double>({d0, d1});
    });
    // Above the hinge: g_bar ~ sigmoid(mean) ~ 0.5ish with tau 0.2.
    check("losses.flops.above", raw, [&](D& t) {
      return flops_loss(mean_all(sigmoid(t)), 0.2, 0.7);
    });
    // Below the hinge the gradient must be exactly zero; both sides of the
    // comparison are 0 and the check passes with error 0.
    check("losses.flops.below", raw, [&](D& t) {
      return flops_loss(mean_all(sigmoid(t)), 0.999, 0.7);
    });
    check("losses.total", raw, [&](D& t) {
      D ce = mean_all(map_elementwise(t, MapFn::kSquare));
      D cons = mean_all(sigmoid(t));
      D fl = flops_loss(mean_all(sigmoid(t)), 0.2, 0.5);
      return total_loss(ce, cons, fl, 0.05, 3.0);
    });
  }

  // --- full gated block, end to end ---
  {
    RngStream prng(RngStream::mix(seed, 0xB10C));
    GateConfigT<double> gcfg;
    gcfg.temperature = 1.0;
    auto block = make_gated_block<double>(4, 4, 1, -1.5, true, prng);
    RngStream nrng(RngStream::mix(seed, 0x6D));
    D noise = gumbel_sample<double>({2, 2}, nrng);
    D x = rnd({2, 4, 3, 3}, rng, 1.0, true);
    D wy = rnd({2, 4, 3, 3}, rng, 0.3);
    auto block_loss = [&](const D& xx) {
      D identity = xx;
      D hmid = relu(batchnorm2d(conv2d(xx, block.conv1), block.bn1, true));
      D r = batchnorm2d(conv2d(hmid, block.conv2), block.bn2, true);
      GateDecisionT<double> dec;
      dec.cir = cir(identity, r, 1e-8);
      dec.controller_out = controller_forward(xx, block.controller);
      dec.logit = gate_logit(dec.cir, dec.controller_out, block.gamma);
      dec.z = relaxed_gate(dec.logit, noise, gcfg.temperature);
      D z4 = expand(reshape(dec.z, {2, 1, 1, 1}), identity.shape());
      D y = add(identity, mul(z4, r));
      D full = add(identity, r);
      D task = weighted_sum(y, wy);
      D cons = consistency_loss<double>({full}, {y}, 1e-8);
      D fl = flops_loss(mean_gate<double>({dec}), 0.3, 1.0);
      return total_loss(task, cons, fl, 0.05, 3.0);
    };
    check("model.gated_block.x", x, [&](D& t) { return block_loss(t); });
    check("model.gated_block.conv1", block.conv1.weight,
          [&](D&) { return block_loss(x); });
    check("model.gated_block.gamma", block.gamma, [&](D&) { return block_loss(x); });
    check("model.gated_block.controller", block.controller.w1.weight,
          [&](D&) { return block_loss(x); });
    check("model.gated_block.bn2.gamma", block.bn2.gamma,
          [&](D&) { return block_loss(x); });
  }

  return entries;
}

inline bool gradcheck_all_pass(const std::vector<GradcheckEntry>& entries) {
  for (const auto& e : entries) {
    if (!e.pass) return false;
  }
  return !entries.empty();
}

}  // namespace cosinegate
