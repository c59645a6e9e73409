#pragma once

// Gated residual networks: post-activation basic blocks where the residual
// branch is scaled by a per-sample gate before the final ReLU. Identity paths
// at stage transitions use a 1x1 stride-2 projection (+BN); CIR is computed
// between the projected identity and the residual so dimensions agree.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cosinegate/gating.hpp"
#include "cosinegate/nn.hpp"
#include "cosinegate/tensor.hpp"

namespace cosinegate {

enum class RunMode { kTrain, kEval, kForcedOpen, kForcedClosed };

template <typename T>
struct GatedBlockT {
  Conv2dParamsT<T> conv1, conv2;
  BatchNorm2dStateT<T> bn1, bn2;
  bool has_projection = false;
  Conv2dParamsT<T> proj_conv;
  BatchNorm2dStateT<T> proj_bn;
  ControllerParamsT<T> controller;
  TensorT<T> gamma;  // per-block gate scale, shape {1}
};

template <typename T>
struct GatedNetworkT {
  Conv2dParamsT<T> stem_conv;
  BatchNorm2dStateT<T> stem_bn;
  std::vector<GatedBlockT<T>> blocks;
  LinearParamsT<T> head;
  GateConfigT<T> gate_cfg;
  int num_classes = 10;
  int in_channels = 3;
};

template <typename T>
struct ForwardOutputT {
  TensorT<T> logits;  // [B, K]
  std::vector<GateDecisionT<T>> decisions;
  // Pre-ReLU block outputs kept for the consistency loss (train modes only):
  // full = identity + r, gated = identity + z*r.
  std::vector<TensorT<T>> full_outputs;
  std::vector<TensorT<T>> gated_outputs;
};

using GatedNetwork = GatedNetworkT<float>;
using ForwardOutput = ForwardOutputT<float>;

template <typename T>
GatedBlockT<T> make_gated_block(int cin, int cout, int stride, T gamma0,
                                bool gamma_learnable, RngStream& rng) {
  GatedBlockT<T> b;
  b.conv1 = make_conv2d<T>(cin, cout, 3, stride, 1, rng);
  b.bn1 = make_batchnorm2d<T>(cout);
  b.conv2 = make_conv2d<T>(cout, cout, 3, 1, 1, rng);
  b.bn2 = make_batchnorm2d<T>(cout);
  b.has_projection = (stride != 1 || cin != cout);
  if (b.has_projection) {
    b.proj_conv = make_conv2d<T>(cin, cout, 1, stride, 0, rng);
    b.proj_bn = make_batchnorm2d<T>(cout);
  }
  b.controller = make_controller<T>(cin, rng);
  b.gamma = TensorT<T>::full({1}, gamma0, gamma_learnable);
  return b;
}

template <typename T>
struct BlockResult {
  TensorT<T> y;     // identity + gate*r, pre-ReLU
  TensorT<T> full;  // identity + r, pre-ReLU (train modes only)
  GateDecisionT<T> decision;
};

// One gated block. rng supplies Gumbel noise and is only touched in train
// mode; eval is deterministic and mutates nothing but BN batch-stat reads.
template <typename T>
BlockResult<T> gated_block_forward(const TensorT<T>& x, GatedBlockT<T>& block,
                                   const GateConfigT<T>& cfg, RunMode mode,
                                   RngStream* rng) {
  const bool train_bn = mode != RunMode::kEval;
  TensorT<T> identity = x;
  if (block.has_projection) {
    identity = batchnorm2d(conv2d(x, block.proj_conv), block.proj_bn, train_bn);
  }
  TensorT<T> h = relu(batchnorm2d(conv2d(x, block.conv1), block.bn1, train_bn));
  TensorT<T> r = batchnorm2d(conv2d(h, block.conv2), block.bn2, train_bn);
  if (identity.shape() != r.shape()) {
    throw std::runtime_error("gated block: identity path " + shape_str(identity.shape()) +
                             " does not match residual path " + shape_str(r.shape()));
  }

  GateDecisionT<T> dec;
  dec.cir = cir(identity, r, cfg.epsilon_norm);
  dec.controller_out = controller_forward(x, block.controller);
  dec.logit = gate_logit(dec.cir, dec.controller_out, block.gamma);
  dec.hard = hard_gate(dec.logit, cfg.inference_threshold);

  const int b_sz = x.shape()[0];
  TensorT<T> gate;
  if (mode == RunMode::kTrain) {
    if (!rng) throw std::invalid_argument("gated block: train mode needs an rng stream");
    TensorT<T> noise = gumbel_sample<T>({b_sz, 2}, *rng);
    dec.z = relaxed_gate(dec.logit, noise, cfg.temperature);
    gate = dec.z;
  } else if (mode == RunMode::kForcedOpen) {
    dec.z = TensorT<T>::full({b_sz}, T(1));
    gate = dec.z;
  } else if (mode == RunMode::kForcedClosed) {
    dec.z = TensorT<T>::zeros({b_sz});
    gate = dec.z;
  } else {
    gate = dec.hard;
  }

  TensorT<T> gate4 = expand(reshape(gate, {b_sz, 1, 1, 1}), identity.shape());
  BlockResult<T> res;
  res.y = add(identity, mul(gate4, r));
  if (mode != RunMode::kEval) res.full = add(identity, r);
  res.decision = std::move(dec);
  return res;
}

// Sequential application of stem, blocks (with inter-block ReLU), and head.
// Gumbel noise for block i at a given step comes from an independent stream
// derived from (run_seed, step, i).
template <typename T>
ForwardOutputT<T> network_forward(GatedNetworkT<T>& net, const TensorT<T>& x,
                                  RunMode mode, uint64_t run_seed = 0,
                                  uint64_t step = 0) {
  const bool train_bn = mode != RunMode::kEval;
  TensorT<T> h = relu(batchnorm2d(conv2d(x, net.stem_conv), net.stem_bn, train_bn));
  ForwardOutputT<T> out;
  out.decisions.reserve(net.blocks.size());
  for (size_t i = 0; i < net.blocks.size(); ++i) {
    std::optional<RngStream> rng;
    if (mode == RunMode::kTrain) {
      rng.emplace(RngStream::mix(RngStream::mix(run_seed, step), i));
    }
    BlockResult<T> res = gated_block_forward(h, net.blocks[i], net.gate_cfg, mode,
                                             rng ? &*rng : nullptr);
    if (mode != RunMode::kEval) {
      out.full_outputs.push_back(res.full);
      out.gated_outputs.push_back(res.y);
    }
    out.decisions.push_back(std::move(res.decision));
    h = relu(res.y);
  }
  out.logits = linear(global_average_pool(h), net.head);
  return out;
}

// Gate-free reference: y = identity + r throughout, same weights. Used to
// verify that forcing every gate open reproduces a plain residual network.
template <typename T>
TensorT<T> plain_network_forward(GatedNetworkT<T>& net, const TensorT<T>& x,
                                 bool train_bn) {
  TensorT<T> h = relu(batchnorm2d(conv2d(x, net.stem_conv), net.stem_bn, train_bn));
  for (auto& block : net.blocks) {
    TensorT<T> identity = h;
    if (block.has_projection) {
      identity = batchnorm2d(conv2d(h, block.proj_conv), block.proj_bn, train_bn);
    }
    TensorT<T> t = relu(batchnorm2d(conv2d(h, block.conv1), block.bn1, train_bn));
    TensorT<T> r = batchnorm2d(conv2d(t, block.conv2), block.bn2, train_bn);
    h = relu(add(identity, r));
  }
  return linear(global_average_pool(h), net.head);
}

// ResNet-20-style CIFAR topology: stem 3->16, stages 16/32/64 with three
// blocks each, stride-2 projection at stage entries, GAP + linear head.
template <typename T>
GatedNetworkT<T> build_cifar_network(uint64_t seed, const GateConfigT<T>& cfg,
                                     T gamma0) {
  RngStream rng(RngStream::mix(seed, 0x5eed));
  GatedNetworkT<T> net;
  net.gate_cfg = cfg;
  net.in_channels = 3;
  net.stem_conv = make_conv2d<T>(3, 16, 3, 1, 1, rng);
  net.stem_bn = make_batchnorm2d<T>(16);
  const int widths[3] = {16, 32, 64};
  int cin = 16;
  for (int s = 0; s < 3; ++s) {
    for (int j = 0; j < 3; ++j) {
      int stride = (s > 0 && j == 0) ? 2 : 1;
      net.blocks.push_back(
          make_gated_block<T>(cin, widths[s], stride, gamma0, cfg.gamma_learnable, rng));
      cin = widths[s];
    }
  }
  net.head = make_linear<T>(64, 10, rng);
  return net;
}

// Reduced topology for 1x28x28 input: stem 1->16, stages 16x2 and 32x2,
// head 32->10.
template <typename T>
GatedNetworkT<T> build_mnist_network(uint64_t seed, const GateConfigT<T>& cfg,
                                     T gamma0) {
  RngStream rng(RngStream::mix(seed, 0x5eed));
  GatedNetworkT<T> net;
  net.gate_cfg = cfg;
  net.in_channels = 1;
  net.stem_conv = make_conv2d<T>(1, 16, 3, 1, 1, rng);
  net.stem_bn = make_batchnorm2d<T>(16);
  const int widths[2] = {16, 32};
  int cin = 16;
  for (int s = 0; s < 2; ++s) {
    for (int j = 0; j < 2; ++j) {
      int stride = (s > 0 && j == 0) ? 2 : 1;
      net.blocks.push_back(
          make_gated_block<T>(cin, widths[s], stride, gamma0, cfg.gamma_learnable, rng));
      cin = widths[s];
    }
  }
  net.head = make_linear<T>(32, 10, rng);
  return net;
}

// ---------------------------------------------------------------------------
// Named state access for the optimizer and checkpointing.

template <typename T>
struct NamedTensor {
  std::string name;
  TensorT<T> tensor;
  bool decay = false;  // weight decay applies (conv/linear weights, gate gamma)
};

namespace detail {

template <typename T>
void append_bn(std::vector<NamedTensor<T>>& out, const std::string& prefix,
               const BatchNorm2dStateT<T>& bn, bool buffers) {
  if (!buffers) {
    out.push_back({prefix + ".gamma", bn.gamma, false});
    out.push_back({prefix + ".beta", bn.beta, false});
  } else {
    out.push_back({prefix + ".running_mean", bn.running_mean, false});
    out.push_back({prefix + ".running_var", bn.running_var, false});
  }
}

}  // namespace detail

// Learnable parameters plus the gate scales (whether or not they are marked
// learnable; non-learnable gammas are simply excluded from the optimizer).
template <typename T>
std::vector<NamedTensor<T>> collect_parameters(GatedNetworkT<T>& net) {
  std::vector<NamedTensor<T>> out;
  out.push_back({"stem.conv.weight", net.stem_conv.weight, true});
  detail::append_bn(out, "stem.bn", net.stem_bn, false);
  for (size_t i = 0; i < net.blocks.size(); ++i) {
    auto& b = net.blocks[i];
    std::string p = "block" + std::to_string(i);
    out.push_back({p + ".conv1.weight", b.conv1.weight, true});
    detail::append_bn(out, p + ".bn1", b.bn1, false);
    out.push_back({p + ".conv2.weight", b.conv2.weight, true});
    detail::append_bn(out, p + ".bn2", b.bn2, false);
    if (b.has_projection) {
      out.push_back({p + ".proj.conv.weight", b.proj_conv.weight, true});
      detail::append_bn(out, p + ".proj.bn", b.proj_bn, false);
    }
    out.push_back({p + ".controller.w1.weight", b.controller.w1.weight, true});
    out.push_back({p + ".controller.w1.bias", b.controller.w1.bias, false});
    out.push_back({p + ".controller.w2.weight", b.controller.w2.weight, true});
    out.push_back({p + ".controller.w2.bias", b.controller.w2.bias, false});
    out.push_back({p + ".gate.gamma", b.gamma, true});
  }
  out.push_back({"head.weight", net.head.weight, true});
  out.push_back({"head.bias", net.head.bias, false});
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> collect_buffers(GatedNetworkT<T>& net) {
  std::vector<NamedTensor<T>> out;
  detail::append_bn(out, "stem.bn", net.stem_bn, true);
  for (size_t i = 0; i < net.blocks.size(); ++i) {
    auto& b = net.blocks[i];
    std::string p = "block" + std::to_string(i);
    detail::append_bn(out, p + ".bn1", b.bn1, true);
    detail::append_bn(out, p + ".bn2", b.bn2, true);
    if (b.has_projection) detail::append_bn(out, p + ".proj.bn", b.proj_bn, true);
  }
  return out;
}

// Full restorable state: parameters followed by BN buffers.
template <typename T>
std::vector<NamedTensor<T>> collect_state(GatedNetworkT<T>& net) {
  auto out = collect_parameters(net);
  auto buf = collect_buffers(net);
  out.insert(out.end(), buf.begin(), buf.end());
  return out;
}

template <typename T>
int64_t parameter_count(GatedNetworkT<T>& net) {
  int64_t n = 0;
  for (auto& p : collect_parameters(net)) n += p.tensor.size();
  return n;
}

}  // namespace cosinegate
