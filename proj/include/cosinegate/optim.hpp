#pragma once

// SGD with classic momentum, weight decay folded into the gradient, and a
// cosine-annealed learning rate applied at epoch boundaries.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cosinegate/model.hpp"
#include "cosinegate/tensor.hpp"

namespace cosinegate {

inline double cosine_anneal_lr(int epoch, int total_epochs, double lr0) {
  if (epoch < 0 || total_epochs <= 0 || epoch > total_epochs) {
    throw std::invalid_argument("cosine_anneal_lr: need 0 <= epoch <= total_epochs");
  }
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * epoch / total_epochs));
}

template <typename T>
class SgdStateT {
 public:
  SgdStateT(T lr0, T momentum, T weight_decay, int total_epochs)
      : lr0_(lr0),
        momentum_(momentum),
        weight_decay_(weight_decay),
        total_epochs_(total_epochs),
        lr_(lr0) {}

  T lr() const { return lr_; }
  T lr0() const { return lr0_; }
  int total_epochs() const { return total_epochs_; }

  void set_epoch(int epoch) {
    lr_ = static_cast<T>(cosine_anneal_lr(epoch, total_epochs_, static_cast<double>(lr0_)));
  }

  // v <- mu*v + (g + wd*p);  p <- p - lr*v. Parameters not marked
  // requires_grad are frozen state and skipped; a *learnable* parameter with
  // no populated gradient indicates a detached graph and is a hard error.
  void step(std::vector<NamedTensor<T>>& params) {
    if (velocity_.empty()) {
      velocity_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].tensor.requires_grad()) {
          velocity_[i].assign(static_cast<size_t>(params[i].tensor.size()), T(0));
        }
      }
    }
    if (velocity_.size() != params.size()) {
      throw std::invalid_argument("sgd_step: parameter list changed size");
    }
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.tensor.requires_grad()) continue;
      if (!p.tensor.has_grad()) {
        throw std::runtime_error("sgd_step: missing gradient for parameter '" + p.name +
                                 "' (detached graph?)");
      }
      const std::vector<T>& g = p.tensor.grad();
      std::vector<T>& v = velocity_[i];
      T* w = p.tensor.data();
      T wd = p.decay ? weight_decay_ : T(0);
      for (size_t j = 0; j < v.size(); ++j) {
        v[j] = momentum_ * v[j] + (g[j] + wd * w[j]);
        w[j] -= lr_ * v[j];
      }
    }
  }

 private:
  T lr0_, momentum_, weight_decay_;
  int total_epochs_;
  T lr_;
  std::vector<std::vector<T>> velocity_;
};

using SgdState = SgdStateT<float>;

template <typename T>
void sgd_step(std::vector<NamedTensor<T>>& params, SgdStateT<T>& state) {
  state.step(params);
}

template <typename T>
void zero_grad(std::vector<NamedTensor<T>>& params) {
  for (auto& p : params) p.tensor.clear_grad();
}

}  // namespace cosinegate
