#pragma once

// Central-difference gradient verification. Runs one analytic backward pass,
// then perturbs each checked coordinate of x by ±h and compares. Meant to run
// at double precision; float tapes lack the headroom for 1e-4 tolerances.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include "cosinegate/tensor.hpp"

namespace cosinegate {

struct FdCheckResult {
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool nan_seen = false;

  bool pass(double tol) const { return !nan_seen && max_rel_err < tol; }
};

// f must be a pure function of x's current data (plus captured constants or
// parameters). max_coords > 0 checks an evenly spaced subset, 0 checks all.
template <typename T>
FdCheckResult finite_difference_check(const std::function<TensorT<T>(TensorT<T>&)>& f,
                                      TensorT<T>& x, T h, int64_t max_coords = 0) {
  if (!x.requires_grad()) {
    throw std::invalid_argument("finite_difference_check: x must require gradients");
  }
  x.clear_grad();
  {
    TapeScope<T> scope;
    TensorT<T> loss = f(x);
    scope.tape().backward(loss);
  }
  std::vector<T> analytic(static_cast<size_t>(x.size()), T(0));
  if (x.has_grad()) analytic = x.grad();

  FdCheckResult res;
  int64_t n = x.size();
  int64_t stride = 1;
  if (max_coords > 0 && n > max_coords) stride = (n + max_coords - 1) / max_coords;
  for (int64_t i = 0; i < n; i += stride) {
    T saved = x.data()[i];
    x.data()[i] = saved + h;
    double fp = static_cast<double>(f(x).item());
    x.data()[i] = saved - h;
    double fm = static_cast<double>(f(x).item());
    x.data()[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      res.nan_seen = true;
      res.worst_index = i;
      return res;
    }
    double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
    double a = static_cast<double>(analytic[i]);
    double rel = std::abs(a - numeric) /
                 std::max({std::abs(a), std::abs(numeric), 1e-8});
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_index = i;
      res.analytic_at_worst = a;
      res.numeric_at_worst = numeric;
    }
  }
  return res;
}

}  // namespace cosinegate
