#pragma once

// Neural layers: convolution (im2col + GEMM), batch norm, pooling, linear,
// cross-entropy. Conv, BN and cross-entropy carry hand-written backward
// closures; everything else composes tensor primitives.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cosinegate/tensor.hpp"

namespace cosinegate {

template <typename T>
struct Conv2dParamsT {
  TensorT<T> weight;  // [Cout, Cin, k, k]
  TensorT<T> bias;    // [Cout]; undefined handle when the layer has no bias
  int stride = 1;
  int padding = 0;
};

template <typename T>
struct BatchNorm2dStateT {
  TensorT<T> gamma, beta;                  // learnable affine
  TensorT<T> running_mean, running_var;    // EMA buffers, never on the tape
  T momentum = T(0.1);
  T epsilon = T(1e-5);
};

template <typename T>
struct LinearParamsT {
  TensorT<T> weight;  // [out, in]
  TensorT<T> bias;    // [out]
};

// He-normal init, std = sqrt(2 / fan_in); BN gamma=1, beta=0.

template <typename T>
Conv2dParamsT<T> make_conv2d(int cin, int cout, int k, int stride, int padding,
                             RngStream& rng, bool with_bias = false) {
  Conv2dParamsT<T> p;
  T stddev = std::sqrt(T(2) / static_cast<T>(cin * k * k));
  p.weight = TensorT<T>::randn({cout, cin, k, k}, rng, stddev, /*requires_grad=*/true);
  if (with_bias) p.bias = TensorT<T>::zeros({cout}, /*requires_grad=*/true);
  p.stride = stride;
  p.padding = padding;
  return p;
}

template <typename T>
BatchNorm2dStateT<T> make_batchnorm2d(int channels) {
  BatchNorm2dStateT<T> s;
  s.gamma = TensorT<T>::full({channels}, T(1), /*requires_grad=*/true);
  s.beta = TensorT<T>::zeros({channels}, /*requires_grad=*/true);
  s.running_mean = TensorT<T>::zeros({channels});
  s.running_var = TensorT<T>::full({channels}, T(1));
  return s;
}

template <typename T>
LinearParamsT<T> make_linear(int in, int out, RngStream& rng) {
  LinearParamsT<T> p;
  T stddev = std::sqrt(T(2) / static_cast<T>(in));
  p.weight = TensorT<T>::randn({out, in}, rng, stddev, /*requires_grad=*/true);
  p.bias = TensorT<T>::zeros({out}, /*requires_grad=*/true);
  return p;
}

namespace detail {

// cols layout: [Cin*k*k, B*Ho*Wo], column index = (b*Ho + oh)*Wo + ow.
template <typename T>
void im2col(const T* x, int b_sz, int c, int h, int w, int k, int stride, int pad,
            int ho, int wo, T* cols) {
  int64_t ncols = static_cast<int64_t>(b_sz) * ho * wo;
  for (int ci = 0; ci < c; ++ci) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        T* dst = cols + (static_cast<int64_t>(ci * k + kh) * k + kw) * ncols;
        for (int b = 0; b < b_sz; ++b) {
          const T* xb = x + (static_cast<int64_t>(b) * c + ci) * h * w;
          for (int oh = 0; oh < ho; ++oh) {
            int ih = oh * stride + kh - pad;
            if (ih < 0 || ih >= h) {
              for (int ow = 0; ow < wo; ++ow) *dst++ = T(0);
              continue;
            }
            const T* row = xb + static_cast<int64_t>(ih) * w;
            for (int ow = 0; ow < wo; ++ow) {
              int iw = ow * stride + kw - pad;
              *dst++ = (iw >= 0 && iw < w) ? row[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int b_sz, int c, int h, int w, int k, int stride,
                int pad, int ho, int wo, T* gx) {
  int64_t ncols = static_cast<int64_t>(b_sz) * ho * wo;
  for (int ci = 0; ci < c; ++ci) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const T* src = cols + (static_cast<int64_t>(ci * k + kh) * k + kw) * ncols;
        for (int b = 0; b < b_sz; ++b) {
          T* gxb = gx + (static_cast<int64_t>(b) * c + ci) * h * w;
          for (int oh = 0; oh < ho; ++oh) {
            int ih = oh * stride + kh - pad;
            if (ih < 0 || ih >= h) {
              src += wo;
              continue;
            }
            T* row = gxb + static_cast<int64_t>(ih) * w;
            for (int ow = 0; ow < wo; ++ow) {
              int iw = ow * stride + kw - pad;
              if (iw >= 0 && iw < w) row[iw] += *src;
              ++src;
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation with zero padding over NCHW input.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const Conv2dParamsT<T>& p) {
  if (x.shape().size() != 4) {
    throw std::invalid_argument("conv2d: expected NCHW input, got " +
                                shape_str(x.shape()));
  }
  const int b_sz = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const int cout = p.weight.shape()[0], k = p.weight.shape()[2];
  if (p.weight.shape()[1] != cin) {
    throw std::invalid_argument("conv2d: weight expects " +
                                std::to_string(p.weight.shape()[1]) +
                                " input channels, input has " + std::to_string(cin));
  }
  const int stride = p.stride, pad = p.padding;
  if (h + 2 * pad - k < 0 || w + 2 * pad - k < 0) {
    throw std::invalid_argument(
        "conv2d: kernel overruns padded input " + shape_str(x.shape()) + ", kernel " +
        std::to_string(k) + ", stride " + std::to_string(stride) + ", padding " +
        std::to_string(pad));
  }
  // Floor-division output size, the standard convention; stride-2 "same"
  // convs on even inputs (31/2, 27/2) depend on it.
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  const int64_t ncols = static_cast<int64_t>(b_sz) * ho * wo;
  const int kk = cin * k * k;

  std::vector<T> cols(static_cast<size_t>(kk) * ncols);
  detail::im2col(x.data(), b_sz, cin, h, w, k, stride, pad, ho, wo, cols.data());
  std::vector<T> out2d(static_cast<size_t>(cout) * ncols);
  gemm(false, false, cout, static_cast<int>(ncols), kk, T(1), p.weight.data(), kk,
       cols.data(), static_cast<int>(ncols), T(0), out2d.data(),
       static_cast<int>(ncols));
  cols.clear();
  cols.shrink_to_fit();

  const bool with_bias = p.bias.defined();
  std::vector<T> y(static_cast<size_t>(b_sz) * cout * ho * wo);
  for (int b = 0; b < b_sz; ++b) {
    for (int co = 0; co < cout; ++co) {
      const T* src = out2d.data() + static_cast<int64_t>(co) * ncols +
                     static_cast<int64_t>(b) * ho * wo;
      T* dst = y.data() + (static_cast<int64_t>(b) * cout + co) * ho * wo;
      T bias = with_bias ? p.bias.data()[co] : T(0);
      for (int i = 0; i < ho * wo; ++i) dst[i] = src[i] + bias;
    }
  }

  bool rec;
  TensorT<T> out = detail::make_op_result<T>(
      {b_sz, cout, ho, wo}, std::move(y),
      with_bias ? std::initializer_list<const TensorT<T>*>{&x, &p.weight, &p.bias}
                : std::initializer_list<const TensorT<T>*>{&x, &p.weight},
      &rec);
  if (rec) {
    auto xn = x.node(), wn = p.weight.node(), yn = out.node();
    auto bn = with_bias ? p.bias.node() : nullptr;
    Tape<T>::current()->record([xn, wn, bn, yn, b_sz, cin, h, w, cout, k, stride, pad,
                                ho, wo, ncols, kk] {
      if (yn->grad.empty()) return;
      // Gather upstream grad into the [Cout, B*Ho*Wo] GEMM layout.
      std::vector<T> gy2d(static_cast<size_t>(cout) * ncols);
      for (int b = 0; b < b_sz; ++b) {
        for (int co = 0; co < cout; ++co) {
          const T* src = yn->grad.data() + (static_cast<int64_t>(b) * cout + co) * ho * wo;
          T* dst = gy2d.data() + static_cast<int64_t>(co) * ncols +
                   static_cast<int64_t>(b) * ho * wo;
          for (int i = 0; i < ho * wo; ++i) dst[i] = src[i];
        }
      }
      if (bn && bn->requires_grad) {
        auto& gb = detail::ensure_grad(bn);
        for (int co = 0; co < cout; ++co) {
          const T* row = gy2d.data() + static_cast<int64_t>(co) * ncols;
          T acc = T(0);
          for (int64_t i = 0; i < ncols; ++i) acc += row[i];
          gb[co] += acc;
        }
      }
      if (wn->requires_grad) {
        // dW = dY2d · cols^T; the cols are recomputed rather than kept alive
        // across the forward pass to cap peak memory.
        std::vector<T> cols(static_cast<size_t>(kk) * ncols);
        detail::im2col(xn->data.data(), b_sz, cin, h, w, k, stride, pad, ho, wo,
                       cols.data());
        auto& gw = detail::ensure_grad(wn);
        gemm(false, true, cout, kk, static_cast<int>(ncols), T(1), gy2d.data(),
             static_cast<int>(ncols), cols.data(), static_cast<int>(ncols), T(1),
             gw.data(), kk);
      }
      if (xn->requires_grad) {
        std::vector<T> gcols(static_cast<size_t>(kk) * ncols);
        gemm(true, false, kk, static_cast<int>(ncols), cout, T(1), wn->data.data(), kk,
             gy2d.data(), static_cast<int>(ncols), T(0), gcols.data(),
             static_cast<int>(ncols));
        auto& gx = detail::ensure_grad(xn);
        detail::col2im_add(gcols.data(), b_sz, cin, h, w, k, stride, pad, ho, wo,
                           gx.data());
      }
    });
  }
  return out;
}

// Batch norm over NCHW. Train mode normalizes with batch statistics and
// updates the running EMA (unbiased variance in the EMA, biased in the
// normalization, matching the usual convention); eval mode uses the buffers.
template <typename T>
TensorT<T> batchnorm2d(const TensorT<T>& x, BatchNorm2dStateT<T>& s, bool train) {
  if (x.shape().size() != 4) {
    throw std::invalid_argument("batchnorm2d: expected NCHW input, got " +
                                shape_str(x.shape()));
  }
  const int b_sz = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (s.gamma.shape()[0] != c) {
    throw std::invalid_argument("batchnorm2d: state has " +
                                std::to_string(s.gamma.shape()[0]) +
                                " channels, input has " + std::to_string(c));
  }
  const int64_t m = static_cast<int64_t>(b_sz) * h * w;  // samples per channel
  const int64_t plane = static_cast<int64_t>(h) * w;

  std::vector<T> mean(c), invstd(c);
  if (train) {
    for (int ci = 0; ci < c; ++ci) {
      T acc = T(0);
      for (int b = 0; b < b_sz; ++b) {
        const T* p = x.data() + (static_cast<int64_t>(b) * c + ci) * plane;
        for (int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      T mu = acc / static_cast<T>(m);
      T vacc = T(0);
      for (int b = 0; b < b_sz; ++b) {
        const T* p = x.data() + (static_cast<int64_t>(b) * c + ci) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          T d = p[i] - mu;
          vacc += d * d;
        }
      }
      T var = vacc / static_cast<T>(m);
      mean[ci] = mu;
      invstd[ci] = T(1) / std::sqrt(var + s.epsilon);
      T unbiased = m > 1 ? vacc / static_cast<T>(m - 1) : var;
      s.running_mean.data()[ci] =
          (T(1) - s.momentum) * s.running_mean.data()[ci] + s.momentum * mu;
      s.running_var.data()[ci] =
          (T(1) - s.momentum) * s.running_var.data()[ci] + s.momentum * unbiased;
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mean[ci] = s.running_mean.data()[ci];
      invstd[ci] = T(1) / std::sqrt(s.running_var.data()[ci] + s.epsilon);
    }
  }

  std::vector<T> y(static_cast<size_t>(x.size()));
  for (int b = 0; b < b_sz; ++b) {
    for (int ci = 0; ci < c; ++ci) {
      const T* px = x.data() + (static_cast<int64_t>(b) * c + ci) * plane;
      T* py = y.data() + (static_cast<int64_t>(b) * c + ci) * plane;
      T g = s.gamma.data()[ci], be = s.beta.data()[ci];
      T mu = mean[ci], is = invstd[ci];
      for (int64_t i = 0; i < plane; ++i) py[i] = g * (px[i] - mu) * is + be;
    }
  }

  bool rec;
  TensorT<T> out = detail::make_op_result<T>(x.shape(), std::move(y),
                                             {&x, &s.gamma, &s.beta}, &rec);
  if (rec) {
    auto xn = x.node(), gn = s.gamma.node(), bn = s.beta.node(), yn = out.node();
    Tape<T>::current()->record([xn, gn, bn, yn, mean, invstd, b_sz, c, plane, m,
                                train] {
      if (yn->grad.empty()) return;
      for (int ci = 0; ci < c; ++ci) {
        T mu = mean[ci], is = invstd[ci], gam = gn->data[ci];
        T sum_g = T(0), sum_gx = T(0);  // sums of gy and gy*xhat
        for (int b = 0; b < b_sz; ++b) {
          const T* gy = yn->grad.data() + (static_cast<int64_t>(b) * c + ci) * plane;
          const T* px = xn->data.data() + (static_cast<int64_t>(b) * c + ci) * plane;
          for (int64_t i = 0; i < plane; ++i) {
            sum_g += gy[i];
            sum_gx += gy[i] * (px[i] - mu) * is;
          }
        }
        if (gn->requires_grad) detail::ensure_grad(gn)[ci] += sum_gx;
        if (bn->requires_grad) detail::ensure_grad(bn)[ci] += sum_g;
        if (xn->requires_grad) {
          auto& gx = detail::ensure_grad(xn);
          if (train) {
            T inv_m = T(1) / static_cast<T>(m);
            for (int b = 0; b < b_sz; ++b) {
              const T* gy = yn->grad.data() + (static_cast<int64_t>(b) * c + ci) * plane;
              const T* px = xn->data.data() + (static_cast<int64_t>(b) * c + ci) * plane;
              T* g = gx.data() + (static_cast<int64_t>(b) * c + ci) * plane;
              for (int64_t i = 0; i < plane; ++i) {
                T xhat = (px[i] - mu) * is;
                g[i] += gam * is * (gy[i] - inv_m * (sum_g + xhat * sum_gx));
              }
            }
          } else {
            // Running stats are constants in eval mode.
            for (int b = 0; b < b_sz; ++b) {
              const T* gy = yn->grad.data() + (static_cast<int64_t>(b) * c + ci) * plane;
              T* g = gx.data() + (static_cast<int64_t>(b) * c + ci) * plane;
              for (int64_t i = 0; i < plane; ++i) g[i] += gam * is * gy[i];
            }
          }
        }
      }
    });
  }
  return out;
}

// Spatial mean per channel per sample: [B,C,H,W] -> [B,C].
template <typename T>
TensorT<T> global_average_pool(const TensorT<T>& x) {
  if (x.shape().size() != 4) {
    throw std::invalid_argument("global_average_pool: expected NCHW input, got " +
                                shape_str(x.shape()));
  }
  return reduce(x, {2, 3}, ReduceKind::kMean);
}

// x[B,in] -> [B,out] with bias.
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const LinearParamsT<T>& p) {
  TensorT<T> y = matmul(x, transpose(p.weight));
  int b_sz = y.shape()[0], out = y.shape()[1];
  TensorT<T> b2d = reshape(p.bias, {1, out});
  return add(y, expand(b2d, {b_sz, out}));
}

// Mean over the batch of -log softmax(logits)[label], log-sum-exp stabilized.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2) {
    throw std::invalid_argument("cross_entropy: expected [B,K] logits, got " +
                                shape_str(logits.shape()));
  }
  const int b_sz = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<int>(labels.size()) != b_sz) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(b_sz));
  }
  for (int b = 0; b < b_sz; ++b) {
    if (labels[b] < 0 || labels[b] >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[b]) +
                              " out of range [0," + std::to_string(k) + ")");
    }
  }
  T total = T(0);
  for (int b = 0; b < b_sz; ++b) {
    const T* row = logits.data() + static_cast<int64_t>(b) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T sum = T(0);
    for (int j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    total += mx + std::log(sum) - row[labels[b]];
  }
  std::vector<T> out{total / static_cast<T>(b_sz)};
  bool rec;
  TensorT<T> loss = detail::make_op_result<T>({1}, std::move(out), {&logits}, &rec);
  if (rec) {
    auto ln = logits.node(), yn = loss.node();
    auto labs = labels;
    Tape<T>::current()->record([ln, yn, labs, b_sz, k] {
      if (yn->grad.empty()) return;
      T up = yn->grad[0] / static_cast<T>(b_sz);
      auto& g = detail::ensure_grad(ln);
      for (int b = 0; b < b_sz; ++b) {
        const T* row = ln->data.data() + static_cast<int64_t>(b) * k;
        T mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
        T* gr = g.data() + static_cast<int64_t>(b) * k;
        for (int j = 0; j < k; ++j) {
          T p = std::exp(row[j] - mx) / sum;
          gr[j] += up * (p - (j == labs[b] ? T(1) : T(0)));
        }
      }
    });
  }
  return loss;
}

}  // namespace cosinegate
