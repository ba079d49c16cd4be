// Copyright 2026 The APViT-Desk Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef APVIT_OPS_HPP_
#define APVIT_OPS_HPP_

// Dense kernels with hand-written backward passes. Each forward is a pure
// function of its arguments; each *_backward recomputes whatever it needs
// from the forward inputs and the upstream gradient.

#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "apvit/tensor.hpp"

namespace apvit {

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
  }
}

// c[m,n] += a[m,p] * b[p,n], accumulating over p in index order.
using Vec4 = double __attribute__((vector_size(32)));

inline Vec4 load4(const double* p) {
  Vec4 v;
  __builtin_memcpy(&v, p, sizeof(v));
  return v;
}

inline void store4(double* p, Vec4 v) { __builtin_memcpy(p, &v, sizeof(v)); }

/// c[m×n] += a[m×p] · b[p×n]. Each output element is accumulated in
/// increasing t, so results match a plain triple loop bit for bit.
inline void gemm_accumulate(const double* __restrict a, const double* __restrict b, double* __restrict c,
                            std::size_t m, std::size_t p, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      Vec4 acc[4][2];
      for (std::size_t r = 0; r < 4; ++r) {
        acc[r][0] = load4(c + (i + r) * n + j);
        acc[r][1] = load4(c + (i + r) * n + j + 4);
      }
      const double* a0 = a + i * p;
      for (std::size_t t = 0; t < p; ++t) {
        const Vec4 b0 = load4(b + t * n + j), b1 = load4(b + t * n + j + 4);
        for (std::size_t r = 0; r < 4; ++r) {
          const double ar = a0[r * p + t];
          acc[r][0] += ar * b0;
          acc[r][1] += ar * b1;
        }
      }
      for (std::size_t r = 0; r < 4; ++r) {
        store4(c + (i + r) * n + j, acc[r][0]);
        store4(c + (i + r) * n + j + 4, acc[r][1]);
      }
    }
    if (j < n) {
      for (std::size_t r = 0; r < 4; ++r) {
        double* ci = c + (i + r) * n;
        const double* ai = a + (i + r) * p;
        for (std::size_t t = 0; t < p; ++t) {
          const double ait = ai[t];
          const double* bt = b + t * n;
          for (std::size_t q = j; q < n; ++q) ci[q] += ait * bt[q];
        }
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * p;
    for (std::size_t t = 0; t < p; ++t) {
      const double ait = ai[t];
      const double* bt = b + t * n;
      for (std::size_t q = 0; q < n; ++q) ci[q] += ait * bt[q];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products

inline Tensor transpose(const Tensor& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(j, i) = x(i, j);
  }
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), p = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  detail::gemm_accumulate(a.data(), b.data(), c.data(), m, p, n);
  FlopCounter::record(2ull * m * p * n);
  ensure_finite(c, "matmul");
  return c;
}

/// a · bᵀ
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

/// aᵀ · b
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("matmul_tn: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  }
  const std::size_t p = a.dim(0), m = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const Tensor at = transpose(a);
  detail::gemm_accumulate(at.data(), b.data(), c.data(), m, p, n);
  FlopCounter::record(2ull * m * p * n);
  return c;
}

struct MatmulGrads {
  Tensor da;
  Tensor db;
};

inline MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dc) {
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

// ---------------------------------------------------------------------------
// Softmax

inline Tensor softmax_rows(const Tensor& x) {
  detail::require_rank(x, 2, "softmax_rows");
  Tensor y(x.shape());
  const std::size_t n = x.dim(1);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    auto in = x.row(i);
    auto out = y.row(i);
    double peak = in[0];
    for (std::size_t j = 1; j < n; ++j) peak = std::max(peak, in[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - peak);
      total += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= total;
  }
  ensure_finite(y, "softmax_rows");
  return y;
}

/// Backward given the forward OUTPUT y.
inline Tensor softmax_rows_backward(const Tensor& y, const Tensor& dy) {
  Tensor dx(y.shape());
  const std::size_t n = y.dim(1);
  for (std::size_t i = 0; i < y.dim(0); ++i) {
    auto yr = y.row(i);
    auto dyr = dy.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += yr[j] * dyr[j];
    auto dxr = dx.row(i);
    for (std::size_t j = 0; j < n; ++j) dxr[j] = yr[j] * (dyr[j] - dot);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis

inline constexpr double kLayerNormEps = 1e-6;

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps) {
  if (x.rank() == 0 || gamma.size() != x.shape().back() || beta.size() != x.shape().back()) {
    throw DimensionError("layer_norm: input " + shape_string(x.shape()) + " vs gamma " +
                         shape_string(gamma.shape()) + ", beta " + shape_string(beta.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * n;
    double* out = y.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[j] = (in[j] - mean) * inv * gamma[j] + beta[j];
  }
  ensure_finite(y, "layer_norm");
  return y;
}

struct LayerNormGrads {
  Tensor dx;
  Tensor dgamma;
  Tensor dbeta;
};

inline LayerNormGrads layer_norm_backward(const Tensor& x, const Tensor& gamma, const Tensor& dy,
                                          double eps = kLayerNormEps) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  LayerNormGrads g{Tensor(x.shape()), Tensor(gamma.shape()), Tensor(gamma.shape())};
  std::vector<double> xhat(n), dxhat(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * n;
    const double* dout = dy.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[j] = (in[j] - mean) * inv;
      dxhat[j] = dout[j] * gamma[j];
      sum_dxhat += dxhat[j];
      sum_dxhat_xhat += dxhat[j] * xhat[j];
      g.dgamma[j] += dout[j] * xhat[j];
      g.dbeta[j] += dout[j];
    }
    double* dx = g.dx.data() + r * n;
    const double scale = inv / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) {
      dx[j] = scale * (static_cast<double>(n) * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Convolution and pooling on [C, H, W] maps

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < kernel) {
    throw DimensionError("conv2d: kernel extent " + std::to_string(kernel) + " exceeds padded input " +
                         std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride = 1, std::size_t pad = 0) {
  detail::require_rank(input, 3, "conv2d input");
  detail::require_rank(kernels, 4, "conv2d kernels");
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  if (kernels.dim(1) != input.dim(0)) {
    throw DimensionError("conv2d: input " + shape_string(input.shape()) + " does not match kernels " +
                         shape_string(kernels.shape()));
  }
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  const std::size_t oh = conv_output_extent(h, kh, stride, pad);
  const std::size_t ow = conv_output_extent(w, kw, stride, pad);
  Tensor out({cout, oh, ow});
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t u = 0; u < kh; ++u) {
        for (std::size_t v = 0; v < kw; ++v) {
          const double weight = kernels[((co * cin + ci) * kh + u) * kw + v];
          for (std::size_t y = 0; y < oh; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + u) - ipad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* in_row = input.data() + (ci * h + static_cast<std::size_t>(iy)) * w;
            double* out_row = out.data() + (co * oh + y) * ow;
            for (std::size_t x = 0; x < ow; ++x) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + v) - ipad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              out_row[x] += weight * in_row[ix];
            }
          }
        }
      }
    }
  }
  FlopCounter::record(2ull * cin * cout * kh * kw * oh * ow);
  ensure_finite(out, "conv2d");
  return out;
}

struct Conv2dGrads {
  Tensor dinput;
  Tensor dkernels;
};

inline Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& kernels, std::size_t stride,
                                   std::size_t pad, const Tensor& dout, bool want_dinput = true) {
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  const std::size_t oh = dout.dim(1), ow = dout.dim(2);
  Conv2dGrads g{want_dinput ? Tensor(input.shape()) : Tensor(), Tensor(kernels.shape())};
  const auto ipad = static_cast<std::ptrdiff_t>(pad);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t u = 0; u < kh; ++u) {
        for (std::size_t v = 0; v < kw; ++v) {
          const std::size_t kidx = ((co * cin + ci) * kh + u) * kw + v;
          const double weight = kernels[kidx];
          double acc = 0.0;
          for (std::size_t y = 0; y < oh; ++y) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + u) - ipad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const std::size_t in_off = (ci * h + static_cast<std::size_t>(iy)) * w;
            const double* dout_row = dout.data() + (co * oh + y) * ow;
            for (std::size_t x = 0; x < ow; ++x) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + v) - ipad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              acc += dout_row[x] * input[in_off + static_cast<std::size_t>(ix)];
              if (want_dinput) g.dinput[in_off + static_cast<std::size_t>(ix)] += dout_row[x] * weight;
            }
          }
          g.dkernels[kidx] = acc;
        }
      }
    }
  }
  return g;
}

inline void check_pool_geometry(const Tensor& input, std::size_t window, std::size_t stride) {
  detail::require_rank(input, 3, "max_pool2d");
  if (window == 0 || window != stride) throw ConfigError("max_pool2d: only window == stride >= 1 is supported");
  if (input.dim(1) % stride != 0 || input.dim(2) % stride != 0) {
    throw DimensionError("max_pool2d: map " + shape_string(input.shape()) + " not divisible by stride " +
                         std::to_string(stride));
  }
}

/// Flat input offsets of each window's maximum, first occurrence in row-major
/// window order on ties.
inline std::vector<std::size_t> max_pool2d_argmax(const Tensor& input, std::size_t window, std::size_t stride) {
  check_pool_geometry(input, window, stride);
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t oh = h / stride, ow = w / stride;
  std::vector<std::size_t> arg(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        std::size_t best = (ch * h + y * stride) * w + x * stride;
        for (std::size_t u = 0; u < window; ++u) {
          for (std::size_t v = 0; v < window; ++v) {
            const std::size_t idx = (ch * h + y * stride + u) * w + x * stride + v;
            if (input[idx] > input[best]) best = idx;
          }
        }
        arg[(ch * oh + y) * ow + x] = best;
      }
    }
  }
  return arg;
}

inline Tensor max_pool2d(const Tensor& input, std::size_t window, std::size_t stride) {
  const auto arg = max_pool2d_argmax(input, window, stride);
  Tensor out({input.dim(0), input.dim(1) / stride, input.dim(2) / stride});
  for (std::size_t i = 0; i < arg.size(); ++i) out[i] = input[arg[i]];
  return out;
}

inline Tensor max_pool2d_backward(const Tensor& input, std::size_t window, std::size_t stride, const Tensor& dout) {
  const auto arg = max_pool2d_argmax(input, window, stride);
  Tensor dx(input.shape());
  for (std::size_t i = 0; i < arg.size(); ++i) dx[arg[i]] += dout[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Row selection

inline void validate_row_indices(std::span<const std::size_t> indices, std::size_t rows) {
  std::vector<bool> seen(rows, false);
  for (std::size_t idx : indices) {
    if (idx >= rows) {
      throw IndexError("gather_rows: index " + std::to_string(idx) + " out of range [0, " + std::to_string(rows) +
                       ")");
    }
    if (seen[idx]) throw IndexError("gather_rows: duplicate index " + std::to_string(idx));
    seen[idx] = true;
  }
}

inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  detail::require_rank(x, 2, "gather_rows");
  validate_row_indices(indices, x.dim(0));
  if (indices.empty()) throw IndexError("gather_rows: empty index list");
  const std::size_t d = x.dim(1);
  Tensor out({indices.size(), d});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    std::copy_n(x.data() + indices[j] * d, d, out.data() + j * d);
  }
  return out;
}

inline Tensor gather_rows_backward(std::size_t rows, std::span<const std::size_t> indices, const Tensor& dout) {
  const std::size_t d = dout.dim(1);
  Tensor dx({rows, d});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    for (std::size_t c = 0; c < d; ++c) dx(indices[j], c) += dout(j, c);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Pointwise

inline Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return y;
}

inline Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
  return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return cdf + x * pdf;
}

inline Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = gelu(x[i]);
  return y;
}

inline Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_derivative(x[i]);
  return dx;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// x[i, :] += bias
inline void add_row_bias(Tensor& x, const Tensor& bias) {
  const std::size_t n = bias.size();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += bias[i % n];
}

/// Column sums of a [m, n] gradient (bias gradient of add_row_bias).
inline Tensor sum_rows(const Tensor& dx) {
  const std::size_t n = dx.dim(1);
  Tensor out({n});
  for (std::size_t i = 0; i < dx.dim(0); ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += dx(i, j);
  }
  return out;
}

inline void add_inplace(Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape()) {
    throw DimensionError("add: shape mismatch " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
  }
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
}

// ---------------------------------------------------------------------------
// Value + backward closures for standalone use (gradient checks, tests).

template <std::size_t N>
struct GradPair {
  Tensor value;
  std::function<std::array<Tensor, N>(const Tensor&)> backward;
};

inline GradPair<2> matmul_op(Tensor a, Tensor b) {
  Tensor c = matmul(a, b);
  return {std::move(c), [a = std::move(a), b = std::move(b)](const Tensor& dc) {
            auto g = matmul_backward(a, b, dc);
            return std::array<Tensor, 2>{std::move(g.da), std::move(g.db)};
          }};
}

inline GradPair<1> softmax_rows_op(const Tensor& x) {
  Tensor y = softmax_rows(x);
  return {y, [y](const Tensor& dy) { return std::array<Tensor, 1>{softmax_rows_backward(y, dy)}; }};
}

inline GradPair<3> layer_norm_op(Tensor x, Tensor gamma, const Tensor& beta, double eps = kLayerNormEps) {
  Tensor y = layer_norm(x, gamma, beta, eps);
  return {std::move(y), [x = std::move(x), gamma = std::move(gamma), eps](const Tensor& dy) {
            auto g = layer_norm_backward(x, gamma, dy, eps);
            return std::array<Tensor, 3>{std::move(g.dx), std::move(g.dgamma), std::move(g.dbeta)};
          }};
}

inline GradPair<2> conv2d_op(Tensor input, Tensor kernels, std::size_t stride, std::size_t pad) {
  Tensor out = conv2d(input, kernels, stride, pad);
  return {std::move(out),
          [input = std::move(input), kernels = std::move(kernels), stride, pad](const Tensor& dout) {
            auto g = conv2d_backward(input, kernels, stride, pad, dout);
            return std::array<Tensor, 2>{std::move(g.dinput), std::move(g.dkernels)};
          }};
}

inline GradPair<1> max_pool2d_op(Tensor input, std::size_t window, std::size_t stride) {
  Tensor out = max_pool2d(input, window, stride);
  return {std::move(out), [input = std::move(input), window, stride](const Tensor& dout) {
            return std::array<Tensor, 1>{max_pool2d_backward(input, window, stride, dout)};
          }};
}

inline GradPair<1> gather_rows_op(const Tensor& x, std::vector<std::size_t> indices) {
  Tensor out = gather_rows(x, indices);
  return {std::move(out), [rows = x.dim(0), indices = std::move(indices)](const Tensor& dout) {
            return std::array<Tensor, 1>{gather_rows_backward(rows, indices, dout)};
          }};
}

}  // namespace apvit

#endif  // APVIT_OPS_HPP_
