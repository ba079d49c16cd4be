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

#ifndef APVIT_TESTS_ORACLES_HPP_
#define APVIT_TESTS_ORACLES_HPP_

// Slow reference implementations used only by the tests.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "apvit/apvit.hpp"

namespace oracle {

using apvit::Tensor;

inline Tensor random_tensor(apvit::Shape shape, apvit::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), p = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < p; ++t) acc += a(i, t) * b(t, j);
      c(i, j) = acc;
    }
  }
  return c;
}

inline Tensor conv2d(const Tensor& in, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out({cout, oh, ow});
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v) {
              const long iy = static_cast<long>(y * stride + u) - static_cast<long>(pad);
              const long ix = static_cast<long>(x * stride + v) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              acc += k[((co * cin + ci) * kh + u) * kw + v] * in(ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
        out(co, y, x) = acc;
      }
  return out;
}

inline Tensor max_pool(const Tensor& in, std::size_t win) {
  const std::size_t c = in.dim(0), oh = in.dim(1) / win, ow = in.dim(2) / win;
  Tensor out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double best = -INFINITY;
        for (std::size_t u = 0; u < win; ++u)
          for (std::size_t v = 0; v < win; ++v) best = std::max(best, in(ch, y * win + u, x * win + v));
        out(ch, y, x) = best;
      }
  return out;
}

/// Top-k by full sort: descending score, ascending index on ties; result ascending.
inline std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Central difference of f at every coordinate of x.
inline Tensor numeric_grad(Tensor& x, const std::function<double()>& f, double eps = 1e-5) {
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = f();
    x[i] = saved - eps;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

inline double max_rel_error(const Tensor& analytic, const Tensor& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, apvit::relative_error(analytic[i], numeric[i]));
  }
  return worst;
}

/// Σ w ⊙ y for a fixed random weight tensor: a generic scalar downstream loss.
inline double weighted_sum(const Tensor& y, const Tensor& w) {
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * w[i];
  return acc;
}

inline std::vector<long double> softmax_ld(const std::vector<double>& row) {
  long double total = 0.0L;
  std::vector<long double> out;
  for (double v : row) out.push_back(std::exp(static_cast<long double>(v)));
  for (long double v : out) total += v;
  for (long double& v : out) v /= total;
  return out;
}

/// Hand count of matmul FLOPs for the desk model; no library code involved.
inline std::uint64_t desk_flops(std::uint64_t side, std::uint64_t cin, std::uint64_t c1, std::uint64_t c2,
                                std::uint64_t d, std::uint64_t classes, const std::vector<std::uint64_t>& patch_counts,
                                std::uint64_t app_tokens) {
  std::uint64_t total = 2 * cin * c1 * 9 * side * side + 2 * c1 * c2 * 9 * (side / 2) * (side / 2);
  total += 2 * c2 * d * app_tokens;
  for (std::uint64_t n : patch_counts) {
    const std::uint64_t t = n + 1;
    total += 2 * t * d * d * 3;      // q, k, v
    total += 2 * t * t * d;          // logits, all heads
    total += 2 * t * t * d;          // attention · values
    total += 2 * t * d * d;          // output projection
    total += 2 * t * d * 4 * d * 2;  // MLP
  }
  return total + 2 * d * classes;
}

}  // namespace oracle

#endif  // APVIT_TESTS_ORACLES_HPP_
