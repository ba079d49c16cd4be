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

#ifndef APVIT_APP_HPP_
#define APVIT_APP_HPP_

// Attentive patch pooling: reduce the feature map to a per-position score and
// keep only the highest-scoring patches.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "apvit/ops.hpp"
#include "apvit/stem.hpp"
#include "apvit/tensor.hpp"

namespace apvit {

enum class CriterionKind { Sum, Abs, Max, Lanet };

inline CriterionKind parse_criterion(std::string_view text) {
  if (text == "SUM") return CriterionKind::Sum;
  if (text == "ABS") return CriterionKind::Abs;
  if (text == "MAX") return CriterionKind::Max;
  if (text == "LANET") return CriterionKind::Lanet;
  throw ConfigError("unknown criterion '" + std::string(text) + "' (expected SUM, ABS, MAX or LANET)");
}

inline std::string_view to_string(CriterionKind kind) {
  switch (kind) {
    case CriterionKind::Sum: return "SUM";
    case CriterionKind::Abs: return "ABS";
    case CriterionKind::Max: return "MAX";
    case CriterionKind::Lanet: return "LANET";
  }
  return "?";
}

/// Two 1×1 convolutions C → C/ρ → 1 with a ReLU between; no output sigmoid.
struct LanetParams {
  Tensor w1;  // [C/ρ, C, 1, 1]
  Tensor b1;  // [C/ρ]
  Tensor w2;  // [1, C/ρ, 1, 1]
  Tensor b2;  // [1]
};

struct AttentionMap2D {
  Tensor weights;  // [H, W]
};

struct PatchSelection {
  std::vector<std::size_t> indices;  // ascending flat positions
  Tensor tokens;                     // [k, C]
};

namespace detail {

inline Tensor add_channel_bias(Tensor x, const Tensor& bias) {
  const std::size_t plane = x.dim(1) * x.dim(2);
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    for (std::size_t i = 0; i < plane; ++i) x[c * plane + i] += bias[c];
  }
  return x;
}

inline Tensor channel_sums(const Tensor& x) {
  const std::size_t plane = x.dim(1) * x.dim(2);
  Tensor out({x.dim(0)});
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c] += x[c * plane + i];
  }
  return out;
}

inline Tensor lanet_hidden_preact(const Tensor& source, const LanetParams& lanet) {
  return add_channel_bias(conv2d(source, lanet.w1), lanet.b1);
}

}  // namespace detail

inline AttentionMap2D criterion_map(const FeatureMap& fmap, CriterionKind kind, const LanetParams* lanet = nullptr) {
  if ((kind == CriterionKind::Lanet) != (lanet != nullptr)) {
    throw ConfigError(kind == CriterionKind::Lanet ? "LANET criterion requires LANet parameters"
                                                   : "LANet parameters given for a hand-designed criterion");
  }
  const Tensor& x = fmap.data;
  const std::size_t c = fmap.channels(), h = fmap.height(), w = fmap.width();
  const std::size_t plane = h * w;
  if (kind == CriterionKind::Lanet) {
    const Tensor hidden = relu(detail::lanet_hidden_preact(x, *lanet));
    const Tensor out = detail::add_channel_bias(conv2d(hidden, lanet->w2), lanet->b2);
    return {out.reshaped({h, w})};
  }
  Tensor attn({h, w});
  for (std::size_t p = 0; p < plane; ++p) {
    double acc = kind == CriterionKind::Max ? x[p] : 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = x[ch * plane + p];
      switch (kind) {
        case CriterionKind::Sum: acc += v; break;
        case CriterionKind::Abs: acc += std::abs(v); break;
        case CriterionKind::Max: acc = std::max(acc, v); break;
        case CriterionKind::Lanet: break;
      }
    }
    attn[p] = acc;
  }
  return {attn};
}

struct CriterionGrads {
  Tensor d_source;
  std::optional<LanetParams> d_lanet;
};

inline CriterionGrads criterion_map_backward(const FeatureMap& fmap, CriterionKind kind, const LanetParams* lanet,
                                             const Tensor& d_attn) {
  const Tensor& x = fmap.data;
  const std::size_t c = fmap.channels(), h = fmap.height(), w = fmap.width();
  const std::size_t plane = h * w;
  CriterionGrads grads{Tensor(x.shape()), std::nullopt};
  if (kind == CriterionKind::Lanet) {
    const Tensor pre = detail::lanet_hidden_preact(x, *lanet);
    const Tensor hidden = relu(pre);
    const Tensor d_out = d_attn.reshaped({1, h, w});
    auto g2 = conv2d_backward(hidden, lanet->w2, 1, 0, d_out);
    const Tensor d_pre = relu_backward(pre, g2.dinput);
    auto g1 = conv2d_backward(x, lanet->w1, 1, 0, d_pre);
    grads.d_source = std::move(g1.dinput);
    grads.d_lanet =
        LanetParams{std::move(g1.dkernels), detail::channel_sums(d_pre), std::move(g2.dkernels), detail::channel_sums(d_out)};
    return grads;
  }
  for (std::size_t p = 0; p < plane; ++p) {
    if (kind == CriterionKind::Max) {
      std::size_t best = 0;
      for (std::size_t ch = 1; ch < c; ++ch) {
        if (x[ch * plane + p] > x[best * plane + p]) best = ch;
      }
      grads.d_source[best * plane + p] = d_attn[p];
      continue;
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double v = x[ch * plane + p];
      double slope = 1.0;
      if (kind == CriterionKind::Abs) slope = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
      grads.d_source[ch * plane + p] = slope * d_attn[p];
    }
  }
  return grads;
}

/// Positions of the k largest scores, ties toward the smaller index,
/// returned in ascending order.
inline std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw ConfigError("keep number " + std::to_string(k) + " outside [1, " + std::to_string(scores.size()) + "]");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

/// [C, H, W] → [H·W, C], one token per spatial position.
inline Tensor flatten_tokens(const FeatureMap& fmap) {
  const std::size_t c = fmap.channels(), plane = fmap.patches();
  Tensor out({plane, c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < plane; ++p) out(p, ch) = fmap.data[ch * plane + p];
  }
  return out;
}

inline Tensor unflatten_tokens(const Tensor& tokens, std::size_t h, std::size_t w) {
  const std::size_t c = tokens.dim(1), plane = h * w;
  Tensor out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < plane; ++p) out[ch * plane + p] = tokens(p, ch);
  }
  return out;
}

inline PatchSelection select_top_k(const FeatureMap& fmap, const AttentionMap2D& attn, std::size_t k) {
  if (attn.weights.size() != fmap.patches()) {
    throw DimensionError("select_top_k: attention " + shape_string(attn.weights.shape()) + " vs feature map " +
                         shape_string(fmap.data.shape()));
  }
  auto indices = top_k_indices(attn.weights.values(), k);
  Tensor tokens = gather_rows(flatten_tokens(fmap), indices);
  return {std::move(indices), std::move(tokens)};
}

/// Multiplies every channel by sigmoid(attn); keeps all positions.
inline FeatureMap soft_pool(const FeatureMap& fmap, const AttentionMap2D& attn) {
  if (attn.weights.size() != fmap.patches()) {
    throw DimensionError("soft_pool: attention " + shape_string(attn.weights.shape()) + " vs feature map " +
                         shape_string(fmap.data.shape()));
  }
  const std::size_t plane = fmap.patches();
  Tensor out(fmap.data.shape());
  for (std::size_t ch = 0; ch < fmap.channels(); ++ch) {
    for (std::size_t p = 0; p < plane; ++p) out[ch * plane + p] = fmap.data[ch * plane + p] * sigmoid(attn.weights[p]);
  }
  return {std::move(out)};
}

struct SoftPoolGrads {
  Tensor d_fmap;
  Tensor d_attn;
};

inline SoftPoolGrads soft_pool_backward(const FeatureMap& fmap, const AttentionMap2D& attn, const Tensor& d_out) {
  const std::size_t plane = fmap.patches();
  SoftPoolGrads g{Tensor(fmap.data.shape()), Tensor(attn.weights.shape())};
  for (std::size_t p = 0; p < plane; ++p) {
    const double s = sigmoid(attn.weights[p]);
    double acc = 0.0;
    for (std::size_t ch = 0; ch < fmap.channels(); ++ch) {
      const std::size_t i = ch * plane + p;
      g.d_fmap[i] = d_out[i] * s;
      acc += d_out[i] * fmap.data[i];
    }
    g.d_attn[p] = acc * s * (1.0 - s);
  }
  return g;
}

}  // namespace apvit

#endif  // APVIT_APP_HPP_
