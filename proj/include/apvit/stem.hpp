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

#ifndef APVIT_STEM_HPP_
#define APVIT_STEM_HPP_

#include <cstddef>
#include <string>
#include <vector>

#include "apvit/ops.hpp"
#include "apvit/tensor.hpp"

namespace apvit {

/// Plain conv → ReLU → 2×2 max-pool stages producing the patch grid.
struct StemConfig {
  std::size_t stages = 2;
  std::vector<std::size_t> channels{16, 32};
  std::size_t input_side = 32;
  std::size_t input_channels = 1;
  /// Compute criteria on the last stage's pre-ReLU map instead of its output.
  bool linear_tap = true;

  void validate() const {
    if (stages == 0) throw ConfigError("stem: stages must be >= 1");
    if (channels.size() != stages) {
      throw ConfigError("stem: expected " + std::to_string(stages) + " channel counts, got " +
                        std::to_string(channels.size()));
    }
    for (std::size_t c : channels) {
      if (c == 0) throw ConfigError("stem: channel counts must be positive");
    }
    if (input_channels == 0) throw ConfigError("stem: input_channels must be positive");
    if (input_side == 0 || input_side % (std::size_t{1} << stages) != 0) {
      throw ConfigError("stem: input_side " + std::to_string(input_side) + " not divisible by 2^" +
                        std::to_string(stages));
    }
  }

  std::size_t downsample() const { return std::size_t{1} << stages; }
  std::size_t output_side() const { return input_side / downsample(); }
  std::size_t patch_count() const { return output_side() * output_side(); }
  std::size_t output_channels() const { return channels.back(); }
};

/// Per-sample [C, H, W] feature map.
struct FeatureMap {
  Tensor data;

  std::size_t channels() const { return data.dim(0); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
  std::size_t patches() const { return height() * width(); }
};

struct StemParams {
  std::vector<Tensor> kernels;  // [Cout, Cin, 3, 3] per stage
  std::vector<Tensor> biases;   // [Cout] per stage
};

/// Maps byte-scaled pixels to [-1, 1] via (x/255 - 0.5)/0.5.
inline Tensor normalize_image(const Tensor& raw) {
  Tensor out(raw.shape());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] / 255.0 - 0.5) / 0.5;
  return out;
}

struct StemCache {
  std::vector<Tensor> inputs;
  std::vector<Tensor> conv_out;
  std::vector<Tensor> pooled;
};

struct StemOutput {
  FeatureMap features;
  /// Last stage pooled map before its ReLU; features == relu(tap).
  Tensor tap;
};

// ReLU and max-pooling commute, so pooling first gives the same map as
// conv → ReLU → pool and exposes the pre-activation tap for free.
inline StemOutput stem_forward(const Tensor& image, const StemParams& params, const StemConfig& config,
                               StemCache* cache = nullptr) {
  if (image.rank() != 3 || image.dim(0) != config.input_channels || image.dim(1) != config.input_side ||
      image.dim(2) != config.input_side) {
    throw DimensionError("stem: image " + shape_string(image.shape()) + " does not match configured [" +
                         std::to_string(config.input_channels) + ", " + std::to_string(config.input_side) + ", " +
                         std::to_string(config.input_side) + "]");
  }
  if (cache) *cache = StemCache{};
  Tensor x = image;
  Tensor pooled;
  for (std::size_t s = 0; s < config.stages; ++s) {
    Tensor conv = conv2d(x, params.kernels[s], 1, 1);
    const std::size_t plane = conv.dim(1) * conv.dim(2);
    for (std::size_t c = 0; c < conv.dim(0); ++c) {
      const double b = params.biases[s][c];
      for (std::size_t i = 0; i < plane; ++i) conv[c * plane + i] += b;
    }
    pooled = max_pool2d(conv, 2, 2);
    Tensor act = relu(pooled);
    if (cache) {
      cache->inputs.push_back(std::move(x));
      cache->conv_out.push_back(std::move(conv));
      cache->pooled.push_back(pooled);
    }
    x = std::move(act);
  }
  return {FeatureMap{std::move(x)}, std::move(pooled)};
}

/// Parameter gradients given d(features) and, optionally, d(tap).
inline StemParams stem_backward(const StemCache& cache, const StemParams& params, const StemConfig& config,
                                const Tensor& d_features, const Tensor* d_tap = nullptr) {
  StemParams grads;
  grads.kernels.resize(config.stages);
  grads.biases.resize(config.stages);
  Tensor d_act = d_features;
  for (std::size_t s = config.stages; s-- > 0;) {
    Tensor d_pooled = relu_backward(cache.pooled[s], d_act);
    if (s + 1 == config.stages && d_tap) add_inplace(d_pooled, *d_tap);
    const Tensor d_conv = max_pool2d_backward(cache.conv_out[s], 2, 2, d_pooled);
    Tensor d_bias({d_conv.dim(0)});
    const std::size_t plane = d_conv.dim(1) * d_conv.dim(2);
    for (std::size_t c = 0; c < d_conv.dim(0); ++c) {
      for (std::size_t i = 0; i < plane; ++i) d_bias[c] += d_conv[c * plane + i];
    }
    auto g = conv2d_backward(cache.inputs[s], params.kernels[s], 1, 1, d_conv, s > 0);
    grads.kernels[s] = std::move(g.dkernels);
    grads.biases[s] = std::move(d_bias);
    if (s > 0) d_act = std::move(g.dinput);
  }
  return grads;
}

}  // namespace apvit

#endif  // APVIT_STEM_HPP_
