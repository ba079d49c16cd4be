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

#ifndef APVIT_MODEL_HPP_
#define APVIT_MODEL_HPP_

// Stem → patch pooling → embedding → pooled encoder → linear head.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "apvit/app.hpp"
#include "apvit/ops.hpp"
#include "apvit/random.hpp"
#include "apvit/stem.hpp"
#include "apvit/tensor.hpp"
#include "apvit/transformer.hpp"

namespace apvit {

enum class PoolingMode { Hard, Soft, None };
enum class HeadKind { Clt, Gap };

inline PoolingMode parse_pooling_mode(std::string_view text) {
  if (text == "HARD") return PoolingMode::Hard;
  if (text == "SOFT") return PoolingMode::Soft;
  if (text == "NONE") return PoolingMode::None;
  throw ConfigError("unknown pooling mode '" + std::string(text) + "' (expected HARD, SOFT or NONE)");
}

inline std::string_view to_string(PoolingMode m) {
  switch (m) {
    case PoolingMode::Hard: return "HARD";
    case PoolingMode::Soft: return "SOFT";
    case PoolingMode::None: return "NONE";
  }
  return "?";
}

inline HeadKind parse_head_kind(std::string_view text) {
  if (text == "CLT") return HeadKind::Clt;
  if (text == "GAP") return HeadKind::Gap;
  throw ConfigError("unknown head kind '" + std::string(text) + "' (expected CLT or GAP)");
}

inline std::string_view to_string(HeadKind h) { return h == HeadKind::Clt ? "CLT" : "GAP"; }

struct ApvitConfig {
  StemConfig stem;
  std::size_t embed_dim = 64;
  std::size_t blocks = 8;
  std::size_t heads = 4;
  std::size_t k = 48;
  double r = 0.8;
  CriterionKind criterion = CriterionKind::Abs;
  AtpVariant atp_variant = AtpVariant::Sum;
  PoolingMode pooling = PoolingMode::Hard;
  HeadKind head = HeadKind::Clt;
  std::size_t num_classes = 4;
  std::size_t lanet_ratio = 8;
  /// Negates the head weight gradient; negative control for gradient checks.
  bool debug_flip_grad = false;

  std::size_t patch_count() const { return stem.patch_count(); }
  std::size_t feature_channels() const { return stem.output_channels(); }
  std::size_t lanet_width() const { return feature_channels() / lanet_ratio; }

  /// Patch tokens entering the encoder.
  std::size_t app_keep() const { return pooling == PoolingMode::Hard ? k : patch_count(); }

  KeepSchedule schedule() const { return keep_schedule(app_keep(), r, blocks); }

  void validate() const {
    stem.validate();
    if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " must be a positive multiple of heads " +
                        std::to_string(heads));
    }
    if (blocks == 0 || blocks % 2 != 0) throw ConfigError("blocks must be even and positive");
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("keep rate r must lie in (0, 1]");
    if (k < 1 || k > patch_count()) {
      throw ConfigError("keep number k=" + std::to_string(k) + " outside [1, " + std::to_string(patch_count()) + "]");
    }
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (criterion == CriterionKind::Lanet) {
      if (lanet_ratio == 0 || feature_channels() % lanet_ratio != 0) {
        throw ConfigError("feature channels " + std::to_string(feature_channels()) +
                          " not divisible by lanet_ratio " + std::to_string(lanet_ratio));
      }
    }
  }
};

struct ApvitParams {
  StemParams stem;
  std::optional<LanetParams> lanet;
  Tensor embed_w;    // [C, D]
  Tensor embed_b;    // [D]
  Tensor pos_table;  // [H·W + 1, D]; row 0 belongs to the class token
  Tensor cls_token;  // [D]
  std::vector<BlockParams> blocks;
  Tensor norm_gamma, norm_beta;
  Tensor head_w;  // [D, classes]
  Tensor head_b;  // [classes]

  /// Calls f(name, tensor) for every tensor in canonical checkpoint order.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (std::size_t s = 0; s < self.stem.kernels.size(); ++s) {
      f("stem." + std::to_string(s) + ".kernel", self.stem.kernels[s]);
      f("stem." + std::to_string(s) + ".bias", self.stem.biases[s]);
    }
    if (self.lanet) {
      f(std::string("lanet.w1"), self.lanet->w1);
      f(std::string("lanet.b1"), self.lanet->b1);
      f(std::string("lanet.w2"), self.lanet->w2);
      f(std::string("lanet.b2"), self.lanet->b2);
    }
    f(std::string("embed.weight"), self.embed_w);
    f(std::string("embed.bias"), self.embed_b);
    f(std::string("pos_table"), self.pos_table);
    f(std::string("cls_token"), self.cls_token);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      const std::string prefix = "blocks." + std::to_string(i) + ".";
      BlockParams::visit(self.blocks[i], [&](std::string_view name, auto& t) { f(prefix + std::string(name), t); });
    }
    f(std::string("norm.gamma"), self.norm_gamma);
    f(std::string("norm.beta"), self.norm_beta);
    f(std::string("head.weight"), self.head_w);
    f(std::string("head.bias"), self.head_b);
  }

  template <typename F>
  void for_each(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, std::forward<F>(f));
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for_each([&](const std::string&, Tensor& t) { out.push_back(&t); });
    return out;
  }
  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for_each([&](const std::string&, const Tensor& t) { out.push_back(&t); });
    return out;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for_each([&](const std::string& name, const Tensor&) { out.push_back(name); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

  /// Same structure, all zeros.
  ApvitParams zeros_like() const {
    ApvitParams out = *this;
    out.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
    return out;
  }
};

/// All-zero parameters with the shapes implied by `config`.
inline ApvitParams zero_params(const ApvitConfig& config) {
  config.validate();
  ApvitParams p;
  const StemConfig& sc = config.stem;
  std::size_t cin = sc.input_channels;
  for (std::size_t s = 0; s < sc.stages; ++s) {
    p.stem.kernels.emplace_back(Shape{sc.channels[s], cin, 3, 3});
    p.stem.biases.emplace_back(Shape{sc.channels[s]});
    cin = sc.channels[s];
  }
  const std::size_t c = config.feature_channels(), d = config.embed_dim;
  if (config.criterion == CriterionKind::Lanet) {
    const std::size_t hidden = config.lanet_width();
    p.lanet = LanetParams{Tensor({hidden, c, 1, 1}), Tensor({hidden}), Tensor({1, hidden, 1, 1}), Tensor({1})};
  }
  p.embed_w = Tensor({c, d});
  p.embed_b = Tensor({d});
  p.pos_table = Tensor({config.patch_count() + 1, d});
  p.cls_token = Tensor({d});
  p.blocks.assign(config.blocks, BlockParams::zeros(d));
  p.norm_gamma = Tensor({d});
  p.norm_beta = Tensor({d});
  p.head_w = Tensor({d, config.num_classes});
  p.head_b = Tensor({config.num_classes});
  return p;
}

namespace detail {

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

inline bool is_layer_norm_gain(std::string_view name) { return ends_with(name, ".gamma"); }

inline bool is_zero_initialized(std::string_view name) {
  return ends_with(name, ".bias") || ends_with(name, ".beta") || ends_with(name, ".b1") || ends_with(name, ".b2") ||
         name == "pos_table" || name == "cls_token";
}

}  // namespace detail

/// Glorot-uniform weights, zero biases / class token / positional table,
/// unit LayerNorm gains. Deterministic in `seed`.
inline ApvitParams init_params(const ApvitConfig& config, std::uint64_t seed) {
  ApvitParams p = zero_params(config);
  Rng rng(seed);
  p.for_each([&](const std::string& name, Tensor& t) {
    if (detail::is_layer_norm_gain(name)) {
      t.fill(1.0);
      return;
    }
    if (detail::is_zero_initialized(name)) return;
    double fan_in = 0.0, fan_out = 0.0;
    if (t.rank() == 4) {
      const double receptive = static_cast<double>(t.dim(2) * t.dim(3));
      fan_in = static_cast<double>(t.dim(1)) * receptive;
      fan_out = static_cast<double>(t.dim(0)) * receptive;
    } else {
      fan_in = static_cast<double>(t.dim(0));
      fan_out = static_cast<double>(t.dim(1));
    }
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : t.values()) v = rng.uniform(-bound, bound);
  });
  return p;
}

/// Weight decay applies to everything except LayerNorm parameters and the class token.
inline bool is_weight_decay_exempt(std::string_view name) {
  return detail::ends_with(name, ".gamma") || detail::ends_with(name, ".beta") || name == "cls_token";
}

struct Diagnostics {
  std::vector<std::size_t> app_indices;           // patches entering the encoder, ascending
  std::vector<std::vector<std::size_t>> trail;    // surviving patch ids after each block
  Tensor criterion_map;                           // [H, W]
  Tensor logits;
};

struct ForwardCache {
  StemCache stem;
  StemOutput stem_out;
  AttentionMap2D attn;
  std::vector<std::size_t> app_indices;
  Tensor patch_tokens;  // [k', C] as fed to the embedding
  EncoderCache encoder;
  Tensor final_tokens;
  Tensor readout;  // [1, D] input of the head
};

struct ForwardResult {
  Tensor logits;
  Diagnostics diagnostics;
};

namespace detail {

inline FeatureMap criterion_source(const StemOutput& out, const StemConfig& config) {
  return config.linear_tap ? FeatureMap{out.tap} : out.features;
}

}  // namespace detail

inline ForwardResult forward(const Tensor& image, const ApvitParams& params, const ApvitConfig& config,
                             ForwardCache* cache = nullptr) {
  config.validate();
  if ((config.criterion == CriterionKind::Lanet) != params.lanet.has_value()) {
    throw ConfigError("parameters do not match the configured criterion");
  }
  const std::size_t d = config.embed_dim;
  StemOutput stem_out = stem_forward(normalize_image(image), params.stem, config.stem, cache ? &cache->stem : nullptr);
  const FeatureMap& features = stem_out.features;
  const LanetParams* lanet = params.lanet ? &*params.lanet : nullptr;

  AttentionMap2D attn;
  if (config.pooling == PoolingMode::None) {
    // Diagnostics only; the baseline never pays for the criterion.
    FlopCounter::Pause pause;
    attn = criterion_map(detail::criterion_source(stem_out, config.stem), config.criterion, lanet);
  } else {
    attn = criterion_map(detail::criterion_source(stem_out, config.stem), config.criterion, lanet);
  }

  std::vector<std::size_t> indices;
  Tensor tokens;
  switch (config.pooling) {
    case PoolingMode::Hard: {
      PatchSelection sel = select_top_k(features, attn, config.k);
      indices = std::move(sel.indices);
      tokens = std::move(sel.tokens);
      break;
    }
    case PoolingMode::Soft:
      tokens = flatten_tokens(soft_pool(features, attn));
      break;
    case PoolingMode::None:
      tokens = flatten_tokens(features);
      break;
  }
  if (indices.empty()) {
    indices.resize(features.patches());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  }

  Tensor embedded = matmul(tokens, params.embed_w);
  add_row_bias(embedded, params.embed_b);
  TokenSeq seq{Tensor({indices.size() + 1, d}), indices};
  for (std::size_t c = 0; c < d; ++c) seq.tokens(0, c) = params.cls_token[c] + params.pos_table(0, c);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    for (std::size_t c = 0; c < d; ++c) seq.tokens(j + 1, c) = embedded(j, c) + params.pos_table(indices[j] + 1, c);
  }

  EncoderOutput enc = encoder_forward(seq, params.blocks, config.heads, keep_schedule(indices.size(), config.r, config.blocks),
                                      config.atp_variant, cache ? &cache->encoder : nullptr);
  const Tensor normed = layer_norm(enc.final.tokens, params.norm_gamma, params.norm_beta);
  Tensor readout({1, d});
  if (config.head == HeadKind::Clt) {
    for (std::size_t c = 0; c < d; ++c) readout[c] = normed(0, c);
  } else {
    const std::size_t n = normed.dim(0) - 1;
    for (std::size_t i = 1; i <= n; ++i) {
      for (std::size_t c = 0; c < d; ++c) readout[c] += normed(i, c);
    }
    for (std::size_t c = 0; c < d; ++c) readout[c] /= static_cast<double>(n);
  }
  Tensor logits = matmul(readout, params.head_w);
  add_row_bias(logits, params.head_b);
  logits = logits.reshaped({config.num_classes});

  ForwardResult result;
  result.logits = logits;
  result.diagnostics = Diagnostics{indices, enc.trail, attn.weights, logits};
  if (cache) {
    cache->stem_out = std::move(stem_out);
    cache->attn = std::move(attn);
    cache->app_indices = std::move(indices);
    cache->patch_tokens = std::move(tokens);
    cache->final_tokens = std::move(enc.final.tokens);
    cache->readout = std::move(readout);
  }
  return result;
}

/// Gradients of a scalar loss with respect to every parameter given
/// d(loss)/d(logits). Selections are treated as constants.
inline ApvitParams backward(const ForwardCache& cache, const ApvitParams& params, const ApvitConfig& config,
                            const Tensor& d_logits) {
  FlopCounter::Pause pause;
  const std::size_t d = config.embed_dim;
  ApvitParams grads = params.zeros_like();

  const Tensor dl = d_logits.reshaped({1, config.num_classes});
  grads.head_w = matmul_tn(cache.readout, dl);
  grads.head_b = d_logits.reshaped({config.num_classes});
  const Tensor d_readout = matmul_nt(dl, params.head_w);

  Tensor d_normed(cache.final_tokens.shape());
  if (config.head == HeadKind::Clt) {
    for (std::size_t c = 0; c < d; ++c) d_normed(0, c) = d_readout[c];
  } else {
    const std::size_t n = d_normed.dim(0) - 1;
    for (std::size_t i = 1; i <= n; ++i) {
      for (std::size_t c = 0; c < d; ++c) d_normed(i, c) = d_readout[c] / static_cast<double>(n);
    }
  }
  auto ln = layer_norm_backward(cache.final_tokens, params.norm_gamma, d_normed);
  grads.norm_gamma = std::move(ln.dgamma);
  grads.norm_beta = std::move(ln.dbeta);

  const Tensor d_seq = encoder_backward(cache.encoder, params.blocks, config.heads, ln.dx, grads.blocks);

  const auto& indices = cache.app_indices;
  Tensor d_embedded({indices.size(), d});
  for (std::size_t c = 0; c < d; ++c) {
    grads.cls_token[c] = d_seq(0, c);
    grads.pos_table(0, c) += d_seq(0, c);
  }
  for (std::size_t j = 0; j < indices.size(); ++j) {
    for (std::size_t c = 0; c < d; ++c) {
      d_embedded(j, c) = d_seq(j + 1, c);
      grads.pos_table(indices[j] + 1, c) += d_seq(j + 1, c);
    }
  }
  grads.embed_w = matmul_tn(cache.patch_tokens, d_embedded);
  grads.embed_b = sum_rows(d_embedded);
  const Tensor d_tokens = matmul_nt(d_embedded, params.embed_w);

  const FeatureMap& features = cache.stem_out.features;
  const std::size_t h = features.height(), w = features.width();
  Tensor d_features;
  std::optional<Tensor> d_tap;
  switch (config.pooling) {
    case PoolingMode::Hard:
      d_features = unflatten_tokens(gather_rows_backward(features.patches(), indices, d_tokens), h, w);
      break;
    case PoolingMode::None:
      d_features = unflatten_tokens(d_tokens, h, w);
      break;
    case PoolingMode::Soft: {
      auto sp = soft_pool_backward(features, cache.attn, unflatten_tokens(d_tokens, h, w));
      d_features = std::move(sp.d_fmap);
      const LanetParams* lanet = params.lanet ? &*params.lanet : nullptr;
      auto cg = criterion_map_backward(detail::criterion_source(cache.stem_out, config.stem), config.criterion, lanet,
                                       sp.d_attn);
      if (cg.d_lanet) grads.lanet = std::move(cg.d_lanet);
      if (config.stem.linear_tap) {
        d_tap = std::move(cg.d_source);
      } else {
        add_inplace(d_features, cg.d_source);
      }
      break;
    }
  }
  grads.stem = stem_backward(cache.stem, params.stem, config.stem, d_features, d_tap ? &*d_tap : nullptr);
  if (config.debug_flip_grad) {
    for (double& v : grads.head_w.values()) v = -v;
  }
  return grads;
}

/// Index of the largest logit; the smaller index wins ties.
inline std::size_t argmax(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

inline std::size_t predict(const Tensor& image, const ApvitParams& params, const ApvitConfig& config) {
  return argmax(forward(image, params, config).logits);
}

/// Hash of every discrete decision taken in a forward pass (ReLU masks,
/// pooling argmaxes, criterion branches, patch and token selections). Two
/// passes with equal signatures lie on the same smooth piece of the network.
inline std::uint64_t branch_signature(const ForwardCache& cache, const ApvitParams& params, const ApvitConfig& config) {
  std::uint64_t hash = 1469598103934665603ull;
  auto mix = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      hash ^= (v >> (8 * b)) & 0xffu;
      hash *= 1099511628211ull;
    }
  };
  for (std::size_t s = 0; s < cache.stem.pooled.size(); ++s) {
    for (double v : cache.stem.pooled[s].values()) mix(v > 0.0);
    for (std::size_t a : max_pool2d_argmax(cache.stem.conv_out[s], 2, 2)) mix(a);
  }
  if (config.pooling != PoolingMode::None) {
    const FeatureMap source = detail::criterion_source(cache.stem_out, config.stem);
    const std::size_t plane = source.patches();
    switch (config.criterion) {
      case CriterionKind::Abs:
        for (double v : source.data.values()) mix(v > 0.0 ? 1 : (v < 0.0 ? 2 : 0));
        break;
      case CriterionKind::Max:
        for (std::size_t p = 0; p < plane; ++p) {
          std::size_t best = 0;
          for (std::size_t ch = 1; ch < source.channels(); ++ch) {
            if (source.data[ch * plane + p] > source.data[best * plane + p]) best = ch;
          }
          mix(best);
        }
        break;
      case CriterionKind::Lanet:
        for (double v : detail::lanet_hidden_preact(source.data, *params.lanet).values()) mix(v > 0.0);
        break;
      case CriterionKind::Sum:
        break;
    }
  }
  for (std::size_t i : cache.app_indices) mix(i);
  for (const auto& rows : cache.encoder.kept) {
    mix(rows.size());
    for (std::size_t r : rows) mix(r);
  }
  return hash;
}

}  // namespace apvit

#endif  // APVIT_MODEL_HPP_
