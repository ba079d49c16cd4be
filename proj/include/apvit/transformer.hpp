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

#ifndef APVIT_TRANSFORMER_HPP_
#define APVIT_TRANSFORMER_HPP_

// Pre-LN transformer encoder with attentive token pooling in the second half
// of the blocks. Row 0 of every token matrix is the class token.

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "apvit/app.hpp"
#include "apvit/ops.hpp"
#include "apvit/tensor.hpp"

namespace apvit {

struct TokenSeq {
  Tensor tokens;                            // [T+1, D]
  std::vector<std::size_t> kept_patch_ids;  // original flat patch index of rows 1..T

  std::size_t patch_count() const { return tokens.dim(0) - 1; }
  std::size_t width() const { return tokens.dim(1); }
};

struct BlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv, wo;  // [D, D]
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1;  // [D, 4D], [4D]
  Tensor w2, b2;  // [4D, D], [D]

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f("ln1.gamma", self.ln1_gamma);
    f("ln1.beta", self.ln1_beta);
    f("attn.wq", self.wq);
    f("attn.wk", self.wk);
    f("attn.wv", self.wv);
    f("attn.wo", self.wo);
    f("ln2.gamma", self.ln2_gamma);
    f("ln2.beta", self.ln2_beta);
    f("mlp.w1", self.w1);
    f("mlp.b1", self.b1);
    f("mlp.w2", self.w2);
    f("mlp.b2", self.b2);
  }

  /// All-zero parameters (LN gains included) for embedding width d.
  static BlockParams zeros(std::size_t d) {
    return {Tensor({d}), Tensor({d}), Tensor({d, d}), Tensor({d, d}), Tensor({d, d}), Tensor({d, d}),
            Tensor({d}), Tensor({d}), Tensor({d, 4 * d}), Tensor({4 * d}), Tensor({4 * d, d}), Tensor({d})};
  }
};

/// Pre-softmax class-token logits against each patch token, per head.
struct AttnRecord {
  Tensor class_logits_per_head;  // [h, T]; empty when T == 0
};

enum class AtpVariant { Sum, Abs, Max };

inline AtpVariant parse_atp_variant(std::string_view text) {
  if (text == "SUM") return AtpVariant::Sum;
  if (text == "ABS") return AtpVariant::Abs;
  if (text == "MAX") return AtpVariant::Max;
  throw ConfigError("unknown ATP variant '" + std::string(text) + "' (expected SUM, ABS or MAX)");
}

inline std::string_view to_string(AtpVariant v) {
  switch (v) {
    case AtpVariant::Sum: return "SUM";
    case AtpVariant::Abs: return "ABS";
    case AtpVariant::Max: return "MAX";
  }
  return "?";
}

/// Patch-token count after each block; pooling starts at block M/2 (0-based).
struct KeepSchedule {
  std::vector<std::size_t> per_block_patch_counts;
  std::size_t atp_start_block = 0;

  /// Tokens entering the head: surviving patches plus the class token.
  std::size_t reserved_tokens() const { return per_block_patch_counts.back() + 1; }
};

/// floor(r · n), tolerant to r being a decimal that is not exactly
/// representable (0.6 · 80 must give 48). Never drops the last patch.
inline std::size_t keep_count(double r, std::size_t n) {
  const auto kept = static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9));
  return std::max<std::size_t>(1, std::min(kept, n));
}

inline KeepSchedule keep_schedule(std::size_t k, double r, std::size_t blocks) {
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError("keep rate r must lie in (0, 1], got " + std::to_string(r));
  if (blocks == 0 || blocks % 2 != 0) throw ConfigError("block count must be even and positive");
  if (k == 0) throw ConfigError("keep number k must be positive");
  KeepSchedule schedule;
  schedule.atp_start_block = blocks / 2;
  schedule.per_block_patch_counts.assign(blocks, k);
  for (std::size_t i = schedule.atp_start_block; i < blocks; ++i) {
    const std::size_t prev = i == 0 ? k : schedule.per_block_patch_counts[i - 1];
    schedule.per_block_patch_counts[i] = keep_count(r, prev);
  }
  return schedule;
}

namespace detail {

inline Tensor take_cols(const Tensor& x, std::size_t start, std::size_t width) {
  Tensor out({x.dim(0), width});
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    for (std::size_t j = 0; j < width; ++j) out(i, j) = x(i, start + j);
  }
  return out;
}

inline void put_cols(Tensor& dst, const Tensor& src, std::size_t start) {
  for (std::size_t i = 0; i < src.dim(0); ++i) {
    for (std::size_t j = 0; j < src.dim(1); ++j) dst(i, start + j) = src(i, j);
  }
}

}  // namespace detail

struct MsaCache {
  Tensor input, q, k, v;
  std::vector<Tensor> probs;  // per head [n, n]
  Tensor concat;
};

struct MsaResult {
  Tensor output;
  AttnRecord record;
};

/// Multi-head self-attention over already-normalized tokens x [n, D].
inline MsaResult msa_forward(const Tensor& x, const BlockParams& p, std::size_t heads, MsaCache* cache = nullptr) {
  const std::size_t n = x.dim(0), width = x.dim(1);
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("embedding width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::size_t d = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor q = matmul(x, p.wq), k = matmul(x, p.wk), v = matmul(x, p.wv);
  Tensor concat({n, width});
  MsaResult result;
  if (n > 1) result.record.class_logits_per_head = Tensor({heads, n - 1});
  std::vector<Tensor> probs;
  probs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = detail::take_cols(q, h * d, d);
    const Tensor kh = detail::take_cols(k, h * d, d);
    const Tensor vh = detail::take_cols(v, h * d, d);
    Tensor logits = matmul(qh, transpose(kh));
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] *= scale;
    for (std::size_t t = 1; t < n; ++t) result.record.class_logits_per_head(h, t - 1) = logits(0, t);
    Tensor a = softmax_rows(logits);
    detail::put_cols(concat, matmul(a, vh), h * d);
    probs.push_back(std::move(a));
  }
  result.output = matmul(concat, p.wo);
  if (cache) *cache = MsaCache{x, std::move(q), std::move(k), std::move(v), std::move(probs), std::move(concat)};
  return result;
}

/// Accumulates parameter gradients into `grads`; returns d(input).
inline Tensor msa_backward(const MsaCache& c, const BlockParams& p, std::size_t heads, const Tensor& d_out,
                           BlockParams& grads) {
  const std::size_t width = c.input.dim(1);
  const std::size_t d = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  add_inplace(grads.wo, matmul_tn(c.concat, d_out));
  const Tensor d_concat = matmul_nt(d_out, p.wo);
  Tensor dq(c.q.shape()), dk(c.k.shape()), dv(c.v.shape());
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = detail::take_cols(c.q, h * d, d);
    const Tensor kh = detail::take_cols(c.k, h * d, d);
    const Tensor vh = detail::take_cols(c.v, h * d, d);
    const Tensor d_oh = detail::take_cols(d_concat, h * d, d);
    const Tensor& a = c.probs[h];
    detail::put_cols(dv, matmul_tn(a, d_oh), h * d);
    Tensor d_logits = softmax_rows_backward(a, matmul_nt(d_oh, vh));
    for (std::size_t i = 0; i < d_logits.size(); ++i) d_logits[i] *= scale;
    detail::put_cols(dq, matmul(d_logits, kh), h * d);
    detail::put_cols(dk, matmul_tn(d_logits, qh), h * d);
  }
  add_inplace(grads.wq, matmul_tn(c.input, dq));
  add_inplace(grads.wk, matmul_tn(c.input, dk));
  add_inplace(grads.wv, matmul_tn(c.input, dv));
  Tensor dx = matmul_nt(dq, p.wq);
  add_inplace(dx, matmul_nt(dk, p.wk));
  add_inplace(dx, matmul_nt(dv, p.wv));
  return dx;
}

struct BlockCache {
  Tensor x, h1, x2, h2, u, g;
  MsaCache msa;
};

inline std::pair<TokenSeq, AttnRecord> block_forward(const TokenSeq& seq, const BlockParams& p, std::size_t heads,
                                                     BlockCache* cache = nullptr) {
  const Tensor& x = seq.tokens;
  Tensor h1 = layer_norm(x, p.ln1_gamma, p.ln1_beta);
  MsaResult attn = msa_forward(h1, p, heads, cache ? &cache->msa : nullptr);
  Tensor x2 = x;
  add_inplace(x2, attn.output);
  Tensor h2 = layer_norm(x2, p.ln2_gamma, p.ln2_beta);
  Tensor u = matmul(h2, p.w1);
  add_row_bias(u, p.b1);
  Tensor g = gelu(u);
  Tensor y = matmul(g, p.w2);
  add_row_bias(y, p.b2);
  add_inplace(y, x2);
  if (cache) {
    cache->x = x;
    cache->h1 = std::move(h1);
    cache->x2 = std::move(x2);
    cache->h2 = std::move(h2);
    cache->u = std::move(u);
    cache->g = std::move(g);
  }
  return {TokenSeq{std::move(y), seq.kept_patch_ids}, std::move(attn.record)};
}

inline Tensor block_backward(const BlockCache& c, const BlockParams& p, std::size_t heads, const Tensor& dy,
                             BlockParams& grads) {
  add_inplace(grads.w2, matmul_tn(c.g, dy));
  add_inplace(grads.b2, sum_rows(dy));
  const Tensor d_u = gelu_backward(c.u, matmul_nt(dy, p.w2));
  add_inplace(grads.w1, matmul_tn(c.h2, d_u));
  add_inplace(grads.b1, sum_rows(d_u));
  auto ln2 = layer_norm_backward(c.x2, p.ln2_gamma, matmul_nt(d_u, p.w1));
  add_inplace(grads.ln2_gamma, ln2.dgamma);
  add_inplace(grads.ln2_beta, ln2.dbeta);
  Tensor d_x2 = dy;
  add_inplace(d_x2, ln2.dx);
  const Tensor d_h1 = msa_backward(c.msa, p, heads, d_x2, grads);
  auto ln1 = layer_norm_backward(c.x, p.ln1_gamma, d_h1);
  add_inplace(grads.ln1_gamma, ln1.dgamma);
  add_inplace(grads.ln1_beta, ln1.dbeta);
  add_inplace(d_x2, ln1.dx);
  return d_x2;
}

/// Per-patch pooling score from the class-token logits.
inline Tensor atp_scores(const AttnRecord& rec, AtpVariant variant = AtpVariant::Sum) {
  const Tensor& logits = rec.class_logits_per_head;
  if (logits.empty()) return Tensor();
  const std::size_t heads = logits.dim(0), t_count = logits.dim(1);
  Tensor scores({t_count});
  for (std::size_t t = 0; t < t_count; ++t) {
    double acc = variant == AtpVariant::Max ? logits(0, t) : 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
      const double v = logits(h, t);
      switch (variant) {
        case AtpVariant::Sum: acc += v; break;
        case AtpVariant::Abs: acc += std::abs(v); break;
        case AtpVariant::Max: acc = std::max(acc, v); break;
      }
    }
    scores[t] = acc;
  }
  return scores;
}

/// Keeps the class token and the keep_num best-scoring patch tokens in their
/// current relative order. `kept_rows` receives the surviving row indices.
inline TokenSeq atp_select(const TokenSeq& seq, const Tensor& scores, std::size_t keep_num,
                           std::vector<std::size_t>* kept_rows = nullptr) {
  const std::size_t t_count = seq.patch_count();
  if (scores.size() != t_count) {
    throw DimensionError("atp_select: " + std::to_string(scores.size()) + " scores for " + std::to_string(t_count) +
                         " patch tokens");
  }
  const auto chosen = top_k_indices(scores.values(), keep_num);
  std::vector<std::size_t> rows{0};
  std::vector<std::size_t> ids;
  rows.reserve(keep_num + 1);
  ids.reserve(keep_num);
  for (std::size_t t : chosen) {
    rows.push_back(t + 1);
    ids.push_back(seq.kept_patch_ids[t]);
  }
  TokenSeq out{gather_rows(seq.tokens, rows), std::move(ids)};
  if (kept_rows) *kept_rows = std::move(rows);
  return out;
}

struct EncoderCache {
  std::vector<BlockCache> blocks;
  std::vector<std::size_t> rows_before;        // token rows entering each block
  std::vector<std::vector<std::size_t>> kept;  // rows kept after each block; empty if not pooled
};

struct EncoderOutput {
  TokenSeq final;
  std::vector<std::vector<std::size_t>> trail;  // kept_patch_ids after each block
  std::vector<AttnRecord> records;

  Tensor class_embedding() const {
    const auto row = final.tokens.row(0);
    return Tensor({row.size()}, std::vector<double>(row.begin(), row.end()));
  }
};

inline EncoderOutput encoder_forward(const TokenSeq& seq, const std::vector<BlockParams>& blocks, std::size_t heads,
                                     const KeepSchedule& schedule, AtpVariant variant = AtpVariant::Sum,
                                     EncoderCache* cache = nullptr) {
  if (schedule.per_block_patch_counts.size() != blocks.size()) {
    throw ConfigError("keep schedule covers " + std::to_string(schedule.per_block_patch_counts.size()) +
                      " blocks, encoder has " + std::to_string(blocks.size()));
  }
  if (seq.patch_count() != schedule.per_block_patch_counts.front()) {
    throw ConfigError("sequence has " + std::to_string(seq.patch_count()) + " patch tokens, schedule expects " +
                      std::to_string(schedule.per_block_patch_counts.front()));
  }
  if (cache) {
    cache->blocks.assign(blocks.size(), BlockCache{});
    cache->rows_before.assign(blocks.size(), 0);
    cache->kept.assign(blocks.size(), {});
  }
  EncoderOutput out;
  TokenSeq current = seq;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (cache) cache->rows_before[i] = current.tokens.dim(0);
    auto [next, record] = block_forward(current, blocks[i], heads, cache ? &cache->blocks[i] : nullptr);
    const std::size_t target = schedule.per_block_patch_counts[i];
    if (target < next.patch_count()) {
      const Tensor scores = atp_scores(record, variant);
      next = atp_select(next, scores, target, cache ? &cache->kept[i] : nullptr);
    }
    out.trail.push_back(next.kept_patch_ids);
    out.records.push_back(std::move(record));
    current = std::move(next);
  }
  out.final = std::move(current);
  return out;
}

/// Gradients for every block given d(final tokens); returns d(input tokens).
inline Tensor encoder_backward(const EncoderCache& cache, const std::vector<BlockParams>& blocks, std::size_t heads,
                               const Tensor& d_final, std::vector<BlockParams>& grads) {
  Tensor d = d_final;
  for (std::size_t i = blocks.size(); i-- > 0;) {
    if (!cache.kept[i].empty()) d = gather_rows_backward(cache.rows_before[i], cache.kept[i], d);
    d = block_backward(cache.blocks[i], blocks[i], heads, d, grads[i]);
  }
  return d;
}

}  // namespace apvit

#endif  // APVIT_TRANSFORMER_HPP_
