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

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"

using namespace apvit;
using oracle::random_tensor;

namespace {

BlockParams random_block(std::size_t d, Rng& rng, double scale = 0.3) {
  BlockParams p = BlockParams::zeros(d);
  BlockParams::visit(p, [&](std::string_view name, Tensor& t) {
    const bool gain = name.ends_with("gamma");
    for (double& v : t.values()) v = (gain ? 1.0 : 0.0) + rng.uniform(-scale, scale);
  });
  return p;
}

TokenSeq random_seq(std::size_t patches, std::size_t d, Rng& rng) {
  std::vector<std::size_t> ids(patches);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  return {random_tensor({patches + 1, d}, rng), ids};
}

/// Multi-head attention in long double, straight from the definition.
std::vector<long double> msa_reference(const Tensor& x, const BlockParams& p, std::size_t heads) {
  const std::size_t n = x.dim(0), width = x.dim(1), d = width / heads;
  auto proj = [&](const Tensor& w) {
    std::vector<long double> out(n * width, 0.0L);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < width; ++j)
        for (std::size_t t = 0; t < width; ++t) out[i * width + j] += static_cast<long double>(x(i, t)) * w(t, j);
    return out;
  };
  const auto q = proj(p.wq), k = proj(p.wk), v = proj(p.wv);
  std::vector<long double> concat(n * width, 0.0L);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<long double> a(n);
      long double total = 0.0L;
      for (std::size_t j = 0; j < n; ++j) {
        long double dot = 0.0L;
        for (std::size_t c = 0; c < d; ++c) dot += q[i * width + h * d + c] * k[j * width + h * d + c];
        a[j] = std::exp(dot / std::sqrt(static_cast<long double>(d)));
        total += a[j];
      }
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < d; ++c) concat[i * width + h * d + c] += a[j] / total * v[j * width + h * d + c];
    }
  }
  std::vector<long double> out(n * width, 0.0L);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < width; ++j)
      for (std::size_t t = 0; t < width; ++t) out[i * width + j] += concat[i * width + t] * p.wo(t, j);
  return out;
}

}  // namespace

TEST(Msa, SingleTokenIsValueThenOutputProjection) {
  Rng rng(1);
  const BlockParams p = random_block(8, rng);
  const Tensor x = random_tensor({1, 8}, rng);
  const MsaResult r = msa_forward(x, p, 2);
  EXPECT_EQ(r.output, matmul(matmul(x, p.wv), p.wo));
  EXPECT_TRUE(r.record.class_logits_per_head.empty());
}

TEST(Msa, ZeroQueryGivesUniformAttention) {
  Rng rng(2);
  BlockParams p = random_block(8, rng);
  p.wq.fill(0.0);
  MsaCache cache;
  msa_forward(random_tensor({5, 8}, rng), p, 2, &cache);
  for (const Tensor& a : cache.probs) {
    for (double v : a.values()) EXPECT_NEAR(v, 0.2, 1e-15);
  }
}

TEST(Msa, MatchesExtendedPrecisionReference) {
  Rng rng(3);
  const BlockParams p = random_block(8, rng);
  const Tensor x = random_tensor({4, 8}, rng);
  const MsaResult r = msa_forward(x, p, 2);
  const auto ref = msa_reference(x, p, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_LT(std::abs(static_cast<long double>(r.output[i]) - ref[i]), 1e-10L);
}

TEST(Msa, RejectsIndivisibleHeads) {
  Rng rng(4);
  EXPECT_THROW(msa_forward(random_tensor({3, 8}, rng), random_block(8, rng), 3), ConfigError);
}

TEST(Block, ZeroWeightsAreResidualIdentity) {
  Rng rng(5);
  const TokenSeq seq = random_seq(6, 8, rng);
  const auto [out, rec] = block_forward(seq, BlockParams::zeros(8), 2);
  EXPECT_EQ(out.tokens, seq.tokens);
  EXPECT_EQ(out.kept_patch_ids, seq.kept_patch_ids);
  EXPECT_EQ(rec.class_logits_per_head.shape(), (Shape{2, 6}));
}

TEST(Block, ZeroMlpEqualsStackedAttentionResiduals) {
  Rng rng(6);
  std::vector<BlockParams> blocks{random_block(8, rng), random_block(8, rng)};
  for (auto& b : blocks) {
    b.w1.fill(0.0);
    b.b1.fill(0.0);
    b.w2.fill(0.0);
    b.b2.fill(0.0);
  }
  const TokenSeq seq = random_seq(5, 8, rng);
  Tensor expect = seq.tokens;
  for (const auto& b : blocks) {
    Tensor next = expect;
    add_inplace(next, msa_forward(layer_norm(expect, b.ln1_gamma, b.ln1_beta), b, 2).output);
    expect = next;
  }
  TokenSeq cur = seq;
  for (const auto& b : blocks) cur = block_forward(cur, b, 2).first;
  EXPECT_EQ(cur.tokens, expect);
}

TEST(Block, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(20 + seed);
    BlockParams p = random_block(8, rng);
    TokenSeq seq = random_seq(4, 8, rng);
    const Tensor w = random_tensor({5, 8}, rng);
    BlockCache cache;
    block_forward(seq, p, 2, &cache);
    BlockParams grads = BlockParams::zeros(8);
    const Tensor dx = block_backward(cache, p, 2, w, grads);
    auto loss = [&] { return oracle::weighted_sum(block_forward(seq, p, 2).first.tokens, w); };
    EXPECT_LT(oracle::max_rel_error(dx, oracle::numeric_grad(seq.tokens, loss)), 1e-4);
    std::vector<Tensor*> analytic;
    BlockParams::visit(grads, [&](std::string_view, Tensor& t) { analytic.push_back(&t); });
    std::size_t i = 0;
    BlockParams::visit(p, [&](std::string_view name, Tensor& t) {
      EXPECT_LT(oracle::max_rel_error(*analytic[i++], oracle::numeric_grad(t, loss)), 1e-4) << name << " seed " << seed;
    });
  }
}

TEST(AtpScores, HandArithmetic) {
  const AttnRecord one{Tensor::matrix({{0.5, -2, 1}})};
  EXPECT_EQ(atp_scores(one, AtpVariant::Sum), Tensor::vector({0.5, -2, 1}));
  const AttnRecord two{Tensor::matrix({{1, -1}, {2, 3}})};
  EXPECT_EQ(atp_scores(two, AtpVariant::Sum), Tensor::vector({3, 2}));
  EXPECT_EQ(atp_scores(two, AtpVariant::Abs), Tensor::vector({3, 4}));
  EXPECT_EQ(atp_scores(two, AtpVariant::Max), Tensor::vector({2, 3}));
}

TEST(AtpScores, MatchesLoopOracle) {
  Rng rng(7);
  const Tensor logits = random_tensor({3, 9}, rng);
  for (auto variant : {AtpVariant::Sum, AtpVariant::Abs, AtpVariant::Max}) {
    Tensor expect({9});
    for (std::size_t t = 0; t < 9; ++t) {
      double acc = variant == AtpVariant::Max ? -INFINITY : 0.0;
      for (std::size_t h = 0; h < 3; ++h) {
        const double v = logits(h, t);
        acc = variant == AtpVariant::Sum ? acc + v : variant == AtpVariant::Abs ? acc + std::fabs(v) : std::max(acc, v);
      }
      expect[t] = acc;
    }
    EXPECT_EQ(atp_scores(AttnRecord{logits}, variant), expect);
  }
}

TEST(AtpScores, SumInvariantToHeadOrder) {
  Rng rng(8);
  const Tensor logits = random_tensor({4, 6}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const Tensor s1 = atp_scores(AttnRecord{logits});
  const Tensor s2 = atp_scores(AttnRecord{gather_rows(logits, perm)});
  EXPECT_LT(max_abs_diff(s1, s2), 1e-14);
}

TEST(AtpSelect, KeepAllIsIdentity) {
  Rng rng(9);
  const TokenSeq seq = random_seq(5, 4, rng);
  const TokenSeq out = atp_select(seq, random_tensor({5}, rng), 5);
  EXPECT_EQ(out.tokens, seq.tokens);
  EXPECT_EQ(out.kept_patch_ids, seq.kept_patch_ids);
}

TEST(AtpSelect, TieRuleExample) {
  Rng rng(10);
  const TokenSeq seq = random_seq(4, 4, rng);
  std::vector<std::size_t> rows;
  const TokenSeq out = atp_select(seq, Tensor::vector({0.3, 0.9, 0.9, 0.1}), 2, &rows);
  EXPECT_EQ(out.kept_patch_ids, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(rows, (std::vector<std::size_t>{0, 2, 3}));
  EXPECT_EQ(out.tokens, gather_rows(seq.tokens, rows));
}

TEST(AtpSelect, MatchesSortOracleAndKeepsClassRow) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t = static_cast<std::size_t>(rng.uniform_int(1, 20));
    TokenSeq seq = random_seq(t, 2, rng);
    rng.shuffle(seq.kept_patch_ids);
    std::vector<double> scores(t);
    for (double& v : scores) v = trial % 2 ? rng.uniform(-1, 1) : static_cast<double>(rng.uniform_int(0, 3));
    const std::size_t keep = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(t)));
    const TokenSeq out = atp_select(seq, Tensor({t}, scores), keep);
    const auto chosen = oracle::top_k(scores, keep);
    std::vector<std::size_t> ids;
    for (auto c : chosen) ids.push_back(seq.kept_patch_ids[c]);
    ASSERT_EQ(out.kept_patch_ids, ids) << "trial " << trial;
    ASSERT_EQ(out.tokens(0, 0), seq.tokens(0, 0));
    ASSERT_EQ(out.tokens(0, 1), seq.tokens(0, 1));
  }
}

TEST(AtpSelect, ShiftInvariant) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const TokenSeq seq = random_seq(10, 2, rng);
    Tensor logits = random_tensor({2, 10}, rng);
    const TokenSeq a = atp_select(seq, atp_scores(AttnRecord{logits}), 6);
    const double c = rng.uniform(-5, 5);
    for (double& v : logits.values()) v += c;
    const TokenSeq b = atp_select(seq, atp_scores(AttnRecord{logits}), 6);
    EXPECT_EQ(a.kept_patch_ids, b.kept_patch_ids);
  }
}

TEST(KeepSchedule, ReservedTokenCounts) {
  const KeepSchedule a = keep_schedule(160, 0.9, 8);
  EXPECT_EQ(a.per_block_patch_counts, (std::vector<std::size_t>{160, 160, 160, 160, 144, 129, 116, 104}));
  EXPECT_EQ(a.reserved_tokens(), 105u);
  const KeepSchedule b = keep_schedule(80, 0.6, 8);
  EXPECT_EQ(b.per_block_patch_counts, (std::vector<std::size_t>{80, 80, 80, 80, 48, 28, 16, 9}));
  EXPECT_EQ(b.reserved_tokens(), 10u);
  const KeepSchedule c = keep_schedule(40, 0.6, 8);
  EXPECT_EQ(c.per_block_patch_counts, (std::vector<std::size_t>{40, 40, 40, 40, 24, 14, 8, 4}));
  EXPECT_EQ(c.reserved_tokens(), 5u);
  EXPECT_EQ(a.atp_start_block, 4u);
}

TEST(KeepSchedule, ApproximationClaim) {
  const double formula = 160 * std::pow(0.9, 4);
  EXPECT_NEAR(formula, 104.976, 1e-9);
  EXPECT_LT(std::abs(static_cast<double>(keep_schedule(160, 0.9, 8).per_block_patch_counts.back()) - formula), 1.0);
}

TEST(KeepSchedule, InvariantsOverGrid) {
  for (std::size_t k = 1; k <= 200; k += 7) {
    for (double r : {1.0, 0.95, 0.9, 0.8, 0.7, 0.6, 0.5, 0.3, 0.1}) {
      for (std::size_t m : {2, 4, 8, 12}) {
        const auto counts = keep_schedule(k, r, m).per_block_patch_counts;
        for (std::size_t i = 1; i < m; ++i) {
          EXPECT_LE(counts[i], counts[i - 1]);
          if (i < m / 2) {
            EXPECT_EQ(counts[i], counts[i - 1]);
          }
        }
        EXPECT_GE(counts.back(), 1u);
      }
    }
  }
}

TEST(KeepSchedule, Errors) {
  EXPECT_THROW(keep_schedule(10, 0.0, 8), ConfigError);
  EXPECT_THROW(keep_schedule(10, 1.1, 8), ConfigError);
  EXPECT_THROW(keep_schedule(10, 0.5, 7), ConfigError);
  EXPECT_THROW(keep_schedule(0, 0.5, 8), ConfigError);
}

TEST(Encoder, UnitRateEqualsPlainStack) {
  Rng rng(13);
  std::vector<BlockParams> blocks;
  for (int i = 0; i < 4; ++i) blocks.push_back(random_block(8, rng));
  const TokenSeq seq = random_seq(7, 8, rng);
  const EncoderOutput out = encoder_forward(seq, blocks, 2, keep_schedule(7, 1.0, 4));
  TokenSeq cur = seq;
  for (const auto& b : blocks) cur = block_forward(cur, b, 2).first;
  EXPECT_EQ(out.final.tokens, cur.tokens);
  for (const auto& t : out.trail) EXPECT_EQ(t, seq.kept_patch_ids);
}

TEST(Encoder, CountsFollowScheduleAndClassRowSurvives) {
  Rng rng(14);
  std::vector<BlockParams> blocks;
  for (int i = 0; i < 6; ++i) blocks.push_back(random_block(8, rng));
  for (int trial = 0; trial < 10; ++trial) {
    const TokenSeq seq = random_seq(12, 8, rng);
    const KeepSchedule sched = keep_schedule(12, rng.uniform(0.3, 1.0), 6);
    const EncoderOutput out = encoder_forward(seq, blocks, 2, sched);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(out.trail[i].size(), sched.per_block_patch_counts[i]);
    EXPECT_EQ(out.final.patch_count(), sched.per_block_patch_counts.back());
    EXPECT_EQ(out.class_embedding().size(), 8u);
  }
  EXPECT_THROW(encoder_forward(random_seq(11, 8, rng), blocks, 2, keep_schedule(12, 0.5, 6)), ConfigError);
}

TEST(Encoder, PermutationEquivariant) {
  Rng rng(15);
  std::vector<BlockParams> blocks;
  for (int i = 0; i < 4; ++i) blocks.push_back(random_block(8, rng));
  const TokenSeq seq = random_seq(9, 8, rng);
  const KeepSchedule sched = keep_schedule(9, 0.7, 4);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  std::vector<std::size_t> rows{0};
  TokenSeq permuted{Tensor(), {}};
  for (auto p : perm) {
    rows.push_back(p + 1);
    permuted.kept_patch_ids.push_back(seq.kept_patch_ids[p]);
  }
  permuted.tokens = gather_rows(seq.tokens, rows);
  const EncoderOutput a = encoder_forward(seq, blocks, 2, sched);
  const EncoderOutput b = encoder_forward(permuted, blocks, 2, sched);
  EXPECT_LT(max_abs_diff(a.class_embedding(), b.class_embedding()), 1e-9);
  auto sorted = [](std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  EXPECT_EQ(sorted(a.trail.back()), sorted(b.trail.back()));
}

TEST(Encoder, GradientWithFixedSelections) {
  Rng rng(16);
  std::vector<BlockParams> blocks;
  for (int i = 0; i < 4; ++i) blocks.push_back(random_block(8, rng));
  TokenSeq seq = random_seq(8, 8, rng);
  const KeepSchedule sched = keep_schedule(8, 0.7, 4);
  EncoderCache cache;
  const EncoderOutput base = encoder_forward(seq, blocks, 2, sched, AtpVariant::Sum, &cache);
  const Tensor w = random_tensor(base.final.tokens.shape(), rng);
  std::vector<BlockParams> grads(4, BlockParams::zeros(8));
  const Tensor dx = encoder_backward(cache, blocks, 2, w, grads);
  auto loss = [&] {
    const EncoderOutput o = encoder_forward(seq, blocks, 2, sched);
    EXPECT_EQ(o.trail, base.trail);
    return oracle::weighted_sum(o.final.tokens, w);
  };
  EXPECT_LT(oracle::max_rel_error(dx, oracle::numeric_grad(seq.tokens, loss)), 1e-4);
  EXPECT_LT(oracle::max_rel_error(grads[0].wq, oracle::numeric_grad(blocks[0].wq, loss)), 1e-4);
  EXPECT_LT(oracle::max_rel_error(grads[3].w1, oracle::numeric_grad(blocks[3].w1, loss)), 1e-4);
  EXPECT_LT(oracle::max_rel_error(grads[2].ln1_gamma, oracle::numeric_grad(blocks[2].ln1_gamma, loss)), 1e-4);
}
