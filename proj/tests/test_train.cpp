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
#include <limits>
#include <numbers>

#include "oracles.hpp"

using namespace apvit;
using oracle::random_tensor;

namespace {

ApvitConfig tiny_config() {
  ApvitConfig cfg;
  cfg.stem.input_side = 16;
  cfg.stem.channels = {4, 8};
  cfg.embed_dim = 16;
  cfg.blocks = 2;
  cfg.heads = 2;
  cfg.k = 12;
  cfg.r = 0.8;
  return cfg;
}

Dataset tiny_data(std::size_t count, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.side = 16;
  spec.occluder_max = 6;
  spec.train_count = count;
  spec.test_count = 4;
  spec.seed = seed;
  return generate_synthetic(spec).first;
}

double grad_norm(const ApvitParams& g) { return global_norm(g); }

}  // namespace

TEST(CrossEntropy, HandValues) {
  const LossAndGrad a = cross_entropy(Tensor::vector({0, 0}), 0);
  EXPECT_NEAR(a.loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(a.loss, 0.6931, 1e-4);
  const LossAndGrad b = cross_entropy(Tensor::vector({100, 0}), 0);
  EXPECT_TRUE(std::isfinite(b.loss));
  EXPECT_NEAR(b.loss, 0.0, 1e-40);
  EXPECT_THROW(cross_entropy(Tensor::vector({1, 2}), 2), IndexError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_tensor({5}, rng, -3, 3);
    const std::size_t label = static_cast<std::size_t>(rng.uniform_int(0, 4));
    const Tensor analytic = cross_entropy(logits, label).d_logits;
    const Tensor numeric = oracle::numeric_grad(logits, [&] { return cross_entropy(logits, label).loss; });
    EXPECT_LT(oracle::max_rel_error(analytic, numeric), 1e-6);
  }
}

TEST(ClipGradients, Examples) {
  ApvitParams g = zero_params(tiny_config());
  g.head_b[0] = 3.0;
  g.head_b[1] = 4.0;
  EXPECT_DOUBLE_EQ(clip_gradients(g, 10.0), 5.0);
  EXPECT_EQ(g.head_b[0], 3.0);
  g.head_b[0] = 12.0;
  g.head_b[1] = 16.0;
  EXPECT_DOUBLE_EQ(clip_gradients(g, 10.0), 20.0);
  EXPECT_EQ(g.head_b[0], 6.0);
  EXPECT_NEAR(grad_norm(g), 10.0, 1e-12);
  ApvitParams z = zero_params(tiny_config());
  EXPECT_EQ(clip_gradients(z, 1.0), 0.0);
  EXPECT_EQ(grad_norm(z), 0.0);
  EXPECT_THROW(clip_gradients(z, 0.0), ConfigError);
}

TEST(ClipGradients, NormBoundOverSeeds) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    ApvitParams g = zero_params(tiny_config());
    Rng rng(seed);
    const double scale = rng.uniform(0.0, 2.0);
    g.for_each([&](const std::string&, Tensor& t) {
      for (double& v : t.values()) v = rng.uniform(-scale, scale);
    });
    clip_gradients(g, 10.0);
    EXPECT_LE(grad_norm(g), 10.0 + 1e-9);
  }
}

TEST(Sgd, PlainStep) {
  std::vector<double> w{1.0, -2.0}, g{0.5, 0.25}, v{0.0, 0.0};
  sgd_step(w, g, v, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(w[0], 1.0 - 0.05);
  EXPECT_DOUBLE_EQ(w[1], -2.0 - 0.025);
}

TEST(Sgd, TwoMomentumSteps) {
  std::vector<double> w{0.0}, g{2.0}, v{0.0};
  sgd_step(w, g, v, 0.1, 0.9, 0.0);
  sgd_step(w, g, v, 0.1, 0.9, 0.0);
  EXPECT_NEAR(w[0], -0.1 * 2.0 * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, PureWeightDecay) {
  std::vector<double> w{3.0}, g{0.0}, v{0.0};
  sgd_step(w, g, v, 0.1, 0.0, 0.01);
  EXPECT_NEAR(w[0], 3.0 * (1.0 - 0.1 * 0.01), 1e-15);
}

TEST(Sgd, ExemptionsApplyPerName) {
  const ApvitConfig cfg = tiny_config();
  ApvitParams p = init_params(cfg, 1);
  const ApvitParams before = p;
  p.cls_token.fill(1.0);
  const ApvitParams cls_before = p;
  ApvitParams g = p.zeros_like();
  ApvitParams v = p.zeros_like();
  sgd_step(p, g, v, 0.1, 0.0, 0.5);
  EXPECT_EQ(p.cls_token, cls_before.cls_token);
  EXPECT_EQ(p.blocks[0].ln1_gamma, before.blocks[0].ln1_gamma);
  EXPECT_NEAR(p.head_w[0], before.head_w[0] * 0.95, 1e-15);
  EXPECT_TRUE(is_weight_decay_exempt("blocks.3.ln2.beta"));
  EXPECT_FALSE(is_weight_decay_exempt("blocks.3.mlp.b1"));
}

TEST(CosineLr, Examples) {
  EXPECT_EQ(cosine_lr(0, 100, 0.1), 0.1);
  EXPECT_EQ(cosine_lr(100, 100, 0.1), 0.0);
  EXPECT_NEAR(cosine_lr(50, 100, 0.1), 0.05, 1e-15);
  double prev = INFINITY;
  for (std::size_t s = 0; s <= 1000; ++s) {
    const double lr = cosine_lr(s, 1000, 0.3);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}

TEST(KrSchedule, LinearExamples) {
  auto [k0, r0] = kr_linear_schedule(0, 100, 64, 32, 0.6);
  EXPECT_EQ(k0, 64u);
  EXPECT_EQ(r0, 1.0);
  auto [k1, r1] = kr_linear_schedule(100, 100, 64, 32, 0.6);
  EXPECT_EQ(k1, 32u);
  EXPECT_NEAR(r1, 0.6, 1e-15);
  auto [km, rm] = kr_linear_schedule(50, 100, 64, 32, 0.6);
  EXPECT_EQ(km, 48u);
  EXPECT_NEAR(rm, 0.8, 1e-15);
  std::size_t pk = 1000;
  double pr = 2.0;
  for (std::size_t s = 0; s <= 300; ++s) {
    auto [k, r] = kr_linear_schedule(s, 300, 196, 40, 0.6);
    EXPECT_LE(k, pk);
    EXPECT_LE(r, pr);
    pk = k;
    pr = r;
  }
  EXPECT_EQ(parse_kr_schedule("LINEAR_DECAY"), KrSchedule::LinearDecay);
  EXPECT_THROW(parse_kr_schedule("linear"), ConfigError);
}

TEST(Evaluate, ConstantAndPerfectPredictors) {
  const ApvitConfig cfg = tiny_config();
  const Dataset data = tiny_data(40, 3);
  ApvitParams constant = zero_params(cfg);
  constant.norm_gamma.fill(1.0);
  constant.head_b[2] = 1.0;
  const Metrics m = evaluate(constant, cfg, data);
  EXPECT_DOUBLE_EQ(m.overall_acc, 0.25);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(m.confusion[c][2], 10u);

  const ApvitParams p = init_params(cfg, 5);
  Dataset relabeled = data;
  for (Sample& s : relabeled.samples) s.label = predict(s.image, p, cfg);
  const Metrics perfect = evaluate(p, cfg, relabeled);
  EXPECT_EQ(perfect.overall_acc, 1.0);
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = 0; b < 4; ++b) {
      if (a != b) {
        EXPECT_EQ(perfect.confusion[a][b], 0u);
      }
    }
  }
}

TEST(Evaluate, MeanClassAccuracyDefinition) {
  const ApvitConfig cfg = tiny_config();
  const Metrics m = evaluate(init_params(cfg, 7), cfg, tiny_data(60, 4));
  double sum = 0.0;
  std::size_t rows = 0;
  for (std::size_t c = 0; c < 4; ++c) {
    std::size_t row = 0;
    for (auto v : m.confusion[c]) row += v;
    EXPECT_EQ(row, 15u);
    sum += m.per_class_acc[c];
    ++rows;
  }
  EXPECT_NEAR(m.mean_class_acc, sum / static_cast<double>(rows), 1e-12);
  std::size_t trace = 0;
  for (std::size_t c = 0; c < 4; ++c) trace += m.confusion[c][c];
  EXPECT_EQ(m.overall_acc, static_cast<double>(trace) / 60.0);
  EXPECT_THROW(evaluate(init_params(cfg, 7), cfg, Dataset{}), ConfigError);
}

TEST(TrainLoop, ZeroStepsLeavesParamsUnchanged) {
  const ApvitConfig cfg = tiny_config();
  TrainConfig tc;
  tc.total_steps = 0;
  tc.seed = 9;
  const TrainResult r = train_loop(cfg, tc, tiny_data(8, 1));
  EXPECT_EQ(serialize_params(r.params), serialize_params(init_params(cfg, 9)));
  EXPECT_TRUE(r.history.empty());
}

TEST(TrainLoop, DeterministicUnderSeed) {
  const ApvitConfig cfg = tiny_config();
  TrainConfig tc;
  tc.total_steps = 12;
  tc.batch_size = 3;
  tc.eval_every = 5;
  tc.base_lr = 0.01;
  tc.kr_schedule = KrSchedule::LinearDecay;
  const Dataset data = tiny_data(16, 2);
  const TrainResult a = train_loop(cfg, tc, data, &data);
  const TrainResult b = train_loop(cfg, tc, data, &data);
  EXPECT_EQ(serialize_params(a.params), serialize_params(b.params));
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].to_json(), b.history[i].to_json());
  EXPECT_EQ(a.history.back().step, 12u);
  EXPECT_EQ(a.history.back().k_t, cfg.k);
  EXPECT_EQ(a.history[0].k_t, 14u);  // 16 + (12 - 16) * 5/12 rounded
}

TEST(TrainLoop, NaNLossNamesStep) {
  const ApvitConfig cfg = tiny_config();
  TrainConfig tc;
  tc.total_steps = 3;
  ApvitParams bad = init_params(cfg, 0);
  bad.head_b[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_loop(cfg, tc, tiny_data(8, 1), nullptr, {}, bad);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
  }
}

TEST(TrainLoop, MetricsJsonFields) {
  EvalRecord rec;
  rec.step = 10;
  rec.metrics.confusion = {{1, 2}, {3, 4}};
  const auto j = rec.to_json();
  for (const char* key : {"step", "lr", "k_t", "r_t", "loss", "overall_acc", "mean_class_acc", "confusion"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j["confusion"], nlohmann::json::parse("[1,2,3,4]"));
}

TEST(TrainLoop, MemorizesSmallSet) {
  ApvitConfig cfg;
  cfg.pooling = PoolingMode::None;
  cfg.r = 1.0;
  SyntheticSpec spec;
  spec.train_count = 32;
  spec.test_count = 4;
  const Dataset data = generate_synthetic(spec).first;
  TrainConfig tc;
  tc.base_lr = 0.01;
  tc.batch_size = 4;
  tc.total_steps = 500;
  tc.eval_every = 500;
  tc.augment = false;
  const TrainResult r = train_loop(cfg, tc, data);
  double loss = 0.0;
  for (const Sample& s : data.samples) loss += cross_entropy(forward(s.image, r.params, cfg).logits, s.label).loss;
  EXPECT_LT(loss / 32.0, 0.05);
}
