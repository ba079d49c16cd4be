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

#ifndef APVIT_TRAIN_HPP_
#define APVIT_TRAIN_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "apvit/data.hpp"
#include "apvit/model.hpp"
#include "apvit/random.hpp"
#include "json.hpp"

namespace apvit {

enum class KrSchedule { Constant, LinearDecay };

inline KrSchedule parse_kr_schedule(std::string_view text) {
  if (text == "CONSTANT") return KrSchedule::Constant;
  if (text == "LINEAR_DECAY") return KrSchedule::LinearDecay;
  throw ConfigError("unknown kr_schedule '" + std::string(text) + "' (expected CONSTANT or LINEAR_DECAY)");
}

inline std::string_view to_string(KrSchedule s) { return s == KrSchedule::Constant ? "CONSTANT" : "LINEAR_DECAY"; }

struct TrainConfig {
  double base_lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double clip_norm = 10.0;
  std::size_t batch_size = 32;
  std::size_t total_steps = 1000;
  std::uint64_t seed = 0;
  KrSchedule kr_schedule = KrSchedule::Constant;
  std::size_t eval_every = 100;
  bool augment = true;

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (eval_every == 0) throw ConfigError("eval_every must be positive");
  }
};

struct Metrics {
  double overall_acc = 0.0;
  double mean_class_acc = 0.0;
  std::vector<double> per_class_acc;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t total = 0;
};

struct LossAndGrad {
  double loss = 0.0;
  Tensor d_logits;
};

inline LossAndGrad cross_entropy(const Tensor& logits, std::size_t label) {
  if (label >= logits.size()) {
    throw IndexError("label " + std::to_string(label) + " outside [0, " + std::to_string(logits.size()) + ")");
  }
  double peak = logits[0];
  for (double v : logits.values()) peak = std::max(peak, v);
  double total = 0.0;
  for (double v : logits.values()) total += std::exp(v - peak);
  const double log_norm = peak + std::log(total);
  LossAndGrad out{log_norm - logits[label], Tensor(logits.shape())};
  for (std::size_t i = 0; i < logits.size(); ++i) out.d_logits[i] = std::exp(logits[i] - log_norm);
  out.d_logits[label] -= 1.0;
  return out;
}

/// L2 norm over every parameter jointly.
inline double global_norm(const ApvitParams& grads) {
  double sq = 0.0;
  grads.for_each([&](const std::string&, const Tensor& t) {
    for (double v : t.values()) sq += v * v;
  });
  return std::sqrt(sq);
}

/// Rescales so the joint norm is at most max_norm; returns the norm before clipping.
inline double clip_gradients(ApvitParams& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip norm must be positive");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    grads.for_each([&](const std::string&, Tensor& t) {
      for (double& v : t.values()) v *= scale;
    });
  }
  return norm;
}

/// v ← momentum·v + (g + wd·w);  w ← w − lr·v
inline void sgd_step(std::span<double> w, std::span<const double> g, std::span<double> v, double lr, double momentum,
                     double weight_decay) {
  if (w.size() != g.size() || w.size() != v.size()) throw DimensionError("sgd_step: misaligned buffers");
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = momentum * v[i] + (g[i] + weight_decay * w[i]);
    w[i] -= lr * v[i];
  }
}

inline void sgd_step(ApvitParams& params, const ApvitParams& grads, ApvitParams& velocity, double lr, double momentum,
                     double weight_decay) {
  const auto names = params.names();
  auto w = params.tensors();
  auto g = grads.tensors();
  auto v = velocity.tensors();
  if (w.size() != g.size() || w.size() != v.size()) throw DimensionError("sgd_step: parameter sets differ");
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double wd = is_weight_decay_exempt(names[i]) ? 0.0 : weight_decay;
    sgd_step(w[i]->values(), g[i]->values(), v[i]->values(), lr, momentum, wd);
  }
}

inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0) return base_lr;
  const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct KeepParams {
  std::size_t k;
  double r;
};

/// Linear interpolation from (n_patches, 1.0) at step 0 to (k, r) at total_steps.
inline KeepParams kr_linear_schedule(std::size_t step, std::size_t total_steps, std::size_t n_patches, std::size_t k,
                                     double r) {
  const double t =
      total_steps == 0 ? 1.0 : static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  const double k_t = static_cast<double>(n_patches) + (static_cast<double>(k) - static_cast<double>(n_patches)) * t;
  return {static_cast<std::size_t>(std::llround(k_t)), 1.0 + (r - 1.0) * t};
}

/// Model configuration in effect after `step` completed steps.
inline ApvitConfig config_at_step(const ApvitConfig& model, const TrainConfig& train, std::size_t step) {
  if (train.kr_schedule == KrSchedule::Constant) return model;
  ApvitConfig cfg = model;
  const KeepParams kr = kr_linear_schedule(step, train.total_steps, model.patch_count(), model.k, model.r);
  cfg.k = kr.k;
  cfg.r = kr.r;
  return cfg;
}

inline Metrics evaluate(const ApvitParams& params, const ApvitConfig& config, const Dataset& dataset) {
  if (dataset.empty()) throw ConfigError("evaluate: empty dataset");
  const std::size_t classes = config.num_classes;
  Metrics m;
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (const Sample& s : dataset.samples) {
    if (s.label >= classes) throw IndexError("sample label " + std::to_string(s.label) + " >= num_classes");
    ++m.confusion[s.label][predict(s.image, params, config)];
  }
  m.total = dataset.size();
  std::size_t correct = 0, present = 0;
  double class_sum = 0.0;
  m.per_class_acc.assign(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    correct += m.confusion[c][c];
    const std::size_t row = std::accumulate(m.confusion[c].begin(), m.confusion[c].end(), std::size_t{0});
    if (row == 0) continue;
    m.per_class_acc[c] = static_cast<double>(m.confusion[c][c]) / static_cast<double>(row);
    class_sum += m.per_class_acc[c];
    ++present;
  }
  m.overall_acc = static_cast<double>(correct) / static_cast<double>(m.total);
  m.mean_class_acc = present ? class_sum / static_cast<double>(present) : 0.0;
  return m;
}

struct EvalRecord {
  std::size_t step = 0;
  double lr = 0.0;
  std::size_t k_t = 0;
  double r_t = 1.0;
  double loss = 0.0;  // mean training loss since the previous record
  Metrics metrics;

  nlohmann::json to_json() const {
    std::vector<std::size_t> flat;
    for (const auto& row : metrics.confusion) flat.insert(flat.end(), row.begin(), row.end());
    return {{"step", step},
            {"lr", lr},
            {"k_t", k_t},
            {"r_t", r_t},
            {"loss", loss},
            {"overall_acc", metrics.overall_acc},
            {"mean_class_acc", metrics.mean_class_acc},
            {"confusion", flat}};
  }
};

struct TrainResult {
  ApvitParams params;
  std::vector<EvalRecord> history;
};

/// Mean loss and averaged gradient over one mini-batch.
inline std::pair<double, ApvitParams> batch_gradient(const ApvitParams& params, const ApvitConfig& config,
                                                     std::span<const Sample> batch) {
  ApvitParams total = params.zeros_like();
  double loss = 0.0;
  ForwardCache cache;
  for (const Sample& s : batch) {
    const ForwardResult out = forward(s.image, params, config, &cache);
    const LossAndGrad lg = cross_entropy(out.logits, s.label);
    loss += lg.loss;
    const ApvitParams g = backward(cache, params, config, lg.d_logits);
    auto dst = total.tensors();
    auto src = g.tensors();
    for (std::size_t i = 0; i < dst.size(); ++i) add_inplace(*dst[i], *src[i]);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  total.for_each([&](const std::string&, Tensor& t) {
    for (double& v : t.values()) v *= inv;
  });
  return {loss * inv, std::move(total)};
}

/// Seeded mini-batch SGD with momentum, L2 decay, global-norm clipping and
/// cosine learning-rate decay. Evaluates on `eval_set` (or the training set)
/// every eval_every steps and after the last step.
inline TrainResult train_loop(const ApvitConfig& model_config, const TrainConfig& train_config, const Dataset& train_set,
                              const Dataset* eval_set = nullptr,
                              const std::function<void(const EvalRecord&)>& on_eval = {},
                              std::optional<ApvitParams> initial = std::nullopt) {
  model_config.validate();
  train_config.validate();
  if (train_set.empty()) throw ConfigError("train_loop: empty training set");
  TrainResult result;
  result.params = initial ? std::move(*initial) : init_params(model_config, train_config.seed);
  ApvitParams velocity = result.params.zeros_like();
  Rng order_rng(train_config.seed * 0x2545F4914F6CDD1Dull + 17);
  Rng augment_rng(train_config.seed * 0x2545F4914F6CDD1Dull + 29);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  order_rng.shuffle(order);
  std::size_t cursor = 0;
  double loss_sum = 0.0;
  std::size_t loss_steps = 0;
  std::vector<Sample> batch;
  for (std::size_t step = 0; step < train_config.total_steps; ++step) {
    const ApvitConfig cfg = config_at_step(model_config, train_config, step);
    const double lr = cosine_lr(step, train_config.total_steps, train_config.base_lr);
    batch.clear();
    for (std::size_t b = 0; b < train_config.batch_size; ++b) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      const Sample& s = train_set.samples[order[cursor++]];
      batch.push_back(train_config.augment ? augment(s, augment_rng) : s);
    }
    std::pair<double, ApvitParams> step_out;
    try {
      step_out = batch_gradient(result.params, cfg, batch);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    auto& [loss, grads] = step_out;
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
    clip_gradients(grads, train_config.clip_norm);
    sgd_step(result.params, grads, velocity, lr, train_config.momentum, train_config.weight_decay);
    loss_sum += loss;
    ++loss_steps;
    const std::size_t done = step + 1;
    if (done % train_config.eval_every == 0 || done == train_config.total_steps) {
      const ApvitConfig eval_cfg = config_at_step(model_config, train_config, done);
      EvalRecord rec;
      rec.step = done;
      rec.lr = lr;
      rec.k_t = eval_cfg.app_keep();
      rec.r_t = eval_cfg.r;
      rec.loss = loss_sum / static_cast<double>(loss_steps);
      rec.metrics = evaluate(result.params, eval_cfg, eval_set ? *eval_set : train_set);
      loss_sum = 0.0;
      loss_steps = 0;
      if (on_eval) on_eval(rec);
      result.history.push_back(std::move(rec));
    }
  }
  return result;
}

}  // namespace apvit

#endif  // APVIT_TRAIN_HPP_
