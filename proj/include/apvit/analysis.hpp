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

#ifndef APVIT_ANALYSIS_HPP_
#define APVIT_ANALYSIS_HPP_

// Analytic FLOP accounting, finite-difference gradient checking and
// patch-survival overlays.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "apvit/data.hpp"
#include "apvit/model.hpp"
#include "apvit/random.hpp"
#include "apvit/train.hpp"
#include "json.hpp"

namespace apvit {

// ---------------------------------------------------------------------------
// FLOPs. Only matmuls and convolutions count, 2 FLOPs per multiply-add;
// softmax, LayerNorm, activations and pooling are left out.

struct FlopsReport {
  std::uint64_t stem = 0;
  std::uint64_t criterion = 0;
  std::uint64_t embedding = 0;
  std::vector<std::uint64_t> block_msa;
  std::vector<std::uint64_t> block_mlp;
  std::vector<std::size_t> block_tokens;  // tokens entering each block, class token included
  std::uint64_t head = 0;
  std::uint64_t total = 0;
  std::uint64_t baseline_total = 0;
  std::uint64_t transformer = 0;
  std::uint64_t baseline_transformer = 0;

  double ratio() const { return static_cast<double>(total) / static_cast<double>(baseline_total); }
  double transformer_ratio() const {
    return static_cast<double>(transformer) / static_cast<double>(baseline_transformer);
  }

  std::string to_text() const {
    std::string out;
    char line[128];
    auto row = [&](const std::string& name, std::uint64_t v) {
      std::snprintf(line, sizeof(line), "%-14s %14llu\n", name.c_str(), static_cast<unsigned long long>(v));
      out += line;
    };
    row("stem", stem);
    row("criterion", criterion);
    row("embedding", embedding);
    for (std::size_t i = 0; i < block_msa.size(); ++i) {
      std::snprintf(line, sizeof(line), "block %-2zu n=%-4zu msa %12llu  mlp %12llu\n", i, block_tokens[i],
                    static_cast<unsigned long long>(block_msa[i]), static_cast<unsigned long long>(block_mlp[i]));
      out += line;
    }
    row("head", head);
    row("total", total);
    row("baseline", baseline_total);
    std::snprintf(line, sizeof(line), "%-14s %14.3f\n%-14s %14.3f\n", "ratio", ratio(), "encoder ratio",
                  transformer_ratio());
    out += line;
    return out;
  }

  nlohmann::json to_json() const {
    return {{"stem", stem},
            {"criterion", criterion},
            {"embedding", embedding},
            {"block_msa", block_msa},
            {"block_mlp", block_mlp},
            {"block_tokens", block_tokens},
            {"head", head},
            {"total", total},
            {"baseline_total", baseline_total},
            {"ratio", ratio()},
            {"transformer", transformer},
            {"baseline_transformer", baseline_transformer},
            {"transformer_ratio", transformer_ratio()}};
  }
};

namespace detail {

inline std::uint64_t msa_flops(std::uint64_t n, std::uint64_t d) { return 2 * (3 * n * d * d + 2 * n * n * d + n * d * d); }
inline std::uint64_t mlp_flops(std::uint64_t n, std::uint64_t d) { return 2 * (n * d * 4 * d * 2); }

/// Counts without the baseline comparison.
inline FlopsReport raw_flops(const ApvitConfig& config) {
  config.validate();
  FlopsReport rep;
  const StemConfig& sc = config.stem;
  std::uint64_t side = sc.input_side, cin = sc.input_channels;
  for (std::size_t s = 0; s < sc.stages; ++s) {
    rep.stem += 2 * cin * sc.channels[s] * 9 * side * side;
    cin = sc.channels[s];
    side /= 2;
  }
  const std::uint64_t hw = config.patch_count(), c = config.feature_channels(), d = config.embed_dim;
  if (config.pooling != PoolingMode::None && config.criterion == CriterionKind::Lanet) {
    const std::uint64_t hidden = config.lanet_width();
    rep.criterion = 2 * c * hidden * hw + 2 * hidden * hw;
  }
  const KeepSchedule sched = config.schedule();
  rep.embedding = 2 * c * d * config.app_keep();
  // block i sees what block i-1 kept; its own pruning only affects block i+1
  std::size_t n = config.app_keep();
  for (std::size_t kept : sched.per_block_patch_counts) {
    rep.block_tokens.push_back(n + 1);
    rep.block_msa.push_back(msa_flops(n + 1, d));
    rep.block_mlp.push_back(mlp_flops(n + 1, d));
    rep.transformer += rep.block_msa.back() + rep.block_mlp.back();
    n = kept;
  }
  rep.head = 2 * d * config.num_classes;
  rep.total = rep.stem + rep.criterion + rep.embedding + rep.transformer + rep.head;
  return rep;
}

}  // namespace detail

/// Analytic counts for `config`, compared against the same config with
/// k = H·W and r = 1.
inline FlopsReport count_flops(const ApvitConfig& config) {
  FlopsReport rep = detail::raw_flops(config);
  ApvitConfig base = config;
  base.k = config.patch_count();
  base.r = 1.0;
  const FlopsReport b = detail::raw_flops(base);
  rep.baseline_total = b.total;
  rep.baseline_transformer = b.transformer;
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GroupError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t size = 0;  // elements in the tensor
};

struct GradCheckReport {
  std::vector<GroupError> groups;
  std::string worst_group;
  double worst_error = 0.0;
  double threshold = 0.0;
  std::size_t skipped = 0;     // perturbations that crossed a kink
  std::size_t unresolved = 0;  // loss change too small to resolve in double
  bool passed = false;

  std::string to_text() const {
    std::string out;
    char line[160];
    for (const auto& g : groups) {
      std::snprintf(line, sizeof(line), "%-24s %3zu coords  max rel err %.3e\n", g.name.c_str(), g.coordinates,
                    g.max_rel_error);
      out += line;
    }
    std::snprintf(line, sizeof(line),
                  "worst %s %.3e (threshold %.1e; resampled %zu kink-crossing, %zu unresolvable): %s\n",
                  worst_group.c_str(), worst_error, threshold, skipped, unresolved, passed ? "PASS" : "FAIL");
    return out + line;
  }
};

struct GradCheckOptions {
  double eps = 1e-5;
  double threshold = 1e-4;
  std::size_t coords_per_group = 5;
  /// Only groups whose name starts with one of these prefixes; empty = all.
  std::vector<std::string> groups;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

namespace detail {

inline bool selected_group(const std::string& name, const std::vector<std::string>& prefixes) {
  if (prefixes.empty()) return true;
  return std::any_of(prefixes.begin(), prefixes.end(),
                     [&](const std::string& p) { return name.compare(0, p.size(), p) == 0; });
}

/// Smallest gap between any two criterion values.
inline double min_pairwise_gap(const Tensor& map) {
  std::vector<double> v(map.values().begin(), map.values().end());
  std::sort(v.begin(), v.end());
  double gap = INFINITY;
  for (std::size_t i = 1; i < v.size(); ++i) gap = std::min(gap, v[i] - v[i - 1]);
  return gap;
}

inline double loss_of(const Tensor& image, const ApvitParams& params, const ApvitConfig& config, std::size_t label,
                      ForwardCache& cache) {
  return cross_entropy(forward(image, params, config, &cache).logits, label).loss;
}

}  // namespace detail

/// Central-difference check of backward() on random parameters and a random
/// input. Coordinates whose perturbation changes a discrete decision
/// (selection, ReLU mask, pooling argmax) are resampled.
inline GradCheckReport grad_check(const ApvitConfig& config, std::uint64_t seed, const GradCheckOptions& opt = {}) {
  config.validate();
  Rng rng(seed ^ 0x9E3779B97F4A7C15ull);
  ApvitParams params = init_params(config, seed);
  params.for_each([&](const std::string& name, Tensor& t) {
    const double scale = detail::is_zero_initialized(name) ? 0.1 : 0.05;
    for (double& v : t.values()) v += rng.uniform(-scale, scale);
  });
  // Stretch the criterion map so 64 random values clear the tie gap. Glorot
  // stem kernels give MAX a spread of ~0.4, and a LANet cell with every hidden
  // unit off outputs exactly b2, so two such cells tie.
  for (Tensor& k : params.stem.kernels) {
    for (double& v : k.values()) v *= 3.0;
  }
  if (params.lanet) {
    for (double& v : params.lanet->b1.values()) v = rng.uniform(2.0, 3.0);
  }
  const StemConfig& sc = config.stem;
  const std::size_t label = static_cast<std::size_t>(seed % config.num_classes);

  Tensor image({sc.input_channels, sc.input_side, sc.input_side});
  ForwardCache cache;
  bool tie_free = false;
  for (int attempt = 0; attempt < 10 && !tie_free; ++attempt) {
    for (double& v : image.values()) v = rng.uniform(0.0, 255.0);
    const ForwardResult out = forward(image, params, config, &cache);
    tie_free = config.pooling == PoolingMode::None || detail::min_pairwise_gap(out.diagnostics.criterion_map) > 1e-4;
  }
  if (!tie_free) throw NumericError("grad_check: criterion map still has ties after 10 re-jitters");

  const ForwardResult base = forward(image, params, config, &cache);
  const std::uint64_t signature = branch_signature(cache, params, config);
  const ApvitParams analytic = backward(cache, params, config, cross_entropy(base.logits, label).d_logits);

  GradCheckReport report;
  report.threshold = opt.threshold;
  auto grads = analytic.tensors();
  auto tensors = params.tensors();
  const auto names = params.names();
  ForwardCache probe;
  for (std::size_t g = 0; g < tensors.size(); ++g) {
    if (!detail::selected_group(names[g], opt.groups)) continue;
    Tensor& t = *tensors[g];
    GroupError ge{names[g], 0.0, 0, t.size()};
    const std::size_t want = std::min(opt.coords_per_group, t.size());
    std::vector<std::size_t> tried;
    for (std::size_t attempt = 0; ge.coordinates < want && attempt < 20 * want; ++attempt) {
      std::size_t i = 0;
      if (t.size() <= opt.coords_per_group) {
        if (attempt >= t.size()) break;
        i = attempt;
      } else {
        i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(t.size()) - 1));
        if (std::find(tried.begin(), tried.end(), i) != tried.end()) continue;
      }
      tried.push_back(i);
      const double saved = t[i];
      t[i] = saved + opt.eps;
      const double up = detail::loss_of(image, params, config, label, probe);
      const bool same_up = branch_signature(probe, params, config) == signature;
      t[i] = saved - opt.eps;
      const double down = detail::loss_of(image, params, config, label, probe);
      const bool same_down = branch_signature(probe, params, config) == signature;
      t[i] = saved;
      if (!same_up || !same_down) {
        ++report.skipped;
        continue;
      }
      const double numeric = (up - down) / (2.0 * opt.eps);
      // A loss change under ~1e5 ulps is mostly forward rounding noise; only
      // resample when the analytic side is that small too.
      const double ulp = std::nextafter(std::abs(up), INFINITY) - std::abs(up);
      const double noise = 1e5 * ulp / (2.0 * opt.eps);
      const double a = (*grads[g])[i];
      if (std::abs(numeric) < noise && std::abs(a) < noise && !(numeric == 0.0 && a == 0.0)) {
        ++report.unresolved;
        continue;
      }
      ge.max_rel_error = std::max(ge.max_rel_error, relative_error(a, numeric));
      ++ge.coordinates;
    }
    if (ge.max_rel_error >= report.worst_error) {
      report.worst_error = ge.max_rel_error;
      report.worst_group = ge.name;
    }
    report.groups.push_back(std::move(ge));
  }
  report.passed = !report.groups.empty() && report.worst_error < opt.threshold;
  return report;
}

// ---------------------------------------------------------------------------
// Overlays

struct OverlaySpec {
  /// nullopt selects the APP stage, otherwise the block whose output trail is shown.
  std::optional<std::size_t> block;
  std::filesystem::path output;
};

inline std::string overlay_stage_name(const OverlaySpec& spec) {
  return spec.block ? "block" + std::to_string(*spec.block) : "app";
}

/// Patch ids alive at the requested stage.
inline const std::vector<std::size_t>& surviving_patches(const Diagnostics& diag, const OverlaySpec& spec) {
  if (!spec.block) return diag.app_indices;
  if (*spec.block >= diag.trail.size()) {
    throw ConfigError("overlay block " + std::to_string(*spec.block) + " outside [0, " +
                      std::to_string(diag.trail.size()) + ")");
  }
  return diag.trail[*spec.block];
}

/// Grey-scale copy of `image` with every dropped patch cell set to 255.
inline Tensor overlay_image(const Tensor& image, const Diagnostics& diag, const StemConfig& stem,
                            const OverlaySpec& spec) {
  const std::size_t side = stem.input_side, cell = stem.downsample(), grid = stem.output_side();
  if (image.shape() != Shape{stem.input_channels, side, side}) {
    throw DimensionError("overlay: image shape " + shape_string(image.shape()) + " does not match the stem");
  }
  std::vector<bool> kept(grid * grid, false);
  for (std::size_t p : surviving_patches(diag, spec)) kept.at(p) = true;
  Tensor out({1, side, side});
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      if (!kept[(y / cell) * grid + x / cell]) {
        out(0, y, x) = 255.0;
        continue;
      }
      double v = 0.0;
      for (std::size_t c = 0; c < image.dim(0); ++c) v += image(c, y, x);
      out(0, y, x) = v / static_cast<double>(image.dim(0));
    }
  }
  return out;
}

inline void render_overlay(const Tensor& image, const Diagnostics& diag, const StemConfig& stem,
                           const OverlaySpec& spec) {
  write_pnm(spec.output, overlay_image(image, diag, stem, spec));
}

}  // namespace apvit

#endif  // APVIT_ANALYSIS_HPP_
