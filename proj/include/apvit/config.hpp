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

#ifndef APVIT_CONFIG_HPP_
#define APVIT_CONFIG_HPP_

// Flat "key = value" configuration files.

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "apvit/data.hpp"
#include "apvit/model.hpp"
#include "apvit/train.hpp"

namespace apvit {

struct CliConfig {
  ApvitConfig model;
  TrainConfig train;
  SyntheticSpec data;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline std::size_t parse_size(std::string_view v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("expected a non-negative integer");
  return out;
}

inline double parse_double(std::string_view v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) throw ConfigError("expected a number");
  return out;
}

inline bool parse_bool(std::string_view v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("expected true or false");
}

inline std::vector<std::size_t> parse_size_list(std::string_view v) {
  std::vector<std::size_t> out;
  while (true) {
    const auto comma = v.find(',');
    out.push_back(parse_size(trim(v.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  return out;
}

using Setter = std::function<void(CliConfig&, std::string_view)>;

inline const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      // model
      {"stem_stages", [](CliConfig& c, std::string_view v) { c.model.stem.stages = parse_size(v); }},
      {"stem_channels", [](CliConfig& c, std::string_view v) { c.model.stem.channels = parse_size_list(v); }},
      {"input_side", [](CliConfig& c, std::string_view v) { c.model.stem.input_side = parse_size(v); }},
      {"input_channels", [](CliConfig& c, std::string_view v) { c.model.stem.input_channels = parse_size(v); }},
      {"linear_tap", [](CliConfig& c, std::string_view v) { c.model.stem.linear_tap = parse_bool(v); }},
      {"embed_dim", [](CliConfig& c, std::string_view v) { c.model.embed_dim = parse_size(v); }},
      {"blocks", [](CliConfig& c, std::string_view v) { c.model.blocks = parse_size(v); }},
      {"heads", [](CliConfig& c, std::string_view v) { c.model.heads = parse_size(v); }},
      {"k", [](CliConfig& c, std::string_view v) { c.model.k = parse_size(v); }},
      {"r", [](CliConfig& c, std::string_view v) { c.model.r = parse_double(v); }},
      {"criterion", [](CliConfig& c, std::string_view v) { c.model.criterion = parse_criterion(v); }},
      {"atp_variant", [](CliConfig& c, std::string_view v) { c.model.atp_variant = parse_atp_variant(v); }},
      {"pooling_mode", [](CliConfig& c, std::string_view v) { c.model.pooling = parse_pooling_mode(v); }},
      {"head_kind", [](CliConfig& c, std::string_view v) { c.model.head = parse_head_kind(v); }},
      {"num_classes", [](CliConfig& c, std::string_view v) { c.model.num_classes = parse_size(v); }},
      {"lanet_ratio", [](CliConfig& c, std::string_view v) { c.model.lanet_ratio = parse_size(v); }},
      {"debug_flip_grad", [](CliConfig& c, std::string_view v) { c.model.debug_flip_grad = parse_bool(v); }},
      // training
      {"base_lr", [](CliConfig& c, std::string_view v) { c.train.base_lr = parse_double(v); }},
      {"momentum", [](CliConfig& c, std::string_view v) { c.train.momentum = parse_double(v); }},
      {"weight_decay", [](CliConfig& c, std::string_view v) { c.train.weight_decay = parse_double(v); }},
      {"clip_norm", [](CliConfig& c, std::string_view v) { c.train.clip_norm = parse_double(v); }},
      {"batch_size", [](CliConfig& c, std::string_view v) { c.train.batch_size = parse_size(v); }},
      {"total_steps", [](CliConfig& c, std::string_view v) { c.train.total_steps = parse_size(v); }},
      {"seed", [](CliConfig& c, std::string_view v) { c.train.seed = parse_size(v); }},
      {"kr_schedule", [](CliConfig& c, std::string_view v) { c.train.kr_schedule = parse_kr_schedule(v); }},
      {"eval_every", [](CliConfig& c, std::string_view v) { c.train.eval_every = parse_size(v); }},
      {"augment", [](CliConfig& c, std::string_view v) { c.train.augment = parse_bool(v); }},
      // synthetic data
      {"data_num_classes", [](CliConfig& c, std::string_view v) { c.data.num_classes = parse_size(v); }},
      {"data_side", [](CliConfig& c, std::string_view v) { c.data.side = parse_size(v); }},
      {"data_train_count", [](CliConfig& c, std::string_view v) { c.data.train_count = parse_size(v); }},
      {"data_test_count", [](CliConfig& c, std::string_view v) { c.data.test_count = parse_size(v); }},
      {"data_occluders", [](CliConfig& c, std::string_view v) { c.data.occluder_count = parse_size(v); }},
      {"data_occluder_min", [](CliConfig& c, std::string_view v) { c.data.occluder_min = parse_size(v); }},
      {"data_occluder_max", [](CliConfig& c, std::string_view v) { c.data.occluder_max = parse_size(v); }},
      {"data_noise_std", [](CliConfig& c, std::string_view v) { c.data.noise_std = parse_double(v); }},
      {"data_seed", [](CliConfig& c, std::string_view v) { c.data.seed = parse_size(v); }},
  };
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, setter] : detail::setters()) keys.push_back(key);
  return keys;
}

/// Applies one "key = value" assignment; `where` prefixes error messages.
inline void apply_setting(CliConfig& config, std::string_view line, const std::string& where) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
  const std::string_view key = detail::trim(line.substr(0, eq));
  const std::string_view value = detail::trim(line.substr(eq + 1));
  const auto& table = detail::setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ConfigError(where + ": unknown key '" + std::string(key) + "'");
  try {
    it->second(config, value);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": bad value '" + std::string(value) + "' for " + std::string(key) + " (" + e.what() +
                      ")");
  }
}

inline CliConfig parse_config_text(const std::string& text, const std::string& source,
                                   const std::vector<std::string>& overrides = {}) {
  CliConfig config;
  std::istringstream in(text);
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    if (detail::trim(body).empty()) continue;
    apply_setting(config, body, source + ":" + std::to_string(line_no));
  }
  for (std::size_t i = 0; i < overrides.size(); ++i) {
    apply_setting(config, overrides[i], "override " + std::to_string(i + 1) + " ('" + overrides[i] + "')");
  }
  return config;
}

/// Reads `path` (if non-empty) and applies `overrides` after it.
inline CliConfig parse_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::string text;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string() + ": cannot open config file");
    std::ostringstream buf;
    buf << in.rdbuf();
    text = buf.str();
  }
  return parse_config_text(text, path.empty() ? "<defaults>" : path.string(), overrides);
}

}  // namespace apvit

#endif  // APVIT_CONFIG_HPP_
