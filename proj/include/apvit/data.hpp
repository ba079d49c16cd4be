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

#ifndef APVIT_DATA_HPP_
#define APVIT_DATA_HPP_

// Datasets: PGM/PPM loading and writing, the synthetic occlusion benchmark,
// and training-time augmentation.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "apvit/random.hpp"
#include "apvit/tensor.hpp"

namespace apvit {

/// Axis-aligned pixel rectangle [x, x+w) × [y, y+h).
struct Rect {
  std::size_t x = 0, y = 0, w = 0, h = 0;

  bool intersects(std::size_t ox, std::size_t oy, std::size_t ow, std::size_t oh) const {
    return x < ox + ow && ox < x + w && y < oy + oh && oy < y + h;
  }

  bool operator==(const Rect&) const = default;
};

struct Sample {
  Tensor image;  // [Cin, S, S], integer values in [0, 255]
  std::size_t label = 0;
  std::vector<Rect> occluders;  // ground truth, synthetic data only
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::size_t num_classes() const { return class_names.size(); }
};

// ---------------------------------------------------------------------------
// PGM (P5) / PPM (P6), 8-bit

namespace detail {

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string() + ": cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::size_t pnm_header_number(const std::string& bytes, std::size_t& pos, const std::string& name) {
  for (;;) {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::size_t value = 0, digits = 0;
  while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
    value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
    ++pos;
    if (++digits > 9) throw LoadError(name + ": malformed header (number too long)");
  }
  if (digits == 0) throw LoadError(name + ": malformed header");
  return value;
}

}  // namespace detail

/// Parses a binary P5/P6 image with maxval 255 into [C, H, W].
inline Tensor decode_pnm(const std::string& bytes, const std::string& name = "image") {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw LoadError(name + ": malformed header (expected P5 or P6)");
  }
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  std::size_t pos = 2;
  const std::size_t width = detail::pnm_header_number(bytes, pos, name);
  const std::size_t height = detail::pnm_header_number(bytes, pos, name);
  const std::size_t maxval = detail::pnm_header_number(bytes, pos, name);
  if (width == 0 || height == 0) throw LoadError(name + ": malformed header (zero dimension)");
  if (maxval != 255) throw LoadError(name + ": unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw LoadError(name + ": malformed header");
  }
  ++pos;
  const std::size_t count = width * height * channels;
  if (bytes.size() - pos < count) throw LoadError(name + ": truncated pixel data");
  Tensor image({channels, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        image(c, y, x) = static_cast<unsigned char>(bytes[pos + (y * width + x) * channels + c]);
      }
    }
  }
  return image;
}

inline std::string encode_pnm(const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw DimensionError("encode_pnm: expected [1|3, H, W], got " + shape_string(image.shape()));
  }
  const std::size_t channels = image.dim(0), height = image.dim(1), width = image.dim(2);
  std::string out = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.reserve(out.size() + channels * height * width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const double v = std::clamp(std::round(image(c, y, x)), 0.0, 255.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
      }
    }
  }
  return out;
}

inline Tensor read_pnm(const std::filesystem::path& path) { return decode_pnm(detail::read_file_bytes(path), path.string()); }

inline void write_pnm(const std::filesystem::path& path, const Tensor& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError(path.string() + ": cannot open for writing");
  const std::string bytes = encode_pnm(image);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError(path.string() + ": write failed");
}

/// Reads `dir/labels.csv` ("filename,label_index" per line) and the images it names.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto csv_path = dir / "labels.csv";
  std::istringstream csv(detail::read_file_bytes(csv_path));
  Dataset ds;
  std::size_t max_label = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(csv, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos || comma == 0) {
      throw LoadError(csv_path.string() + ": line " + std::to_string(line_no) + " is not 'filename,label_index'");
    }
    const std::string file = line.substr(0, comma);
    const std::string label_text = line.substr(comma + 1);
    std::size_t label = 0;
    try {
      std::size_t used = 0;
      label = std::stoul(label_text, &used);
      if (used != label_text.size()) throw std::invalid_argument(label_text);
    } catch (const std::exception&) {
      throw LoadError(csv_path.string() + ": line " + std::to_string(line_no) + " has invalid label '" + label_text + "'");
    }
    Tensor image = read_pnm(dir / file);
    if (!ds.samples.empty() && image.shape() != ds.samples.front().image.shape()) {
      throw LoadError((dir / file).string() + ": size " + shape_string(image.shape()) + " differs from first image " +
                      shape_string(ds.samples.front().image.shape()));
    }
    max_label = std::max(max_label, label);
    ds.samples.push_back({std::move(image), label, {}});
  }
  if (ds.samples.empty()) throw LoadError(csv_path.string() + ": no samples");
  for (std::size_t c = 0; c <= max_label; ++c) ds.class_names.push_back("class_" + std::to_string(c));
  return ds;
}

/// Writes img_NNNNN.pgm/.ppm files plus labels.csv.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  std::string csv;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    char name[32];
    const char* ext = ds.samples[i].image.dim(0) == 1 ? "pgm" : "ppm";
    std::snprintf(name, sizeof(name), "img_%05zu.%s", i, ext);
    write_pnm(dir / name, ds.samples[i].image);
    csv += std::string(name) + "," + std::to_string(ds.samples[i].label) + "\n";
  }
  std::ofstream out(dir / "labels.csv", std::ios::binary);
  if (!out) throw LoadError((dir / "labels.csv").string() + ": cannot open for writing");
  out << csv;
}

// ---------------------------------------------------------------------------
// Synthetic occlusion benchmark

inline constexpr std::array<const char*, 6> kGlyphNames{"cross", "ring", "bars", "checker", "diagonal", "dots"};

struct SyntheticSpec {
  std::size_t num_classes = 4;
  std::size_t side = 32;
  std::size_t train_count = 2400;
  std::size_t test_count = 800;
  std::size_t occluder_count = 2;
  std::size_t occluder_min = 4;
  std::size_t occluder_max = 10;
  double noise_std = 8.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2 || num_classes > kGlyphNames.size()) {
      throw ConfigError("synthetic data supports 2.." + std::to_string(kGlyphNames.size()) + " classes");
    }
    if (side < 8) throw ConfigError("synthetic side must be >= 8");
    if (occluder_min < 1 || occluder_min > occluder_max) throw ConfigError("need 1 <= occluder_min <= occluder_max");
    if (occluder_max >= side) throw ConfigError("occluder side must be smaller than the image side");
    if (noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
  }
};

namespace detail {

inline std::int64_t floor_mod(std::int64_t a, std::int64_t m) { return ((a % m) + m) % m; }

/// Foreground indicator of glyph `kind` at pixel (x, y) for a pattern
/// centred at (cx, cy). Every glyph tiles the whole frame with period 8.
inline bool glyph_on(std::size_t kind, std::int64_t x, std::int64_t y, std::int64_t cx, std::int64_t cy) {
  const std::int64_t dx = x - cx, dy = y - cy;
  switch (kind) {
    case 0: return floor_mod(dx, 8) < 2 || floor_mod(dy, 8) < 2;                        // cross lattice
    case 1: return std::fmod(std::hypot(dx + 0.5, dy + 0.5), 8.0) < 4.0;                // concentric rings
    case 2: return floor_mod(dy, 8) < 4;                                                 // horizontal bars
    case 3: return (floor_mod(dx, 8) < 4) != (floor_mod(dy, 8) < 4);                     // checker
    case 4: return floor_mod(dx + dy, 8) < 4;                                            // diagonal stripes
    default: {
      const std::int64_t mx = floor_mod(dx, 8) - 4, my = floor_mod(dy, 8) - 4;          // dot lattice
      return mx * mx + my * my <= 5;
    }
  }
}

inline Sample draw_sample(const SyntheticSpec& spec, std::size_t label, Rng& rng) {
  const std::size_t s = spec.side;
  const auto half = static_cast<std::int64_t>(s / 2);
  const std::int64_t cx = half + rng.uniform_int(-1, 1);
  const std::int64_t cy = half + rng.uniform_int(-1, 1);
  const double background = rng.uniform(20.0, 70.0);
  const double foreground = rng.uniform(150.0, 220.0);
  Sample sample{Tensor({1, s, s}), label, {}};
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const bool on = glyph_on(label, static_cast<std::int64_t>(x), static_cast<std::int64_t>(y), cx, cy);
      sample.image(0, y, x) = on ? foreground : background;
    }
  }
  for (std::size_t o = 0; o < spec.occluder_count; ++o) {
    Rect r;
    r.w = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.occluder_min),
                                                   static_cast<std::int64_t>(spec.occluder_max)));
    r.h = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(spec.occluder_min),
                                                   static_cast<std::int64_t>(spec.occluder_max)));
    r.x = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(s - r.w)));
    r.y = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(s - r.h)));
    const double shade = rng.uniform(235.0, 255.0);
    for (std::size_t y = r.y; y < r.y + r.h; ++y) {
      for (std::size_t x = r.x; x < r.x + r.w; ++x) sample.image(0, y, x) = shade;
    }
    sample.occluders.push_back(r);
  }
  for (double& v : sample.image.values()) {
    const double noisy = spec.noise_std > 0.0 ? v + spec.noise_std * rng.normal() : v;
    v = std::clamp(std::round(noisy), 0.0, 255.0);
  }
  return sample;
}

inline Dataset draw_split(const SyntheticSpec& spec, std::size_t count, std::uint64_t stream) {
  Rng rng(spec.seed * 0x9E3779B97F4A7C15ull + stream);
  Dataset ds;
  for (std::size_t c = 0; c < spec.num_classes; ++c) ds.class_names.emplace_back(kGlyphNames[c]);
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) ds.samples.push_back(draw_sample(spec, i % spec.num_classes, rng));
  return ds;
}

}  // namespace detail

/// Deterministic (train, test) pair; the splits use disjoint seed streams.
inline std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  return {detail::draw_split(spec, spec.train_count, 1), detail::draw_split(spec, spec.test_count, 2)};
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentDraw {
  bool flip = false;
  int dy = 0;  // crop offset relative to the unshifted frame, in [-pad, pad]
  int dx = 0;
};

inline constexpr int kAugmentPad = 4;

namespace detail {

inline std::size_t reflect_index(std::int64_t i, std::size_t n) {
  const auto last = static_cast<std::int64_t>(n) - 1;
  if (i < 0) i = -i;
  if (i > last) i = 2 * last - i;
  return static_cast<std::size_t>(i);
}

}  // namespace detail

/// Horizontal flip, then reflect-pad by 4 and crop back at offset (dy, dx).
inline Sample apply_augment(const Sample& sample, const AugmentDraw& draw) {
  const Tensor& in = sample.image;
  const std::size_t channels = in.dim(0), h = in.dim(1), w = in.dim(2);
  Sample out{Tensor(in.shape()), sample.label, {}};
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = detail::reflect_index(static_cast<std::int64_t>(y) + draw.dy, h);
      for (std::size_t x = 0; x < w; ++x) {
        std::size_t sx = detail::reflect_index(static_cast<std::int64_t>(x) + draw.dx, w);
        if (draw.flip) sx = w - 1 - sx;
        out.image(c, y, x) = in(c, sy, sx);
      }
    }
  }
  return out;
}

inline Sample augment(const Sample& sample, Rng& rng) {
  AugmentDraw draw;
  draw.flip = rng.bernoulli(0.5);
  draw.dy = static_cast<int>(rng.uniform_int(-kAugmentPad, kAugmentPad));
  draw.dx = static_cast<int>(rng.uniform_int(-kAugmentPad, kAugmentPad));
  return apply_augment(sample, draw);
}

}  // namespace apvit

#endif  // APVIT_DATA_HPP_
