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

#ifndef APVIT_CHECKPOINT_HPP_
#define APVIT_CHECKPOINT_HPP_

// Little-endian parameter file:
//   "APVT" | u32 version | per tensor: u32 name_len, name, u32 rank, u32 dims[rank], f64 values[]
//   | u64 byte count of everything before this field

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "apvit/model.hpp"

namespace apvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  std::uint64_t get(int width) {
    if (pos_ + static_cast<std::size_t>(width) > bytes_.size()) fail("unexpected end of file");
    std::uint64_t v = 0;
    for (int b = 0; b < width; ++b) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * b);
    }
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::string text(std::size_t n) {
    if (pos_ + n > bytes_.size()) fail("unexpected end of file");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  [[noreturn]] void fail(const std::string& why) const {
    throw LoadError(source_ + ": " + why + " at byte " + std::to_string(pos_));
  }

 private:
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_params(const ApvitParams& params) {
  std::string out = "APVT";
  detail::put_u32(out, kCheckpointVersion);
  params.for_each([&](const std::string& name, const Tensor& t) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  });
  detail::put_u64(out, out.size());
  return out;
}

/// Parses a checkpoint and checks every tensor name and shape against `config`.
inline ApvitParams deserialize_params(const std::string& bytes, const ApvitConfig& config,
                                      const std::string& source = "checkpoint") {
  ApvitParams params = zero_params(config);
  if (bytes.size() < 16) throw LoadError(source + ": file too short (" + std::to_string(bytes.size()) + " bytes)");
  detail::ByteReader trailer(bytes.substr(bytes.size() - 8), source);
  if (trailer.u64() != bytes.size() - 8) throw LoadError(source + ": length trailer mismatch (truncated file?)");
  detail::ByteReader in(bytes, source);
  if (in.text(4) != "APVT") in.fail("bad magic");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) in.fail("unsupported version " + std::to_string(version));
  params.for_each([&](const std::string& name, Tensor& t) {
    const std::string got = in.text(in.u32());
    if (got != name) in.fail("expected tensor '" + name + "', found '" + got + "'");
    const std::uint32_t rank = in.u32();
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    if (shape != t.shape()) {
      in.fail("tensor '" + name + "' has shape " + shape_string(shape) + ", config expects " +
              shape_string(t.shape()));
    }
    for (double& v : t.values()) v = std::bit_cast<double>(in.u64());
  });
  if (in.pos() != bytes.size() - 8) in.fail("trailing data after last tensor");
  return params;
}

inline void save_checkpoint(const std::filesystem::path& path, const ApvitParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize_params(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("failed writing " + path.string());
}

inline ApvitParams load_checkpoint(const std::filesystem::path& path, const ApvitConfig& config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_params(bytes, config, path.string());
}

}  // namespace apvit

#endif  // APVIT_CHECKPOINT_HPP_
