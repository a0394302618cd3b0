// Copyright 2026 The avvad Authors.
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
//
// Binary tensor container:
//   magic "AVVD", u16 format version, u32 entry count, then per entry:
//   u16 name length, name bytes, u16 rank, rank x u32 extents,
//   little-endian f32 values in row-major order.
// The same container carries model checkpoints and feature caches; loads are
// bit-exact against what was stored.

#ifndef AVVAD_CHECKPOINT_HPP_
#define AVVAD_CHECKPOINT_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "avvad/tensor.hpp"

namespace avvad {

static_assert(std::endian::native == std::endian::little,
              "container i/o assumes a little-endian host");

struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail("container truncated while reading");
  return v;
}

}  // namespace detail

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void save_container(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail("cannot open '" + path + "' for writing");
  os.write("AVVD", 4);
  detail::write_pod<std::uint16_t>(os, kCheckpointVersion);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) fail("entry name too long: " + e.name);
    detail::write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(e.shape.size()));
    std::size_t n = 1;
    for (int ext : e.shape) {
      detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ext));
      n *= static_cast<std::size_t>(ext);
    }
    if (n != e.values.size()) {
      fail("entry '" + e.name + "' shape " + shape_str(e.shape) + " does not match value count");
    }
    os.write(reinterpret_cast<const char*>(e.values.data()),
             static_cast<std::streamsize>(e.values.size() * sizeof(float)));
  }
  if (!os) fail("write failed for '" + path + "'");
}

inline std::vector<CheckpointEntry> load_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open '" + path + "' for reading");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "AVVD", 4) != 0) {
    fail("'" + path + "' is not an AVVD container");
  }
  const auto version = detail::read_pod<std::uint16_t>(is);
  if (version != kCheckpointVersion) {
    fail("unsupported container version " + std::to_string(version) + " in '" + path + "'");
  }
  const auto count = detail::read_pod<std::uint32_t>(is);
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = detail::read_pod<std::uint16_t>(is);
    e.name.resize(name_len);
    is.read(e.name.data(), name_len);
    const auto rank = detail::read_pod<std::uint16_t>(is);
    std::size_t n = 1;
    for (std::uint16_t r = 0; r < rank; ++r) {
      const auto ext = detail::read_pod<std::uint32_t>(is);
      e.shape.push_back(static_cast<int>(ext));
      n *= ext;
    }
    e.values.resize(n);
    is.read(reinterpret_cast<char*>(e.values.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!is) fail("container truncated in entry '" + e.name + "'");
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace avvad

#endif  // AVVAD_CHECKPOINT_HPP_
