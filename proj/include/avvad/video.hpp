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

#ifndef AVVAD_VIDEO_HPP_
#define AVVAD_VIDEO_HPP_

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "avvad/tensor.hpp"

namespace avvad::synth {

inline constexpr int kFps = 8;
inline constexpr int kFrameSize = 32;
inline constexpr int kSeqFrames = 8;  // one 1.0 s sequence

// Whole-scene grayscale frame track at kFps, pixel values in [0,1].
struct FrameStream {
  int width = kFrameSize;
  int height = kFrameSize;
  std::vector<float> pixels;  // frame-major
  double start_time = 0.0;

  int frame_count() const {
    return width * height == 0
               ? 0
               : static_cast<int>(pixels.size() / (static_cast<std::size_t>(width) * height));
  }
  const float* frame(int i) const {
    return pixels.data() + static_cast<std::size_t>(i) * width * height;
  }
};

// A fixed 8-frame window of the stream covering one 1.0 s analysis block.
struct ImageSequence {
  Tensor<float> frames;  // [kSeqFrames, kFrameSize, kFrameSize]
  double start_time = 0.0;
};

// Frame container: magic "AVIM", u16 width, u16 height, u32 frame count,
// then raw 8-bit grayscale frames.
inline void write_frames(const std::string& path, const FrameStream& fs) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail("cannot open '" + path + "' for writing");
  os.write("AVIM", 4);
  const std::uint16_t w = static_cast<std::uint16_t>(fs.width);
  const std::uint16_t h = static_cast<std::uint16_t>(fs.height);
  const std::uint32_t n = static_cast<std::uint32_t>(fs.frame_count());
  os.write(reinterpret_cast<const char*>(&w), 2);
  os.write(reinterpret_cast<const char*>(&h), 2);
  os.write(reinterpret_cast<const char*>(&n), 4);
  for (float p : fs.pixels) {
    float c = p < 0.0f ? 0.0f : (p > 1.0f ? 1.0f : p);
    const std::uint8_t b = static_cast<std::uint8_t>(c * 255.0f + 0.5f);
    os.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!os) fail("write failed for '" + path + "'");
}

inline FrameStream read_frames(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open '" + path + "' for reading");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "AVIM", 4) != 0) fail("'" + path + "' is not an AVIM file");
  std::uint16_t w = 0, h = 0;
  std::uint32_t n = 0;
  is.read(reinterpret_cast<char*>(&w), 2);
  is.read(reinterpret_cast<char*>(&h), 2);
  is.read(reinterpret_cast<char*>(&n), 4);
  if (!is) fail("'" + path + "' has a truncated header");
  FrameStream fs;
  fs.width = w;
  fs.height = h;
  fs.pixels.resize(static_cast<std::size_t>(w) * h * n);
  std::vector<std::uint8_t> raw(fs.pixels.size());
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!is) fail("'" + path + "' has truncated frame data");
  for (std::size_t i = 0; i < raw.size(); ++i) fs.pixels[i] = raw[i] / 255.0f;
  return fs;
}

}  // namespace avvad::synth

#endif  // AVVAD_VIDEO_HPP_
