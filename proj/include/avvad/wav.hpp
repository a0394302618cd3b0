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

#ifndef AVVAD_WAV_HPP_
#define AVVAD_WAV_HPP_

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "avvad/tensor.hpp"

namespace avvad::dsp {

inline constexpr int kSampleRate = 16000;

struct AudioClip {
  std::vector<float> samples;  // in [-1, 1]
  int sample_rate = kSampleRate;

  double duration() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

namespace wav_detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail("wav file truncated");
  return v;
}

}  // namespace wav_detail

// 16-bit signed PCM, mono. Clamps to full scale on write.
inline void write_wav(const std::string& path, const AudioClip& clip) {
  using namespace wav_detail;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail("cannot open '" + path + "' for writing");
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(clip.samples.size() * 2);
  os.write("RIFF", 4);
  put<std::uint32_t>(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  put<std::uint32_t>(os, 16);
  put<std::uint16_t>(os, 1);  // PCM
  put<std::uint16_t>(os, 1);  // mono
  put<std::uint32_t>(os, static_cast<std::uint32_t>(clip.sample_rate));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(clip.sample_rate * 2));
  put<std::uint16_t>(os, 2);
  put<std::uint16_t>(os, 16);
  os.write("data", 4);
  put<std::uint32_t>(os, data_bytes);
  for (float s : clip.samples) {
    const float c = std::min(1.0f, std::max(-1.0f, s));
    put<std::int16_t>(os, static_cast<std::int16_t>(std::lrintf(c * 32767.0f)));
  }
  if (!os) fail("write failed for '" + path + "'");
}

inline AudioClip read_wav(const std::string& path) {
  using namespace wav_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open '" + path + "' for reading");
  char tag[4];
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "RIFF", 4) != 0) fail("'" + path + "' is not a RIFF file");
  get<std::uint32_t>(is);
  is.read(tag, 4);
  if (!is || std::memcmp(tag, "WAVE", 4) != 0) fail("'" + path + "' is not a WAVE file");

  AudioClip clip;
  bool have_fmt = false;
  while (is.read(tag, 4)) {
    const auto chunk = get<std::uint32_t>(is);
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      const auto fmt = get<std::uint16_t>(is);
      const auto channels = get<std::uint16_t>(is);
      const auto rate = get<std::uint32_t>(is);
      get<std::uint32_t>(is);
      get<std::uint16_t>(is);
      const auto bits = get<std::uint16_t>(is);
      if (fmt != 1 || bits != 16) fail("'" + path + "': only 16-bit PCM is supported");
      if (channels != 1) fail("'" + path + "': only mono audio is supported");
      if (rate != kSampleRate) {
        fail("'" + path + "': expected " + std::to_string(kSampleRate) + " Hz, got " +
             std::to_string(rate) + " (resampling is out of scope)");
      }
      clip.sample_rate = static_cast<int>(rate);
      is.ignore(chunk > 16 ? chunk - 16 : 0);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) fail("'" + path + "': data chunk before fmt chunk");
      const std::size_t n = chunk / 2;
      clip.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        clip.samples[i] = static_cast<float>(get<std::int16_t>(is)) / 32768.0f;
      }
      return clip;
    } else {
      is.ignore(chunk + (chunk & 1));
    }
  }
  fail("'" + path + "' has no data chunk");
}

}  // namespace avvad::dsp

#endif  // AVVAD_WAV_HPP_
