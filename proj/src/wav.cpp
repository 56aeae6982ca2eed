// Copyright 2025 USEMamba Contributors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "usemamba/wav.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace usemamba {

namespace {

uint32_t rd_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint16_t rd_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}
void wr_u32(std::ofstream& f, uint32_t v) {
  uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                  static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}
void wr_u16(std::ofstream& f, uint16_t v) {
  uint8_t b[2] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8)};
  f.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("wav: cannot open " + path);
  std::vector<uint8_t> raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (raw.size() < 44 || std::memcmp(raw.data(), "RIFF", 4) != 0 ||
      std::memcmp(raw.data() + 8, "WAVE", 4) != 0) {
    throw std::runtime_error("wav: " + path + " is not a RIFF/WAVE file");
  }

  uint16_t fmt_tag = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  const uint8_t* data_ptr = nullptr;
  std::size_t data_len = 0;

  std::size_t pos = 12;
  while (pos + 8 <= raw.size()) {
    const char* id = reinterpret_cast<const char*>(raw.data() + pos);
    const uint32_t sz = rd_u32(raw.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + sz > raw.size()) throw std::runtime_error("wav: truncated chunk in " + path);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (sz < 16) throw std::runtime_error("wav: malformed fmt chunk in " + path);
      fmt_tag = rd_u16(raw.data() + body);
      channels = rd_u16(raw.data() + body + 2);
      rate = rd_u32(raw.data() + body + 4);
      bits = rd_u16(raw.data() + body + 14);
      if (fmt_tag == 0xFFFE && sz >= 40) fmt_tag = rd_u16(raw.data() + body + 24);
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_ptr = raw.data() + body;
      data_len = sz;
    }
    pos = body + sz + (sz & 1);  // chunks are word-aligned
  }

  if (!data_ptr || rate == 0) throw std::runtime_error("wav: missing fmt/data chunk in " + path);
  if (channels != 1) {
    throw std::runtime_error("wav: " + path + " has " + std::to_string(channels) +
                             " channels; only mono is supported");
  }

  Waveform w;
  w.rate_hz = static_cast<int>(rate);
  if (fmt_tag == 1 && bits == 16) {
    const std::size_t n = data_len / 2;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      int16_t s;
      std::memcpy(&s, data_ptr + 2 * i, 2);
      w.samples[i] = static_cast<double>(s) / 32768.0;
    }
  } else if (fmt_tag == 3 && bits == 32) {
    const std::size_t n = data_len / 4;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      float s;
      std::memcpy(&s, data_ptr + 4 * i, 4);
      w.samples[i] = static_cast<double>(s);
    }
  } else {
    throw std::runtime_error("wav: " + path + " uses unsupported format (tag=" +
                             std::to_string(fmt_tag) + ", bits=" + std::to_string(bits) +
                             "); expected PCM16 or float32");
  }
  return w;
}

void write_wav(const std::string& path, const Waveform& wave, WavFormat fmt) {
  require(wave.rate_hz > 0, "wav: invalid rate");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("wav: cannot write " + path);

  const bool is_float = fmt == WavFormat::float32;
  const uint16_t bits = is_float ? 32 : 16;
  const uint32_t bytes_per = bits / 8;
  const uint32_t data_size = static_cast<uint32_t>(wave.samples.size() * bytes_per);

  f.write("RIFF", 4);
  wr_u32(f, 36 + data_size);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  wr_u32(f, 16);
  wr_u16(f, is_float ? 3 : 1);
  wr_u16(f, 1);  // mono
  wr_u32(f, static_cast<uint32_t>(wave.rate_hz));
  wr_u32(f, static_cast<uint32_t>(wave.rate_hz) * bytes_per);
  wr_u16(f, static_cast<uint16_t>(bytes_per));
  wr_u16(f, bits);
  f.write("data", 4);
  wr_u32(f, data_size);

  if (is_float) {
    for (double s : wave.samples) {
      const float v = static_cast<float>(s);
      f.write(reinterpret_cast<const char*>(&v), 4);
    }
  } else {
    for (double s : wave.samples) {
      const double c = std::clamp(s, -1.0, 1.0);
      const int16_t v = static_cast<int16_t>(std::lround(c * 32767.0));
      f.write(reinterpret_cast<const char*>(&v), 2);
    }
  }
  if (!f) throw std::runtime_error("wav: write failed for " + path);
}

}  // namespace usemamba
