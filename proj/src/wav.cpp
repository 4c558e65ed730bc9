// Copyright 2026 The evimelody Authors
// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "evimelody/dsp.hpp"
#include "evimelody/errors.hpp"

namespace evimelody::dsp {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint32_t le_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
std::uint16_t le_u16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | p[1] << 8); }

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v));
  out.push_back(static_cast<unsigned char>(v >> 8));
}
void put_tag(std::vector<unsigned char>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

double decode_sample(const unsigned char* p, std::uint16_t format, int bits) {
  if (format == kFormatFloat) {
    if (bits == 32) return std::bit_cast<float>(le_u32(p));
    std::uint64_t raw = std::uint64_t(le_u32(p)) | std::uint64_t(le_u32(p + 4)) << 32;
    return std::bit_cast<double>(raw);
  }
  switch (bits) {
    case 8:
      return (static_cast<int>(p[0]) - 128) / 128.0;
    case 16:
      return static_cast<std::int16_t>(le_u16(p)) / 32768.0;
    case 24: {
      std::int32_t v = static_cast<std::int32_t>(std::uint32_t(p[0]) << 8 | std::uint32_t(p[1]) << 16 |
                                                 std::uint32_t(p[2]) << 24);
      return (v >> 8) / 8388608.0;
    }
    case 32:
      return static_cast<std::int32_t>(le_u32(p)) / 2147483648.0;
    default:
      throw FormatError("unsupported PCM bit depth " + std::to_string(bits));
  }
}

}  // namespace

AudioBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  const std::string name = path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError(name + ": not a RIFF/WAVE file");
  }

  std::uint16_t format = 0;
  int channels = 0;
  int rate = 0;
  int bits = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* chunk = bytes.data() + pos;
    const std::size_t size = le_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) {
      if (std::memcmp(chunk, "data", 4) != 0) throw FormatError(name + ": truncated chunk");
    }
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError(name + ": short fmt chunk");
      const unsigned char* f = bytes.data() + body;
      format = le_u16(f);
      channels = le_u16(f + 2);
      rate = static_cast<int>(le_u32(f + 4));
      bits = le_u16(f + 14);
      if (format == kFormatExtensible) {
        if (size < 26) throw FormatError(name + ": short extensible fmt chunk");
        format = le_u16(f + 24);
      }
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = std::min(size, bytes.size() - body);
    }
    pos = body + size + (size & 1);
  }

  if (format == 0) throw FormatError(name + ": missing fmt chunk");
  if (data == nullptr) throw FormatError(name + ": missing data chunk");
  if (format != kFormatPcm && format != kFormatFloat) throw FormatError(name + ": unsupported encoding");
  if (format == kFormatFloat && bits != 32 && bits != 64) throw FormatError(name + ": unsupported float width");
  if (channels <= 0) throw FormatError(name + ": channel count must be > 0");
  if (rate <= 0) throw FormatError(name + ": sample rate must be > 0");

  const int width = bits / 8;
  const std::size_t count = data_size / width;
  AudioBuffer audio;
  audio.sample_rate = rate;
  audio.channels = channels;
  audio.samples.resize(count - count % channels);
  for (std::size_t i = 0; i < audio.samples.size(); ++i) {
    const double v = decode_sample(data + i * width, format, bits);
    if (!std::isfinite(v)) throw FormatError(name + ": non-finite sample");
    audio.samples[i] = v;
  }
  return audio;
}

void write_wav(const std::filesystem::path& path, const AudioBuffer& audio) {
  if (audio.channels <= 0 || audio.sample_rate <= 0) throw FormatError("invalid audio buffer");
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(audio.samples.size() * 4);
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, kFormatFloat);
  put_u16(out, static_cast<std::uint16_t>(audio.channels));
  put_u32(out, static_cast<std::uint32_t>(audio.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(audio.sample_rate * audio.channels * 4));
  put_u16(out, static_cast<std::uint16_t>(audio.channels * 4));
  put_u16(out, 32);
  put_tag(out, "data");
  put_u32(out, data_bytes);
  for (double s : audio.samples) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(s)));

  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot write " + path.string());
  file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("write failed: " + path.string());
}

}  // namespace evimelody::dsp
