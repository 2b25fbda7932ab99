#pragma once

// Minimal 8-bit PNG writer for previews. Frames deeper than 8 bits are
// min-max windowed to the full 8-bit range.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <zlib.h>

#include "specrig/error.hpp"
#include "specrig/frame.hpp"

namespace specrig {

/// 8-bit display samples of a frame. One and three channel frames keep their
/// layout; any other channel count shows channel 0 only.
inline std::vector<std::uint8_t> display_samples(const Frame& f, int& channels_out) {
  channels_out = f.channels == 3 ? 3 : 1;
  const std::size_t n = static_cast<std::size_t>(f.width) * f.height;
  std::vector<std::uint8_t> out(n * channels_out);
  auto sample = [&](std::size_t p, int c) { return f.pixels[p * f.channels + c]; };
  if (f.bit_depth <= 8) {
    for (std::size_t p = 0; p < n; ++p)
      for (int c = 0; c < channels_out; ++c) out[p * channels_out + c] = static_cast<std::uint8_t>(sample(p, c));
    return out;
  }
  std::uint16_t lo = 0xFFFF, hi = 0;
  for (std::size_t p = 0; p < n; ++p)
    for (int c = 0; c < channels_out; ++c) {
      lo = std::min(lo, sample(p, c));
      hi = std::max(hi, sample(p, c));
    }
  const double span = hi > lo ? static_cast<double>(hi - lo) : 1.0;
  for (std::size_t p = 0; p < n; ++p)
    for (int c = 0; c < channels_out; ++c)
      out[p * channels_out + c] = static_cast<std::uint8_t>(std::lround(255.0 * (sample(p, c) - lo) / span));
  return out;
}

namespace detail {

inline void put_be32(std::string& s, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) s.push_back(static_cast<char>((v >> shift) & 0xFF));
}

inline void png_chunk(std::string& out, const char* type, const std::string& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::string body = std::string(type, 4) + data;
  out += body;
  put_be32(out, static_cast<std::uint32_t>(
                    crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace detail

inline std::string encode_png(const Frame& f) {
  if (f.width < 1 || f.height < 1) throw Error("cannot encode an empty frame");
  int channels = 1;
  const auto samples = display_samples(f, channels);
  const std::size_t row = static_cast<std::size_t>(f.width) * channels;
  std::string raw;
  raw.reserve((row + 1) * f.height);
  for (int y = 0; y < f.height; ++y) {
    raw.push_back('\0');  // filter: none
    raw.append(reinterpret_cast<const char*>(samples.data() + y * row), row);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::string z(zlen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &zlen, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw Error("deflate failed");
  z.resize(zlen);

  std::string out = "\x89PNG\r\n\x1a\n";
  std::string ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(f.width));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(f.height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(channels == 3 ? 2 : 0);  // colour type: RGB or gray
  ihdr.append(3, '\0');  // compression, filter, interlace
  detail::png_chunk(out, "IHDR", ihdr);
  detail::png_chunk(out, "IDAT", z);
  detail::png_chunk(out, "IEND", "");
  return out;
}

}  // namespace specrig
