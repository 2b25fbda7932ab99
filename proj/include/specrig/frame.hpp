#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace specrig {

/// One captured image. Samples are row-major, channel-interleaved, and always
/// held in 16-bit containers regardless of bit depth.
struct Frame {
  int width = 0;
  int height = 0;
  int channels = 1;
  int bit_depth = 8;
  std::vector<std::uint16_t> pixels;
  std::int64_t timestamp_ms = 0;
  std::string illumination_tag;
  std::string dataset;
  std::string device;
  std::int64_t sequence_index = 0;
  // Exposure the frame was rendered with; informational.
  std::int64_t exposure_us = 0;

  Frame() = default;
  Frame(int w, int h, int c, int bits)
      : width(w), height(h), channels(c), bit_depth(bits),
        pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * static_cast<std::size_t>(c), 0) {}

  std::size_t sample_count() const noexcept { return pixels.size(); }
  std::uint16_t max_value() const noexcept { return static_cast<std::uint16_t>((1u << bit_depth) - 1u); }

  std::uint16_t& at(int y, int x, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint16_t at(int y, int x, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  double mean() const noexcept {
    if (pixels.empty()) return 0.0;
    double s = 0.0;
    for (auto p : pixels) s += p;
    return s / static_cast<double>(pixels.size());
  }
};

/// Single-channel floating point image, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

/// Channel `c` of a frame as doubles (raw counts).
inline Image channel_image(const Frame& f, int c = 0) {
  Image img(f.width, f.height);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) img.at(y, x) = f.at(y, x, c);
  return img;
}

}  // namespace specrig
