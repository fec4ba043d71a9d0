#pragma once

#include "ses/geometry.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ses {

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> data;

  Image8() = default;
  Image8(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), data(w * h * c, fill) {}
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return data[(y * width + x) * channels + c];
  }
};

/// Reads P2, P3, P5 and P6 files with maxval up to 255.
Image8 read_pnm(const std::string& path);
/// Writes P5 for one channel, P6 for three.
void write_pnm(const std::string& path, const Image8& img);

/// Intensities scaled to [0, 1], layout [C,H,W].
ImageGrid to_grid(const Image8& img);
/// Rounds and clamps [0, 1] values to 8 bits. One or three channels.
Image8 from_grid(const ImageGrid& grid);

}  // namespace ses
