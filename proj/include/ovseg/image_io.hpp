#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace ovseg {

/// 8-bit raster, row-major, interleaved channels (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
};

/// Binary P5 (gray) / P6 (RGB) with maxval 255. Comments in the header are skipped.
Image8 read_pnm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Image8& img);
void write_ppm(const std::filesystem::path& path, const Image8& img);

}  // namespace ovseg
