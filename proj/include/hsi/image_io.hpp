#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace hsi {

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  ///< row-major, 3 bytes per pixel

  RgbImage() = default;
  RgbImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), rgb(w * h * 3, fill) {}
  std::uint8_t* at(std::size_t row, std::size_t col) { return rgb.data() + (row * width + col) * 3; }
  const std::uint8_t* at(std::size_t row, std::size_t col) const { return rgb.data() + (row * width + col) * 3; }
  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// 8-bit RGB PNG.
void write_png(const RgbImage& image, const std::filesystem::path& path);
RgbImage read_png(const std::filesystem::path& path);

/// Vertical bars of `values` with whiskers of +- `errors` drawn in red.
RgbImage render_bar_chart(std::span<const double> values, std::span<const double> errors, std::size_t bar_width = 6,
                          std::size_t height = 240);

}  // namespace hsi
