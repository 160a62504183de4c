#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace mvar {

// RGB image with channel values in [0, 1], stored row-major as (y, x, c).
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), rgb(w * h * 3, fill) {}

  double& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  double at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
  bool same_shape(const Image& o) const { return width == o.width && height == o.height; }
  bool operator==(const Image&) const = default;
};

// Binary PPM (P6, maxval 255). Values are rounded to the nearest 8-bit level.
void write_ppm(const std::filesystem::path& path, const Image& image);
std::vector<unsigned char> encode_ppm(const Image& image);
Image read_ppm(const std::filesystem::path& path);

}  // namespace mvar
