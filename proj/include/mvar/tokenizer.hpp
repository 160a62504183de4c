#pragma once

// Image <-> token-grid conversion. Patch means form the feature grid, and a
// codebook quantizer maps every feature to the index of its nearest entry.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mvar/image.hpp"

namespace mvar {

// V entries of dimension C, row-major. Indices are 0-based.
struct Codebook {
  std::size_t entries = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t v) const { return {values.data() + v * dim, dim}; }

  // The 512-point RGB lattice {0, 1/7, ..., 1}^3; entry r*64 + g*8 + b.
  static Codebook palette();
  void validate() const;
  bool operator==(const Codebook&) const = default;
};

inline constexpr std::size_t kPaletteCodes = 512;
inline constexpr std::size_t kDefaultPatch = 4;

struct FeatureGrid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t dim = 0;
  std::vector<double> values;  // (i, j, c)

  std::span<const double> cell(std::size_t i, std::size_t j) const {
    return {values.data() + (i * w + j) * dim, dim};
  }
};

struct TokenGrid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::int64_t> codes;  // (i, j) row-major

  std::int64_t at(std::size_t i, std::size_t j) const { return codes[i * w + j]; }
  bool operator==(const TokenGrid&) const = default;
};

// Mean RGB of each patch x patch block.
FeatureGrid encode_features(const Image& image, std::size_t patch = kDefaultPatch);

// Nearest codebook entry per cell (Euclidean); ties go to the smallest index.
TokenGrid quantize(const FeatureGrid& features, const Codebook& codebook);
std::int64_t nearest_code(std::span<const double> feature, const Codebook& codebook);

// Codebook vectors of each cell.
FeatureGrid lookup_features(const TokenGrid& tokens, const Codebook& codebook);

// Fills each patch with its code's vector (codebook dim must be 3).
Image decode(const TokenGrid& tokens, const Codebook& codebook, std::size_t patch = kDefaultPatch);

inline TokenGrid tokenize(const Image& image, const Codebook& codebook,
                          std::size_t patch = kDefaultPatch) {
  return quantize(encode_features(image, patch), codebook);
}

}  // namespace mvar
