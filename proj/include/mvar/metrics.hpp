#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mvar/image.hpp"
#include "mvar/tokenizer.hpp"

namespace mvar {

inline constexpr double kPsnrCap = 99.0;

// 10 log10(max^2 / MSE) over all channels; 99 when the images are identical.
double psnr(const Image& a, const Image& b, double max_val = 1.0);

// Mean SSIM over every 8x8 window (stride 1) of the channel-mean grayscale
// images, K1 = 0.01, K2 = 0.03, dynamic range 1.
inline constexpr std::size_t kSsimWindow = 8;
double ssim(const Image& a, const Image& b);

// Fraction of token positions with equal codes.
double exact_match(std::span<const TokenGrid> pred, std::span<const TokenGrid> gt);

// Ordered key/value metrics with an id and config fingerprint. Serialized as
// "key=value" lines; values are written with enough digits to round-trip.
struct MetricReport {
  std::string experiment;
  std::string fingerprint;
  std::vector<std::pair<std::string, double>> values;

  void set(const std::string& key, double value);
  std::optional<double> get(const std::string& key) const;
  double at(const std::string& key) const;

  std::string serialize() const;
  static MetricReport parse(const std::string& text);
  bool operator==(const MetricReport&) const = default;
};

}  // namespace mvar
