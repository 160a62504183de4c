#include "mvar/tokenizer.hpp"

#include <cmath>

#include "mvar/error.hpp"

namespace mvar {

Codebook Codebook::palette() {
  Codebook cb;
  cb.entries = kPaletteCodes;
  cb.dim = 3;
  cb.values.reserve(cb.entries * cb.dim);
  for (int r = 0; r < 8; ++r) {
    for (int g = 0; g < 8; ++g) {
      for (int b = 0; b < 8; ++b) {
        cb.values.push_back(r / 7.0);
        cb.values.push_back(g / 7.0);
        cb.values.push_back(b / 7.0);
      }
    }
  }
  return cb;
}

void Codebook::validate() const {
  if (entries < 2) throw ContractError("codebook needs at least 2 entries");
  if (dim == 0 || values.size() != entries * dim) {
    throw DimensionError("codebook storage does not match " + std::to_string(entries) + "x" +
                         std::to_string(dim));
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite codebook entry");
  }
}

FeatureGrid encode_features(const Image& image, std::size_t patch) {
  if (patch == 0 || image.width % patch != 0 || image.height % patch != 0) {
    throw DimensionError("image " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + " not divisible by patch " +
                         std::to_string(patch));
  }
  FeatureGrid f;
  f.h = image.height / patch;
  f.w = image.width / patch;
  f.dim = 3;
  f.values.assign(f.h * f.w * 3, 0.0);
  const double inv = 1.0 / static_cast<double>(patch * patch);
  for (std::size_t i = 0; i < f.h; ++i) {
    for (std::size_t j = 0; j < f.w; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        double total = 0.0;
        for (std::size_t y = 0; y < patch; ++y) {
          for (std::size_t x = 0; x < patch; ++x) total += image.at(j * patch + x, i * patch + y, c);
        }
        f.values[(i * f.w + j) * 3 + c] = total * inv;
      }
    }
  }
  return f;
}

std::int64_t nearest_code(std::span<const double> feature, const Codebook& codebook) {
  if (feature.size() != codebook.dim) {
    throw DimensionError("feature dimension " + std::to_string(feature.size()) +
                         " differs from codebook dimension " + std::to_string(codebook.dim));
  }
  std::int64_t best = 0;
  double best_dist = INFINITY;
  for (std::size_t v = 0; v < codebook.entries; ++v) {
    const double* z = codebook.values.data() + v * codebook.dim;
    double dist = 0.0;
    for (std::size_t c = 0; c < codebook.dim; ++c) {
      const double diff = z[c] - feature[c];
      dist += diff * diff;
    }
    if (dist < best_dist) {  // strict: earlier index wins ties
      best_dist = dist;
      best = static_cast<std::int64_t>(v);
    }
  }
  return best;
}

TokenGrid quantize(const FeatureGrid& features, const Codebook& codebook) {
  if (features.dim != codebook.dim) {
    throw DimensionError("feature dimension " + std::to_string(features.dim) +
                         " differs from codebook dimension " + std::to_string(codebook.dim));
  }
  TokenGrid q;
  q.h = features.h;
  q.w = features.w;
  q.codes.resize(q.h * q.w);
  for (std::size_t i = 0; i < q.h; ++i) {
    for (std::size_t j = 0; j < q.w; ++j) q.codes[i * q.w + j] = nearest_code(features.cell(i, j), codebook);
  }
  return q;
}

namespace {

void check_codes(const TokenGrid& tokens, const Codebook& codebook) {
  if (tokens.codes.size() != tokens.h * tokens.w) throw DimensionError("token grid size mismatch");
  for (auto c : tokens.codes) {
    if (c < 0 || static_cast<std::size_t>(c) >= codebook.entries) {
      throw ContractError("code " + std::to_string(c) + " outside codebook of " +
                          std::to_string(codebook.entries));
    }
  }
}

}  // namespace

FeatureGrid lookup_features(const TokenGrid& tokens, const Codebook& codebook) {
  check_codes(tokens, codebook);
  FeatureGrid f;
  f.h = tokens.h;
  f.w = tokens.w;
  f.dim = codebook.dim;
  f.values.reserve(f.h * f.w * f.dim);
  for (auto c : tokens.codes) {
    auto row = codebook.row(static_cast<std::size_t>(c));
    f.values.insert(f.values.end(), row.begin(), row.end());
  }
  return f;
}

Image decode(const TokenGrid& tokens, const Codebook& codebook, std::size_t patch) {
  check_codes(tokens, codebook);
  if (codebook.dim != 3) throw DimensionError("decode needs an RGB codebook");
  Image image(tokens.w * patch, tokens.h * patch);
  for (std::size_t i = 0; i < tokens.h; ++i) {
    for (std::size_t j = 0; j < tokens.w; ++j) {
      auto color = codebook.row(static_cast<std::size_t>(tokens.at(i, j)));
      for (std::size_t y = 0; y < patch; ++y) {
        for (std::size_t x = 0; x < patch; ++x) {
          for (std::size_t c = 0; c < 3; ++c) image.at(j * patch + x, i * patch + y, c) = color[c];
        }
      }
    }
  }
  return image;
}

}  // namespace mvar
