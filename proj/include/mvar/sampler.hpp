#pragma once

// Autoregressive generation for any mix of text, reference-image and shape
// conditions.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "mvar/image.hpp"
#include "mvar/model.hpp"
#include "mvar/scene.hpp"
#include "mvar/sequence.hpp"

namespace mvar {

enum class DecodeMode { kGreedy, kSampled };

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  double temperature = 1.0;  // sampled mode; 0 behaves as greedy
  std::size_t top_k = 64;
  std::uint64_t seed = 0;

  void validate(std::size_t vocab) const;
};

// Image tokens only: start/pad ids are never emitted.
std::int64_t choose_token(std::span<const double> logits, std::size_t codes, const DecodeConfig& cfg,
                          Rng& rng);

struct ReferenceView {
  TokenGrid tokens;
  CameraPose pose;
};

// Tokenizes the reference image at the model's grid; the result occupies view
// slot 1 of the generated sequence.
ReferenceView prefill_reference(const ModelState& state, const Image& image, const CameraPose& pose);

struct GenerationRequest {
  std::vector<std::int64_t> caption;  // ignored unless conditions.text
  ConditionSet conditions;
  std::optional<PointCloud> shape;
  std::optional<ReferenceView> reference;
  // One pose per generated view in generation order; with a reference its
  // pose must come first.
  std::vector<CameraPose> poses;
};

struct GenerationResult {
  std::vector<TokenGrid> views;  // natural (request) order
  std::vector<Image> images;
  ViewOrder order;
  std::vector<CameraPose> poses;
  // One entry per generated (not prefilled) token.
  std::vector<double> log_probs;
  std::size_t prefilled = 0;

  double mean_log_prob() const;
};

GenerationResult generate(const ModelState& state, const GenerationRequest& request,
                          const DecodeConfig& cfg = {});

// n views on the ring starting at azimuth `start_deg` (reference first).
std::vector<CameraPose> ring_from(double start_deg, double elevation_deg, std::size_t n);

// view_<n>.ppm per view plus manifest.txt (order, poses, log-prob summary).
void write_generation(const std::filesystem::path& dir, const GenerationResult& result);

}  // namespace mvar
