#pragma once

// Procedural multi-view datasets: rendered views, their token grids and ray
// grids, captions and surface point clouds, generated from scene seeds or
// loaded from a dataset directory written by write_dataset.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mvar/camera.hpp"
#include "mvar/image.hpp"
#include "mvar/rng.hpp"
#include "mvar/scene.hpp"
#include "mvar/tokenizer.hpp"

namespace mvar {

struct DatasetConfig {
  std::size_t views = 4;
  std::size_t res = 32;
  std::size_t patch = kDefaultPatch;
  std::size_t points = kShapePoints;

  std::size_t grid() const { return res / patch; }
  void validate() const;
  bool operator==(const DatasetConfig&) const = default;
};

struct SceneSample {
  std::uint64_t seed = 0;
  Scene scene;
  std::vector<CameraPose> poses;
  std::vector<Image> images;  // 8-bit levels, as stored on disk
  std::vector<TokenGrid> tokens;
  std::vector<RayGrid> rays;
  std::vector<std::int64_t> caption;
  PointCloud cloud;
};

// Snaps every channel to the nearest of the 256 levels PPM can hold.
Image to_8bit(const Image& image);

SceneSample make_sample(std::uint64_t seed, const DatasetConfig& cfg,
                        const Codebook& codebook = Codebook::palette());
std::vector<SceneSample> make_samples(std::span<const std::uint64_t> seeds, const DatasetConfig& cfg,
                                      const Codebook& codebook = Codebook::palette());

// Seeds first, first+1, ... whose captions are pairwise distinct.
std::vector<std::uint64_t> unique_caption_seeds(std::uint64_t first, std::size_t count);

std::vector<std::uint64_t> seed_range(std::uint64_t first, std::uint64_t last);
// "A..B" (inclusive) or a single integer.
std::vector<std::uint64_t> parse_seed_range(const std::string& text);

// JSON forms of scenes and poses; from_json(to_json(x)) == x.
nlohmann::json scene_to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json pose_to_json(const CameraPose& pose);
CameraPose pose_from_json(const nlohmann::json& j);

// manifest.json plus one PPM per view.
void write_dataset(const std::filesystem::path& dir, std::span<const std::uint64_t> seeds,
                   const DatasetConfig& cfg);
struct Dataset {
  DatasetConfig config;
  std::vector<SceneSample> samples;
};
Dataset load_dataset(const std::filesystem::path& dir, const Codebook& codebook = Codebook::palette());

}  // namespace mvar
