#include "mvar/dataset.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "mvar/error.hpp"

namespace mvar {

using nlohmann::json;

void DatasetConfig::validate() const {
  if (views < 2) throw ContractError("dataset needs at least 2 views");
  if (patch == 0 || res == 0 || res % patch != 0) {
    throw DimensionError("resolution " + std::to_string(res) + " not divisible by patch " +
                         std::to_string(patch));
  }
  if (points == 0) throw ContractError("dataset needs at least one surface point");
}

Image to_8bit(const Image& image) {
  Image out = image;
  for (auto& v : out.rgb) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

SceneSample make_sample(std::uint64_t seed, const DatasetConfig& cfg, const Codebook& codebook) {
  cfg.validate();
  SceneSample s;
  s.seed = seed;
  s.scene = make_scene(seed);
  s.poses = pose_ring(cfg.views);
  s.caption = caption(s.scene);
  for (const auto& pose : s.poses) {
    s.images.push_back(to_8bit(render(s.scene, pose, cfg.res)));
    s.tokens.push_back(tokenize(s.images.back(), codebook, cfg.patch));
    s.rays.push_back(ray_grid(pose, cfg.grid(), cfg.grid()));
  }
  s.cloud = sample_points(s.scene, cfg.points, splitmix64(seed));
  return s;
}

std::vector<SceneSample> make_samples(std::span<const std::uint64_t> seeds, const DatasetConfig& cfg,
                                      const Codebook& codebook) {
  std::vector<SceneSample> out;
  out.reserve(seeds.size());
  for (auto seed : seeds) out.push_back(make_sample(seed, cfg, codebook));
  return out;
}

std::vector<std::uint64_t> unique_caption_seeds(std::uint64_t first, std::size_t count) {
  std::vector<std::uint64_t> out;
  std::set<std::vector<std::int64_t>> seen;
  for (std::uint64_t seed = first; out.size() < count; ++seed) {
    if (seen.insert(caption(make_scene(seed))).second) out.push_back(seed);
  }
  return out;
}

std::vector<std::uint64_t> seed_range(std::uint64_t first, std::uint64_t last) {
  if (last < first) throw ContractError("empty seed range");
  std::vector<std::uint64_t> out;
  for (std::uint64_t s = first; s <= last; ++s) out.push_back(s);
  return out;
}

std::vector<std::uint64_t> parse_seed_range(const std::string& text) {
  try {
    const auto dots = text.find("..");
    if (dots == std::string::npos) return {std::stoull(text)};
    return seed_range(std::stoull(text.substr(0, dots)), std::stoull(text.substr(dots + 2)));
  } catch (const std::logic_error&) {
    throw ContractError("bad seed range '" + text + "', expected A..B");
  }
}

json scene_to_json(const Scene& scene) {
  json prims = json::array();
  for (const auto& p : scene.primitives) {
    prims.push_back({{"kind", std::string(kind_name(p.kind))},
                     {"center", {p.center.x(), p.center.y(), p.center.z()}},
                     {"half_size", p.half_size},
                     {"color", p.color}});
  }
  return {{"seed", scene.seed}, {"primitives", prims}};
}

namespace {

PrimitiveKind kind_from_name(const std::string& name) {
  for (auto k : {PrimitiveKind::kCube, PrimitiveKind::kSphere, PrimitiveKind::kCylinder}) {
    if (kind_name(k) == name) return k;
  }
  throw DataError("unknown primitive kind '" + name + "'");
}

Eigen::Vector3d vec3(const json& j) {
  if (!j.is_array() || j.size() != 3) throw DataError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

Scene scene_from_json(const json& j) {
  try {
    Scene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& p : j.at("primitives")) {
      Primitive prim;
      prim.kind = kind_from_name(p.at("kind").get<std::string>());
      prim.center = vec3(p.at("center"));
      prim.half_size = p.at("half_size").get<double>();
      prim.color = p.at("color").get<int>();
      if (prim.color < 0 || prim.color >= static_cast<int>(kPaletteSize)) {
        throw DataError("palette index out of range");
      }
      s.primitives.push_back(prim);
    }
    return s;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed scene: ") + e.what());
  }
}

json pose_to_json(const CameraPose& pose) {
  json rot = json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) rot.push_back(pose.rotation(r, c));
  }
  return {{"azimuth", pose.azimuth_deg},
          {"elevation", pose.elevation_deg},
          {"origin", {pose.origin.x(), pose.origin.y(), pose.origin.z()}},
          {"rotation", rot},
          {"ortho_scale", pose.ortho_scale}};
}

CameraPose pose_from_json(const json& j) {
  try {
    CameraPose p;
    p.azimuth_deg = j.at("azimuth").get<double>();
    p.elevation_deg = j.at("elevation").get<double>();
    p.origin = vec3(j.at("origin"));
    const auto& rot = j.at("rotation");
    if (!rot.is_array() || rot.size() != 9) throw DataError("pose rotation must have 9 entries");
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) p.rotation(r, c) = rot[r * 3 + c].get<double>();
    }
    p.ortho_scale = j.at("ortho_scale").get<double>();
    return p;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed pose: ") + e.what());
  }
}

namespace {

std::string view_file(std::uint64_t seed, std::size_t view) {
  return "scene_" + std::to_string(seed) + "_v" + std::to_string(view) + ".ppm";
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, std::span<const std::uint64_t> seeds,
                   const DatasetConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(dir);
  json scenes = json::array();
  for (auto seed : seeds) {
    const SceneSample s = make_sample(seed, cfg);
    json poses = json::array();
    json images = json::array();
    for (std::size_t v = 0; v < s.poses.size(); ++v) {
      poses.push_back(pose_to_json(s.poses[v]));
      images.push_back(view_file(seed, v));
      write_ppm(dir / view_file(seed, v), s.images[v]);
    }
    scenes.push_back({{"seed", seed},
                      {"caption", s.caption},
                      {"caption_text", decode_words(s.caption)},
                      {"scene", scene_to_json(s.scene)},
                      {"poses", poses},
                      {"images", images}});
  }
  const json manifest = {{"format", "mvar-dataset"},
                         {"version", 1},
                         {"views", cfg.views},
                         {"res", cfg.res},
                         {"patch", cfg.patch},
                         {"points", cfg.points},
                         {"scenes", scenes}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir, const Codebook& codebook) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DataError("missing dataset manifest " + path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format") != "mvar-dataset") throw DataError(path.string() + ": not a dataset manifest");
    if (manifest.at("version") != 1) throw DataError(path.string() + ": unsupported dataset version");
    Dataset ds;
    ds.config.views = manifest.at("views").get<std::size_t>();
    ds.config.res = manifest.at("res").get<std::size_t>();
    ds.config.patch = manifest.at("patch").get<std::size_t>();
    ds.config.points = manifest.at("points").get<std::size_t>();
    ds.config.validate();
    const std::size_t g = ds.config.grid();
    for (const auto& j : manifest.at("scenes")) {
      SceneSample s;
      s.seed = j.at("seed").get<std::uint64_t>();
      s.scene = scene_from_json(j.at("scene"));
      s.caption = j.at("caption").get<std::vector<std::int64_t>>();
      const auto& poses = j.at("poses");
      const auto& images = j.at("images");
      if (poses.size() != ds.config.views || images.size() != ds.config.views) {
        throw DataError("scene " + std::to_string(s.seed) + " does not list " +
                        std::to_string(ds.config.views) + " views");
      }
      for (std::size_t v = 0; v < ds.config.views; ++v) {
        s.poses.push_back(pose_from_json(poses[v]));
        Image img = read_ppm(dir / images[v].get<std::string>());
        if (img.width != ds.config.res || img.height != ds.config.res) {
          throw DataError(images[v].get<std::string>() + " is not " + std::to_string(ds.config.res) +
                          " pixels square");
        }
        s.tokens.push_back(tokenize(img, codebook, ds.config.patch));
        s.images.push_back(std::move(img));
        s.rays.push_back(ray_grid(s.poses.back(), g, g));
      }
      s.cloud = sample_points(s.scene, ds.config.points, splitmix64(s.seed));
      ds.samples.push_back(std::move(s));
    }
    return ds;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace mvar
