#pragma once

// Procedural scenes: seeded primitive layouts, orthographic turntable cameras,
// flat-shaded renders, templated captions and surface point clouds.

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mvar/image.hpp"

namespace mvar {

enum class PrimitiveKind : std::uint8_t { kCube = 0, kSphere = 1, kCylinder = 2 };

std::string_view kind_name(PrimitiveKind kind);

// Cubes are world-axis aligned; cylinders stand along +y with radius and
// half-height both equal to half_size.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::kCube;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double half_size = 0.2;
  int color = 0;  // index into kPalette

  bool operator==(const Primitive&) const = default;
};

struct Scene {
  std::vector<Primitive> primitives;
  std::uint64_t seed = 0;

  bool operator==(const Scene&) const = default;
};

inline constexpr std::size_t kPaletteSize = 8;
inline constexpr std::array<std::array<double, 3>, kPaletteSize> kPalette = {{
    {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {0, 1, 1}, {1, 0, 1}, {1, 1, 1}, {0, 0, 0},
}};
inline constexpr std::array<std::string_view, kPaletteSize> kColorNames = {
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "black"};
inline constexpr double kBackground = 3.0 / 7.0;

inline constexpr double kCameraRadius = 4.0;
inline constexpr double kRingElevationDeg = 30.0;
// Half-width of the orthographic view volume; contains every primitive for
// ring views at multiples of 90 degrees.
inline constexpr double kOrthoHalfExtent = 1.75;

// Rows of `rotation` are the camera right, up and forward (viewing) axes.
struct CameraPose {
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  double ortho_scale = kOrthoHalfExtent;

  Eigen::Vector3d right() const { return rotation.row(0).transpose(); }
  Eigen::Vector3d up() const { return rotation.row(1).transpose(); }
  Eigen::Vector3d forward() const { return rotation.row(2).transpose(); }

  bool operator==(const CameraPose&) const = default;
};

// Camera on a sphere of `radius` looking at the world origin, y up.
CameraPose make_pose(double azimuth_deg, double elevation_deg, double radius = kCameraRadius,
                     double ortho_scale = kOrthoHalfExtent);

// n_views cameras, azimuths 360/n apart starting at 0, fixed 30 degree elevation.
std::vector<CameraPose> pose_ring(std::size_t n_views);

Scene make_scene(std::uint64_t seed);

// Flat shading: palette color times one diffuse factor derived from the
// camera elevation, snapped to sevenths so renders stay on the RGB lattice.
double shade_factor(double elevation_deg);
Image render(const Scene& scene, const CameraPose& pose, std::size_t res);

// Nearest hit along an orthographic ray; nullopt on a miss.
struct Hit {
  double t;
  std::size_t primitive;
};
std::optional<Hit> intersect(const Scene& scene, const Eigen::Vector3d& origin,
                             const Eigen::Vector3d& dir);

// ---- captions -------------------------------------------------------------

inline constexpr std::int64_t kTextPad = 0;
inline constexpr std::size_t kTextVocabSize = 64;

const std::vector<std::string>& text_vocabulary();
std::int64_t word_id(std::string_view word);
std::string decode_words(const std::vector<std::int64_t>& ids);

// "a red cube and a blue sphere" for the scene's primitives in order.
std::vector<std::int64_t> caption(const Scene& scene);

// ---- point clouds ---------------------------------------------------------

struct PointCloud {
  std::vector<Eigen::Vector3d> points;
  std::vector<Eigen::Vector3d> normals;
  std::size_t size() const { return points.size(); }
};

inline constexpr std::size_t kShapePoints = 256;

// k points uniform over the union of primitive surfaces, outward unit normals.
PointCloud sample_points(const Scene& scene, std::size_t k, std::uint64_t seed);

double surface_area(const Primitive& p);

}  // namespace mvar
