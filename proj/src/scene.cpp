#include "mvar/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mvar/error.hpp"
#include "mvar/rng.hpp"

namespace mvar {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::optional<double> hit_sphere(const Primitive& p, const Eigen::Vector3d& o,
                                 const Eigen::Vector3d& d) {
  const Eigen::Vector3d oc = o - p.center;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - p.half_size * p.half_size;
  const double disc = b * b - c;  // d is unit length
  if (disc < 0.0) return std::nullopt;
  const double s = std::sqrt(disc);
  if (-b - s > 0.0) return -b - s;
  if (-b + s > 0.0) return -b + s;
  return std::nullopt;
}

std::optional<double> hit_box(const Primitive& p, const Eigen::Vector3d& o,
                              const Eigen::Vector3d& d) {
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  for (int axis = 0; axis < 3; ++axis) {
    const double lo = p.center[axis] - p.half_size;
    const double hi = p.center[axis] + p.half_size;
    if (std::abs(d[axis]) < 1e-15) {
      if (o[axis] < lo || o[axis] > hi) return std::nullopt;
      continue;
    }
    double t0 = (lo - o[axis]) / d[axis];
    double t1 = (hi - o[axis]) / d[axis];
    if (t0 > t1) std::swap(t0, t1);
    tmin = std::max(tmin, t0);
    tmax = std::min(tmax, t1);
    if (tmin > tmax) return std::nullopt;
  }
  if (tmin > 0.0) return tmin;
  if (tmax > 0.0) return tmax;
  return std::nullopt;
}

std::optional<double> hit_cylinder(const Primitive& p, const Eigen::Vector3d& o,
                                   const Eigen::Vector3d& d) {
  const double r = p.half_size;
  const double y0 = p.center.y() - r;
  const double y1 = p.center.y() + r;
  double best = std::numeric_limits<double>::infinity();
  const double ox = o.x() - p.center.x();
  const double oz = o.z() - p.center.z();
  const double a = d.x() * d.x() + d.z() * d.z();
  if (a > 1e-15) {
    const double b = ox * d.x() + oz * d.z();
    const double c = ox * ox + oz * oz - r * r;
    const double disc = b * b - a * c;
    if (disc >= 0.0) {
      const double s = std::sqrt(disc);
      for (double t : {(-b - s) / a, (-b + s) / a}) {
        const double y = o.y() + t * d.y();
        if (t > 0.0 && y >= y0 && y <= y1) best = std::min(best, t);
      }
    }
  }
  if (std::abs(d.y()) > 1e-15) {
    for (double yc : {y0, y1}) {
      const double t = (yc - o.y()) / d.y();
      const double x = ox + t * d.x();
      const double z = oz + t * d.z();
      if (t > 0.0 && x * x + z * z <= r * r) best = std::min(best, t);
    }
  }
  if (best == std::numeric_limits<double>::infinity()) return std::nullopt;
  return best;
}

bool interpenetrates(const Primitive& a, const Primitive& b) {
  return (a.center - b.center).norm() < a.half_size + b.half_size;
}

}  // namespace

std::string_view kind_name(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::kCube: return "cube";
    case PrimitiveKind::kSphere: return "sphere";
    case PrimitiveKind::kCylinder: return "cylinder";
  }
  return "cube";
}

CameraPose make_pose(double azimuth_deg, double elevation_deg, double radius, double ortho_scale) {
  const double az = azimuth_deg * kDeg;
  const double el = elevation_deg * kDeg;
  CameraPose pose;
  pose.azimuth_deg = azimuth_deg;
  pose.elevation_deg = elevation_deg;
  pose.ortho_scale = ortho_scale;
  pose.origin = radius * Eigen::Vector3d(std::cos(el) * std::sin(az), std::sin(el),
                                         std::cos(el) * std::cos(az));
  const Eigen::Vector3d forward = -pose.origin.normalized();
  // Horizontal right vector stays well defined at the poles.
  const Eigen::Vector3d right(std::cos(az), 0.0, -std::sin(az));
  const Eigen::Vector3d up = right.cross(forward);
  pose.rotation.row(0) = right.transpose();
  pose.rotation.row(1) = up.transpose();
  pose.rotation.row(2) = forward.transpose();
  return pose;
}

std::vector<CameraPose> pose_ring(std::size_t n_views) {
  if (n_views < 2) throw ContractError("pose_ring needs at least 2 views");
  std::vector<CameraPose> poses;
  poses.reserve(n_views);
  for (std::size_t i = 0; i < n_views; ++i) {
    poses.push_back(make_pose(360.0 * static_cast<double>(i) / static_cast<double>(n_views),
                              kRingElevationDeg));
  }
  return poses;
}

Scene make_scene(std::uint64_t seed) {
  Rng rng(splitmix64(seed));
  Scene scene;
  scene.seed = seed;
  const std::size_t count = 1 + rng.uniform_int(3);
  constexpr int kMaxAttempts = 200;
  for (std::size_t n = 0; n < count; ++n) {
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
      Primitive p;
      p.kind = static_cast<PrimitiveKind>(rng.uniform_int(3));
      p.half_size = rng.uniform(0.1, 0.3);
      for (int axis = 0; axis < 3; ++axis) p.center[axis] = rng.uniform(-1.0, 1.0);
      p.color = static_cast<int>(rng.uniform_int(kPaletteSize));
      const bool clear = std::none_of(scene.primitives.begin(), scene.primitives.end(),
                                      [&](const Primitive& q) { return interpenetrates(p, q); });
      if (clear) {
        scene.primitives.push_back(p);
        break;
      }
    }
  }
  return scene;
}

double shade_factor(double elevation_deg) {
  const double f = std::round(7.0 * std::cos(elevation_deg * kDeg)) / 7.0;
  return std::clamp(f, 1.0 / 7.0, 1.0);
}

std::optional<Hit> intersect(const Scene& scene, const Eigen::Vector3d& origin,
                             const Eigen::Vector3d& dir) {
  std::optional<Hit> best;
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
    const auto& p = scene.primitives[i];
    std::optional<double> t;
    switch (p.kind) {
      case PrimitiveKind::kCube: t = hit_box(p, origin, dir); break;
      case PrimitiveKind::kSphere: t = hit_sphere(p, origin, dir); break;
      case PrimitiveKind::kCylinder: t = hit_cylinder(p, origin, dir); break;
    }
    if (t && (!best || *t < best->t)) best = Hit{*t, i};
  }
  return best;
}

Image render(const Scene& scene, const CameraPose& pose, std::size_t res) {
  if (res == 0) throw ContractError("render resolution must be positive");
  Image image(res, res, kBackground);
  const double shade = shade_factor(pose.elevation_deg);
  const Eigen::Vector3d right = pose.right();
  const Eigen::Vector3d up = pose.up();
  const Eigen::Vector3d dir = pose.forward();
  const double n = static_cast<double>(res);
  for (std::size_t py = 0; py < res; ++py) {
    const double v = (1.0 - 2.0 * (static_cast<double>(py) + 0.5) / n) * pose.ortho_scale;
    for (std::size_t px = 0; px < res; ++px) {
      const double u = (2.0 * (static_cast<double>(px) + 0.5) / n - 1.0) * pose.ortho_scale;
      const Eigen::Vector3d origin = pose.origin + u * right + v * up;
      const auto hit = intersect(scene, origin, dir);
      if (!hit) continue;
      const auto& color = kPalette[scene.primitives[hit->primitive].color];
      for (std::size_t c = 0; c < 3; ++c) image.at(px, py, c) = color[c] * shade;
    }
  }
  return image;
}

// ---- captions -------------------------------------------------------------

const std::vector<std::string>& text_vocabulary() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v = {"<pad>", "a", "and"};
    for (auto name : kColorNames) v.emplace_back(name);
    for (auto k : {PrimitiveKind::kCube, PrimitiveKind::kSphere, PrimitiveKind::kCylinder}) {
      v.emplace_back(kind_name(k));
    }
    for (const char* w : {"generate", "multi", "view", "images", "of", "the", "following", "<img>",
                          "<shape>"}) {
      v.emplace_back(w);
    }
    return v;
  }();
  return vocab;
}

std::int64_t word_id(std::string_view word) {
  const auto& vocab = text_vocabulary();
  const auto it = std::find(vocab.begin(), vocab.end(), word);
  if (it == vocab.end()) throw DataError("word not in caption vocabulary: " + std::string(word));
  return it - vocab.begin();
}

std::string decode_words(const std::vector<std::int64_t>& ids) {
  const auto& vocab = text_vocabulary();
  std::string out;
  for (auto id : ids) {
    if (id == kTextPad) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw DataError("caption id outside vocabulary: " + std::to_string(id));
    }
    if (!out.empty()) out += ' ';
    out += vocab[id];
  }
  return out;
}

std::vector<std::int64_t> caption(const Scene& scene) {
  std::vector<std::int64_t> ids;
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
    const auto& p = scene.primitives[i];
    if (i > 0) ids.push_back(word_id("and"));
    ids.push_back(word_id("a"));
    ids.push_back(word_id(kColorNames[p.color]));
    ids.push_back(word_id(kind_name(p.kind)));
  }
  return ids;
}

// ---- point clouds ---------------------------------------------------------

double surface_area(const Primitive& p) {
  const double a = p.half_size;
  switch (p.kind) {
    case PrimitiveKind::kCube: return 24.0 * a * a;
    case PrimitiveKind::kSphere: return 4.0 * std::numbers::pi * a * a;
    case PrimitiveKind::kCylinder: return 6.0 * std::numbers::pi * a * a;
  }
  return 0.0;
}

PointCloud sample_points(const Scene& scene, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw ContractError("sample_points needs k >= 1");
  PointCloud cloud;
  if (scene.primitives.empty()) return cloud;
  Rng rng(splitmix64(seed ^ 0x5eedc10d));
  std::vector<double> cumulative;
  double total = 0.0;
  for (const auto& p : scene.primitives) {
    total += surface_area(p);
    cumulative.push_back(total);
  }
  cloud.points.reserve(k);
  cloud.normals.reserve(k);
  for (std::size_t s = 0; s < k; ++s) {
    const double pick = rng.uniform() * total;
    const std::size_t idx = std::min<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin(),
        cumulative.size() - 1);
    const auto& p = scene.primitives[idx];
    const double a = p.half_size;
    Eigen::Vector3d normal;
    Eigen::Vector3d local;
    switch (p.kind) {
      case PrimitiveKind::kSphere: {
        Eigen::Vector3d g(rng.normal(), rng.normal(), rng.normal());
        while (g.norm() < 1e-12) g = Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
        normal = g.normalized();
        local = a * normal;
        break;
      }
      case PrimitiveKind::kCube: {
        const auto face = rng.uniform_int(6);
        const int axis = static_cast<int>(face / 2);
        const double sign = (face % 2 == 0) ? 1.0 : -1.0;
        normal = Eigen::Vector3d::Zero();
        normal[axis] = sign;
        local = Eigen::Vector3d(rng.uniform(-a, a), rng.uniform(-a, a), rng.uniform(-a, a));
        local[axis] = sign * a;
        break;
      }
      case PrimitiveKind::kCylinder: {
        // Side area 4*pi*a^2 against 2*pi*a^2 for both caps together.
        const double u = rng.uniform() * 6.0;
        if (u < 4.0) {
          const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
          normal = Eigen::Vector3d(std::cos(theta), 0.0, std::sin(theta));
          local = Eigen::Vector3d(a * std::cos(theta), rng.uniform(-a, a), a * std::sin(theta));
        } else {
          const double sign = u < 5.0 ? 1.0 : -1.0;
          const double r = a * std::sqrt(rng.uniform());
          const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
          normal = Eigen::Vector3d(0.0, sign, 0.0);
          local = Eigen::Vector3d(r * std::cos(theta), sign * a, r * std::sin(theta));
        }
        break;
      }
    }
    cloud.points.push_back(p.center + local);
    cloud.normals.push_back(normal);
  }
  return cloud;
}

}  // namespace mvar
