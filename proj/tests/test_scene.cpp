#include <doctest.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <set>

#include "mvar/dataset.hpp"
#include "mvar/error.hpp"
#include "mvar/scene.hpp"

using namespace mvar;

namespace {

Scene single(PrimitiveKind kind, Eigen::Vector3d center, double half, int color) {
  Scene s;
  s.primitives.push_back({kind, center, half, color});
  return s;
}

bool is_background(const Image& im, std::size_t x, std::size_t y) {
  return im.at(x, y, 0) == kBackground && im.at(x, y, 1) == kBackground && im.at(x, y, 2) == kBackground;
}

// Signed distance to a primitive's surface.
double surface_distance(const Primitive& p, const Eigen::Vector3d& x) {
  const Eigen::Vector3d q = x - p.center;
  const double a = p.half_size;
  switch (p.kind) {
    case PrimitiveKind::kSphere: return q.norm() - a;
    case PrimitiveKind::kCube: {
      const Eigen::Vector3d d = q.cwiseAbs() - Eigen::Vector3d::Constant(a);
      return d.cwiseMax(0.0).norm() + std::min(d.maxCoeff(), 0.0);
    }
    case PrimitiveKind::kCylinder: {
      const double radial = std::hypot(q.x(), q.z()) - a;
      const double axial = std::abs(q.y()) - a;
      return std::hypot(std::max(radial, 0.0), std::max(axial, 0.0)) + std::min(std::max(radial, axial), 0.0);
    }
  }
  return 1e9;
}

}  // namespace

TEST_CASE("make_scene is a pure function of the seed") {
  CHECK(make_scene(7) == make_scene(7));
  CHECK(!(make_scene(7) == make_scene(8)));
}

TEST_CASE("scenes have one to three well-formed primitives") {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Scene s = make_scene(seed);
    REQUIRE(s.primitives.size() >= 1);
    REQUIRE(s.primitives.size() <= 3);
    for (std::size_t i = 0; i < s.primitives.size(); ++i) {
      const auto& p = s.primitives[i];
      CHECK(p.half_size >= 0.1);
      CHECK(p.half_size <= 0.3);
      CHECK(p.center.cwiseAbs().maxCoeff() <= 1.0);
      CHECK(p.color >= 0);
      CHECK(p.color < static_cast<int>(kPaletteSize));
      for (std::size_t j = 0; j < i; ++j) {
        const auto& q = s.primitives[j];
        CHECK((p.center - q.center).norm() >= p.half_size + q.half_size);
      }
    }
  }
}

TEST_CASE("distinct seeds give distinct scenes") {
  std::vector<Scene> scenes;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) scenes.push_back(make_scene(seed));
  std::size_t same = 0, pairs = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    for (std::size_t j = i + 1; j < scenes.size(); ++j) {
      ++pairs;
      Scene a = scenes[i], b = scenes[j];
      a.seed = b.seed = 0;
      same += a == b;
    }
  }
  CHECK(static_cast<double>(same) <= 0.01 * static_cast<double>(pairs));
}

TEST_CASE("an empty scene renders as background") {
  const Image im = render(Scene{}, make_pose(40, 30), 16);
  for (double v : im.rgb) CHECK(v == kBackground);
}

TEST_CASE("a centered sphere looks the same from opposite azimuths") {
  const Scene s = single(PrimitiveKind::kSphere, Eigen::Vector3d::Zero(), 0.3, 2);
  const Image a = render(s, make_pose(0, 30), 32), b = render(s, make_pose(180, 30), 32);
  CHECK(a.rgb == b.rgb);
}

TEST_CASE("cube footprint matches the orthographic projected area") {
  const double a = 0.8;
  const std::size_t res = 64;
  const Scene s = single(PrimitiveKind::kCube, Eigen::Vector3d::Zero(), a, 0);
  for (double az : {0.0, 30.0, 45.0, 110.0}) {
    const CameraPose pose = make_pose(az, 30);
    const Image im = render(s, pose, res);
    std::size_t fg = 0;
    for (std::size_t y = 0; y < res; ++y) {
      for (std::size_t x = 0; x < res; ++x) fg += !is_background(im, x, y);
    }
    const Eigen::Vector3d d = pose.forward();
    const double area = 4 * a * a * (std::abs(d.x()) + std::abs(d.y()) + std::abs(d.z()));
    const double pixel = 2 * pose.ortho_scale / static_cast<double>(res);
    const double expected = area / (pixel * pixel);
    CHECK(std::abs(static_cast<double>(fg) - expected) <= 0.05 * expected);
  }
}

TEST_CASE("nearer primitive wins the pixel") {
  Scene s;
  s.primitives.push_back({PrimitiveKind::kCube, Eigen::Vector3d(0, 0, 0.6), 0.25, 0});
  s.primitives.push_back({PrimitiveKind::kCube, Eigen::Vector3d(0, 0, -0.6), 0.25, 2});
  const Image front = render(s, make_pose(0, 0), 32);
  const Image back = render(s, make_pose(180, 0), 32);
  CHECK(front.at(16, 16, 0) > 0.0);
  CHECK(front.at(16, 16, 2) == 0.0);
  CHECK(back.at(16, 16, 2) > 0.0);
  CHECK(back.at(16, 16, 0) == 0.0);
}

TEST_CASE("rendering is deterministic to the byte") {
  const Scene s = make_scene(77);
  for (const auto& pose : pose_ring(4)) {
    CHECK(encode_ppm(to_8bit(render(s, pose, 32))) == encode_ppm(to_8bit(render(make_scene(77), pose, 32))));
  }
}

TEST_CASE("captions follow the template") {
  const Scene one = single(PrimitiveKind::kCylinder, Eigen::Vector3d::Zero(), 0.2, 3);
  const auto ids = caption(one);
  CHECK(ids.size() == 3);
  CHECK(decode_words(ids) == "a yellow cylinder");
  Scene two = one;
  two.primitives.push_back({PrimitiveKind::kSphere, Eigen::Vector3d(0.8, 0, 0), 0.2, 2});
  CHECK(decode_words(caption(two)) == "a yellow cylinder and a blue sphere");
  CHECK(caption(make_scene(5)) == caption(make_scene(5)));
  CHECK(text_vocabulary().size() <= kTextVocabSize);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    for (auto id : caption(make_scene(seed))) {
      CHECK(id > kTextPad);
      CHECK(static_cast<std::size_t>(id) < kTextVocabSize);
    }
  }
  CHECK_THROWS_AS(word_id("teapot"), DataError);
}

TEST_CASE("surface points lie on primitive surfaces with unit normals") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Scene s = make_scene(seed);
    const PointCloud pc = sample_points(s, kShapePoints, seed);
    REQUIRE(pc.size() == kShapePoints);
    for (std::size_t i = 0; i < pc.size(); ++i) {
      double best = 1e9;
      for (const auto& p : s.primitives) best = std::min(best, std::abs(surface_distance(p, pc.points[i])));
      CHECK(best <= 1e-6);
      CHECK(std::abs(pc.normals[i].norm() - 1.0) <= 1e-9);
    }
  }
  CHECK(sample_points(make_scene(1), 17, 3).size() == 17);
  CHECK_THROWS_AS(sample_points(make_scene(1), 0, 3), ContractError);
}

TEST_CASE("sphere normals point away from the center") {
  const Eigen::Vector3d c(0.2, -0.1, 0.4);
  const PointCloud pc = sample_points(single(PrimitiveKind::kSphere, c, 0.25, 1), 200, 9);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    CHECK((pc.normals[i] - (pc.points[i] - c).normalized()).norm() <= 1e-6);
  }
}

TEST_CASE("pose ring spacing and orientation") {
  const auto four = pose_ring(4);
  const std::vector<double> expected{0, 90, 180, 270};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(four[i].azimuth_deg == expected[i]);
    CHECK(four[i].elevation_deg == kRingElevationDeg);
    CHECK(std::abs(four[i].origin.norm() - kCameraRadius) <= 1e-12);
  }
  const auto two = pose_ring(2);
  CHECK(two[0].azimuth_deg == 0.0);
  CHECK(two[1].azimuth_deg == 180.0);
  CHECK_THROWS_AS(pose_ring(1), ContractError);
  for (std::size_t n = 2; n <= 8; ++n) {
    for (const auto& p : pose_ring(n)) {
      CHECK((p.rotation.transpose() * p.rotation - Eigen::Matrix3d::Identity()).norm() <= 1e-10);
      CHECK((p.forward() + p.origin.normalized()).norm() <= 1e-12);
    }
  }
}

TEST_CASE("scene and pose serialization round trips") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Scene s = make_scene(seed);
    CHECK(scene_from_json(scene_to_json(s)) == s);
    const CameraPose p = make_pose(static_cast<double>(seed) * 7.3, 30);
    CHECK(pose_from_json(pose_to_json(p)) == p);
  }
}
