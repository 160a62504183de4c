#include <doctest.h>

#include <cmath>

#include "mvar/camera.hpp"
#include "mvar/error.hpp"
#include "mvar/rng.hpp"
#include "mvar/scene.hpp"
#include "support.hpp"

using namespace mvar;

namespace {

Eigen::Vector3d random_vec(Rng& rng, double s = 1.0) {
  return Eigen::Vector3d(rng.uniform(-s, s), rng.uniform(-s, s), rng.uniform(-s, s));
}

}  // namespace

TEST_CASE("plucker coordinates of simple rays") {
  const PluckerRay through_origin = plucker(Eigen::Vector3d::Zero(), Eigen::Vector3d(0.3, -2, 1));
  CHECK(through_origin.moment.norm() == 0.0);
  const PluckerRay r = plucker(Eigen::Vector3d(1, 0, 0), Eigen::Vector3d(0, 1, 0));
  CHECK(r.moment == Eigen::Vector3d(0, 0, 1));
  CHECK(r.direction == Eigen::Vector3d(0, 1, 0));
  CHECK_THROWS_AS(plucker(Eigen::Vector3d::Ones(), Eigen::Vector3d::Zero()), ContractError);
}

TEST_CASE("plucker invariants over random rays") {
  Rng rng(31);
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Vector3d o = random_vec(rng, 5), d = random_vec(rng, 2);
    const PluckerRay r = plucker(o, d);
    CHECK(std::abs(r.moment.dot(r.direction)) <= 1e-12);
    CHECK(std::abs(r.direction.norm() - 1.0) <= 1e-9);
    const double lambda = rng.uniform(-3, 3);
    const PluckerRay s = plucker(o + lambda * d, d);
    CHECK((s.moment - r.moment).norm() <= 1e-10);
  }
}

TEST_CASE("orthographic ray grids share one direction") {
  const CameraPose pose = make_pose(37, 30);
  const RayGrid g = ray_grid(pose, 8, 8);
  REQUIRE(g.rays.size() == 64);
  for (const auto& r : g.rays) CHECK((r.direction - pose.forward()).norm() <= 1e-15);
  CHECK((g.at(0, 0).moment - g.at(7, 7).moment).norm() > 0.1);
}

TEST_CASE("opposite azimuths negate ray directions") {
  const RayGrid a = ray_grid(make_pose(20, 0), 4, 4), b = ray_grid(make_pose(200, 0), 4, 4);
  for (std::size_t i = 0; i < a.rays.size(); ++i) {
    CHECK((a.rays[i].direction + b.rays[i].direction).norm() <= 1e-12);
  }
}

TEST_CASE("the center cell ray passes through the look-at point") {
  for (double az : {0.0, 90.0, 123.0}) {
    const CameraPose pose = make_pose(az, 30);
    const RayGrid g = ray_grid(pose, 5, 5);
    const PluckerRay& c = g.at(2, 2);
    const Eigen::Vector3d target = Eigen::Vector3d::Zero();
    CHECK((c.moment - target.cross(c.direction)).norm() <= 1e-9);
  }
}

TEST_CASE("every ray passes through its cell center on the image plane") {
  const CameraPose pose = make_pose(60, 30);
  const std::size_t h = 4, w = 4;
  const RayGrid g = ray_grid(pose, h, w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double u = (2.0 * (static_cast<double>(j) + 0.5) / w - 1.0) * pose.ortho_scale;
      const double v = (1.0 - 2.0 * (static_cast<double>(i) + 0.5) / h) * pose.ortho_scale;
      const Eigen::Vector3d p = pose.origin + u * pose.right() + v * pose.up();
      CHECK((g.at(i, j).moment - p.cross(g.at(i, j).direction)).norm() <= 1e-12);
    }
  }
}

TEST_CASE("ring views never share a ray at the same cell") {
  const auto poses = pose_ring(4);
  std::vector<RayGrid> grids;
  for (const auto& p : poses) grids.push_back(ray_grid(p, 8, 8));
  for (std::size_t c = 0; c < 64; ++c) {
    for (std::size_t a = 0; a < 4; ++a) {
      for (std::size_t b = a + 1; b < 4; ++b) CHECK(grids[a].rays[c].as_array() != grids[b].rays[c].as_array());
    }
  }
}

TEST_CASE("spe_embed is rays times projection") {
  Rng rng(32);
  std::vector<Ray6> rays;
  for (const auto& r : ray_grid(make_pose(10, 30), 2, 2).rays) rays.push_back(r.as_array());
  rays.insert(rays.begin(), Ray6{});
  const Tensor w = testing::random_tensor({6, 5}, rng);
  const Tensor e = spe_embed(rays, w);
  REQUIRE(e.shape() == Shape{5, 5});
  for (std::size_t c = 0; c < 5; ++c) CHECK(e.at(0, c) == 0.0);
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t c = 0; c < 5; ++c) {
      double s = 0;
      for (std::size_t k = 0; k < 6; ++k) s += rays[t][k] * w.at(k, c);
      CHECK(std::abs(e.at(t, c) - s) <= 1e-12);
    }
  }
  const Tensor zero = spe_embed(rays, Tensor::zeros({6, 5}));
  for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("spe_embed gradient passes a finite-difference check") {
  Rng rng(33);
  std::vector<Ray6> rays;
  for (const auto& r : ray_grid(make_pose(70, 30), 3, 3).rays) rays.push_back(r.as_array());
  Tensor w = testing::random_tensor({6, 8}, rng, 0.1, true);
  const auto r = testing::grad_check([&] { return testing::probe(silu(spe_embed(rays, w))); }, {w});
  CHECK(r.worst <= 1e-4);
}
