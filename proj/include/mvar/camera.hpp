#pragma once

// Plücker ray embeddings and the additive per-token ray ("shift position")
// encoding.

#include <Eigen/Dense>
#include <array>
#include <span>
#include <vector>

#include "mvar/scene.hpp"
#include "mvar/tensor.hpp"

namespace mvar {

using Ray6 = std::array<double, 6>;  // (moment, direction)

struct PluckerRay {
  Eigen::Vector3d moment = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();

  Ray6 as_array() const {
    return {moment.x(), moment.y(), moment.z(), direction.x(), direction.y(), direction.z()};
  }
};

// (o x d, d) with d normalised first. Throws ContractError for d == 0.
PluckerRay plucker(const Eigen::Vector3d& origin, const Eigen::Vector3d& direction);

struct RayGrid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<PluckerRay> rays;  // (i, j) row-major

  const PluckerRay& at(std::size_t i, std::size_t j) const { return rays[i * w + j]; }
};

// One ray through the centre of each token cell on the orthographic image plane.
RayGrid ray_grid(const CameraPose& pose, std::size_t h, std::size_t w);

// rays [T, 6] times projection [6, D] -> per-token additive encoding [T, D].
Tensor rays_tensor(std::span<const Ray6> rays);
Tensor spe_embed(std::span<const Ray6> rays, const Tensor& projection);

}  // namespace mvar
