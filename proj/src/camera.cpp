#include "mvar/camera.hpp"

#include "mvar/error.hpp"
#include "mvar/ops.hpp"

namespace mvar {

PluckerRay plucker(const Eigen::Vector3d& origin, const Eigen::Vector3d& direction) {
  const double n = direction.norm();
  if (!(n > 0.0)) throw ContractError("plucker ray with zero direction");
  PluckerRay r;
  r.direction = direction / n;
  r.moment = origin.cross(r.direction);
  return r;
}

RayGrid ray_grid(const CameraPose& pose, std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw DimensionError("ray grid needs positive extents");
  RayGrid grid;
  grid.h = h;
  grid.w = w;
  grid.rays.reserve(h * w);
  const Eigen::Vector3d right = pose.right();
  const Eigen::Vector3d up = pose.up();
  const Eigen::Vector3d dir = pose.forward();
  for (std::size_t i = 0; i < h; ++i) {
    const double v = (1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(h)) *
                     pose.ortho_scale;
    for (std::size_t j = 0; j < w; ++j) {
      const double u = (2.0 * (static_cast<double>(j) + 0.5) / static_cast<double>(w) - 1.0) *
                       pose.ortho_scale;
      grid.rays.push_back(plucker(pose.origin + u * right + v * up, dir));
    }
  }
  return grid;
}

Tensor rays_tensor(std::span<const Ray6> rays) {
  std::vector<double> data;
  data.reserve(rays.size() * 6);
  for (const auto& r : rays) data.insert(data.end(), r.begin(), r.end());
  return Tensor::from_data({rays.size(), 6}, std::move(data));
}

Tensor spe_embed(std::span<const Ray6> rays, const Tensor& projection) {
  if (projection.rank() != 2 || projection.dim(0) != 6) {
    throw DimensionError("ray projection must be [6, D], got " + shape_string(projection.shape()));
  }
  return matmul(rays_tensor(rays), projection);
}

}  // namespace mvar
