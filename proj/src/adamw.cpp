#include "mvar/adamw.hpp"

#include <cmath>

#include "mvar/error.hpp"

namespace mvar {

AdamWState AdamWState::for_params(std::span<const Tensor> params, double lr, double beta1,
                                  double beta2, double weight_decay, double eps) {
  AdamWState s;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  s.weight_decay = weight_decay;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.numel(), 0.0);
    s.second_moment.emplace_back(p.numel(), 0.0);
    s.decay.push_back(p.rank() >= 2 ? 1 : 0);
  }
  return s;
}

void adamw_step(std::span<Tensor> params, AdamWState& state) {
  if (params.size() != state.first_moment.size()) {
    throw DimensionError("adamw: " + std::to_string(params.size()) + " parameters but state for " +
                         std::to_string(state.first_moment.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].numel() != state.first_moment[i].size()) {
      throw DimensionError("adamw: parameter " + std::to_string(i) + " has " +
                           std::to_string(params[i].numel()) + " values, moments have " +
                           std::to_string(state.first_moment[i].size()));
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    auto grad = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const double decay = state.decay[i] ? state.lr * state.weight_decay : 0.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad.empty() ? 0.0 : grad[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      data[j] -= decay * data[j];
      data[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g *= s;
    }
  }
  return norm;
}

}  // namespace mvar
