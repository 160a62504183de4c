#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mvar/tensor.hpp"

namespace mvar {

struct AdamWState {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  // Per-parameter switch for the decoupled decay term.
  std::vector<std::uint8_t> decay;

  // Zeroed moments shaped like `params`; decay applies to rank >= 2 tensors.
  static AdamWState for_params(std::span<const Tensor> params, double lr, double beta1,
                               double beta2, double weight_decay, double eps = 1e-8);
};

// One bias-corrected AdamW update using each parameter's accumulated gradient
// (a parameter without a gradient is treated as having a zero gradient).
void adamw_step(std::span<Tensor> params, AdamWState& state);

// Scales gradients in place so their global L2 norm is at most max_norm.
// Returns the norm before scaling.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

}  // namespace mvar
