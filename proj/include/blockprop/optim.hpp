#pragma once

#include <span>
#include <vector>

#include "blockprop/tensor.hpp"

namespace blockprop {

struct RmsPropConfig {
  float learning_rate = 1e-4f;
  float weight_decay = 1e-3f;
  float smoothing = 0.99f;
  float epsilon = 1e-8f;
};

// Running mean of squared gradients per parameter tensor.
struct OptimState {
  RmsPropConfig config;
  std::vector<Tensor> square_avg;
  std::size_t steps = 0;
};

// ge = g + wd*p ; v <- rho*v + (1-rho)*ge^2 ; p <- p - lr*ge/(sqrt(v)+eps).
// State tensors are created lazily on the first step.
void rmsprop_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimState& state);

}  // namespace blockprop
