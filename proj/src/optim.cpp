#include "blockprop/optim.hpp"

#include <cmath>

namespace blockprop {

void rmsprop_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimState& state) {
  if (params.size() != grads.size()) {
    throw Error("rmsprop_step: " + std::to_string(params.size()) + " parameters but " +
                std::to_string(grads.size()) + " gradients");
  }
  if (state.square_avg.empty()) {
    for (const Tensor* p : params) state.square_avg.emplace_back(p->shape());
  }
  if (state.square_avg.size() != params.size()) throw Error("rmsprop_step: optimizer state does not match parameters");

  const RmsPropConfig& cfg = state.config;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& v = state.square_avg[i];
    if (p.shape() != g.shape() || p.shape() != v.shape()) {
      throw Error("rmsprop_step: shape mismatch for parameter " + std::to_string(i) + " " + shape_str(p.shape()) +
                  " vs gradient " + shape_str(g.shape()));
    }
    // Decay is folded into the gradient before the second moment; otherwise a
    // parameter with vanishing gradient gets a step of lr*wd*p/eps.
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const float ge = g[k] + cfg.weight_decay * p[k];
      v[k] = cfg.smoothing * v[k] + (1.0f - cfg.smoothing) * ge * ge;
      p[k] -= cfg.learning_rate * ge / (std::sqrt(v[k]) + cfg.epsilon);
    }
    require_finite(p, "rmsprop_step: parameter " + std::to_string(i));
  }
  ++state.steps;
}

}  // namespace blockprop
