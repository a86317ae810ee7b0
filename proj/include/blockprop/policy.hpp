#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "blockprop/block_grid.hpp"
#include "blockprop/ops.hpp"
#include "blockprop/optim.hpp"
#include "blockprop/serialize.hpp"
#include "blockprop/tensor.hpp"

namespace blockprop {

// Concatenates I_t (3), H_{t-1} (3), O_{t-1} (K) and the nearest-upsampled
// previous action grid (1) into one (1, 7+K, H, W) tensor.
Tensor assemble_state(const Tensor& frame, const Tensor& prev_state, const Tensor& prev_output,
                      const ActionGrid& prev_actions, const BlockGrid& grid);

inline constexpr float kProbClamp = 1e-6f;

// Residual policy backbone: 3x3/2 stem + 2x2 max-pool, three residual blocks of
// two 3x3 convs (strides 2, 2, 1; parameter-free avg-pool skips on the strided
// ones), and a 1x1 head producing one logit channel that is average-pooled to
// the block grid.
class PolicyNet {
 public:
  struct Cache {
    std::vector<Tensor> acts;  // forward activations, see policy.cpp for layout
    Tensor logits;             // (1,1,rows,cols) after pooling
    Tensor probs;              // clamped sigmoid of logits
  };

  PolicyNet() = default;
  PolicyNet(std::size_t in_channels, std::size_t width, std::uint64_t seed);

  Cache forward(const Tensor& state, const BlockGrid& grid) const;
  // Gradients for every parameter (same order as params()) given dL/dlogits.
  std::vector<Tensor> backward(const Cache& cache, const Tensor& grad_logits) const;

  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
  std::vector<std::string> param_names() const;
  std::size_t in_channels() const { return in_channels_; }
  // Forward MACs for a state of the given extents.
  std::uint64_t forward_macs(std::size_t height, std::size_t width) const;

  ConvSpec& head() { return convs_.back(); }
  const std::vector<ConvSpec>& convs() const { return convs_; }

  NamedTensors to_tensors() const;
  void from_tensors(const NamedTensors& tensors);

 private:
  std::size_t in_channels_ = 0;
  std::size_t width_ = 0;
  std::vector<ConvSpec> convs_;  // stem, b1c1, b1c2, b2c1, b2c2, b3c1, b3c2, head
};

// Independent Bernoulli draw per block from a counter-based generator keyed by
// (seed, frame, block).
ActionGrid sample_actions(const Tensor& probs, std::uint64_t seed, long frame);

double compute_cost(const ActionGrid& actions);
double update_moving_average(double cost, double prev, double momentum);

struct RewardGrid {
  Tensor total;    // R_b
  Tensor ig_part;  // R_IG(a_b)
  Tensor cost_part;  // gamma * R_cost(a_b)
};

RewardGrid compute_rewards(const Tensor& block_ig, const ActionGrid& actions, double moving_avg, double target,
                           double gamma);

struct ReinforceLoss {
  double loss = 0.0;
  Tensor grad_probs;   // dL/dp_b
  Tensor grad_logits;  // dL/dz_b through the sigmoid
};

// L = -sum_b R_b * log pi(a_b); probabilities must lie strictly inside (0, 1).
ReinforceLoss reinforce_loss(const Tensor& probs, const ActionGrid& actions, const Tensor& rewards);

enum class MovingAverageMode { Recursive, TwoTerm };

struct PolicyConfig {
  double target = 0.3;       // tau
  double gamma = 5.0;
  double momentum = 0.9;     // mu
  std::size_t update_period = 4;
  bool online = true;
  MovingAverageMode average_mode = MovingAverageMode::Recursive;
  std::size_t width = 16;
  RmsPropConfig optimizer;

  void validate() const;
};

// Per-frame outcome of the learning step.
struct PolicyStep {
  double cost = 0.0;
  double moving_avg = 0.0;
  double loss = 0.0;
  double reward_mean = 0.0;
  bool updated = false;
};

// Stateful online policy: network weights, optimizer, cost moving average and
// the gradient accumulator of the current update window.
class OnlinePolicy {
 public:
  OnlinePolicy(std::size_t state_channels, PolicyConfig config, std::uint64_t seed);

  PolicyNet::Cache evaluate(const Tensor& state, const BlockGrid& grid) const { return net_.forward(state, grid); }

  // Resets the moving average to tau at a clip start.
  void begin_clip();

  // Cost, moving average, rewards and loss for one policy-evaluated frame;
  // accumulates gradients and applies an optimizer step every update_period.
  PolicyStep learn(const PolicyNet::Cache& cache, const ActionGrid& actions, const Tensor& block_ig);

  // Accumulate an externally computed loss gradient w.r.t. logits.
  bool accumulate(const PolicyNet::Cache& cache, const Tensor& grad_logits);

  PolicyNet& net() { return net_; }
  const PolicyNet& net() const { return net_; }
  const PolicyConfig& config() const { return config_; }
  PolicyConfig& config() { return config_; }
  const OptimState& optimizer() const { return optim_; }
  double moving_average() const { return moving_avg_; }
  std::size_t pending_frames() const { return pending_; }
  std::size_t updates() const { return optim_.steps; }

  void save(const std::filesystem::path& dir) const;
  void load(const std::filesystem::path& dir);

 private:
  PolicyNet net_;
  PolicyConfig config_;
  OptimState optim_;
  double moving_avg_ = 0.0;
  double prev_cost_ = 0.0;
  std::vector<Tensor> grad_sum_;
  std::size_t pending_ = 0;
};

}  // namespace blockprop
