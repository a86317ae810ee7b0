#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blockprop/bench.hpp"

namespace blockprop::checks {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

// Toy detector dense vs all-blocks sparse, canvases and scores within 1e-5.
CheckResult full_execution_equivalence(std::size_t seeds = 20);
// Zero executed blocks reproduce the previous canvases and output bit for bit.
CheckResult copy_purity(std::size_t clips = 3);
// Task conv MACs equal c * dense for forced fractions 0, 1/4, 1/2, 3/4, 1.
CheckResult mac_linearity();
// REINFORCE logit gradient vs central differences, relative error < 1e-3.
CheckResult reinforce_gradient(std::size_t instances = 10);
// Detection IG vs the brute-force reference plus the worked examples.
CheckResult ig_reference(std::size_t pairs = 1000);
// Zero on identical maps, ln 2 closed form, non-negative on random pairs.
CheckResult kl_properties(std::size_t pairs = 1000);
// IG = 0 closed loop from both saturated head biases: the moving average is
// inside tau +- 0.1 from some frame <= 300 through frame 600.
CheckResult cost_tracking(double tau, std::uint64_t seed = 17);

// The invariant suites (everything above, tau in {0.3, 0.5, 0.7}).
std::vector<CheckResult> invariant_suite();

struct SteeringResult {
  double overlap = 0.0, random_overlap = 0.0, ratio = 0.0, executed_fraction = 0.0;
};
// Warmup, held-out evaluation and a seed-matched random baseline at cfg's tau.
SteeringResult importance_steering(const RunConfig& cfg, bool online_evaluation = true);

}  // namespace blockprop::checks
