#pragma once

#include <string>
#include <vector>

#include "blockprop/pipeline.hpp"

namespace blockprop {

struct BenchRow {
  std::string label;  // "tau=0.30", "full", "random@tau=0.30"
  double tau = 0.0;
  double executed_fraction = 0.0;  // frames >= 1
  double metric = 0.0;
  double metric_stderr = 0.0;  // across clips
  double overlap = 0.0;
  double macs_task = 0.0;  // per frame
  double macs_policy = 0.0;
  std::size_t policy_updates = 0;
};

struct BenchTable {
  BenchRow full;
  std::vector<BenchRow> policy;  // one per tau, sweep order
  std::vector<BenchRow> random;  // seed-matched random subsets with the policy's per-frame counts
  double spearman_fraction_metric = 0.0;
  double spearman_tau_fraction = 0.0;
};

// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

BenchRow bench_row(std::string label, double tau, const std::vector<ClipResult>& runs, std::size_t updates);

// For every tau: fresh policy, warmup on cfg.warmup_clips training clips, online
// evaluation on cfg.clips held-out clips, then the random baseline on the same clips.
BenchTable run_bench(const RunConfig& cfg, const std::vector<double>& taus);

std::string bench_csv(const BenchTable& t);
std::string bench_json(const BenchTable& t, const RunConfig& cfg);

}  // namespace blockprop
