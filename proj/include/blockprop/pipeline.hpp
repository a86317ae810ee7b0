#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <vector>

#include "blockprop/config.hpp"
#include "blockprop/policy.hpp"
#include "blockprop/synth.hpp"
#include "blockprop/tasks.hpp"

namespace blockprop {

// Replaces the policy's decisions for a whole clip. The policy is then neither
// evaluated nor updated.
struct ActionOverride {
  enum class Kind { None, Fraction, Counts };
  Kind kind = Kind::None;
  double fraction = 1.0;              // Fraction: round(fraction * B) blocks per frame
  std::vector<std::size_t> counts;    // Counts: executed blocks per frame index (frame 0 ignored)
  std::uint64_t seed = 0;             // which blocks are picked

  static ActionOverride full() { return {Kind::Fraction, 1.0, {}, 0}; }
  static ActionOverride with_fraction(double f, std::uint64_t seed) { return {Kind::Fraction, f, {}, seed}; }
  static ActionOverride with_counts(std::vector<std::size_t> c, std::uint64_t seed) {
    return {Kind::Counts, 1.0, std::move(c), seed};
  }
};

// A uniformly random n-block subset keyed by (seed, clip, frame).
ActionGrid random_subset(const BlockGrid& grid, std::size_t n, std::uint64_t seed, long clip, long frame);

struct FrameRecord {
  long clip = 0;
  long frame = 0;
  double executed_fraction = 1.0;
  std::size_t executed_blocks = 0;
  std::uint64_t macs_task = 0;
  std::uint64_t macs_policy = 0;
  std::uint64_t macs_ig = 0;
  std::uint64_t bytes_moved = 0;
  double metric = 0.0;  // F1 (detection) or mIoU (segmentation) against ground truth
  std::optional<double> overlap;  // share of moving-object blocks that were executed
  std::optional<double> loss;
  std::optional<double> reward_mean;
  std::optional<double> moving_avg;
  bool updated = false;
  double ig_max = 0.0;
  double time_policy = 0.0;
  double time_gather_scatter = 0.0;
  double time_task = 0.0;
  double time_ig = 0.0;
  double time_update = 0.0;
};

struct ClipResult {
  std::vector<FrameRecord> records;
  std::vector<TaskOutput> outputs;
  std::vector<ActionGrid> actions;
};

// Everything a visualiser may look at after a frame; never modified by it.
struct FrameView {
  long clip;
  long frame;
  const Tensor& input;
  const Tensor& frame_state;
  const ActionGrid& actions;
  const Tensor& ig_map;  // (1,1,H,W), zero on frame 0
  const TaskOutput& output;
  const std::vector<GtObject>& gt;
};
using FrameObserver = std::function<void(const FrameView&)>;

// Blocks overlapping objects whose box changed since the previous frame
// (including objects that just appeared).
std::vector<std::uint8_t> moving_object_blocks(const GroundTruth& gt, long frame, const BlockGrid& grid);

class Pipeline;

// Per-clip frame loop state.
class ClipRun {
 public:
  ClipRun(Pipeline& pipeline, long clip_index);

  // Frame 0 runs densely without the policy; later frames follow the
  // policy (or the override) sparsely and feed the learning step.
  FrameRecord process_frame(long t, const Tensor& frame, const std::vector<GtObject>& gt,
                            const GroundTruth* full_gt = nullptr, const ActionOverride* override = nullptr);

  const TaskOutput& last_output() const { return prev_output_; }
  const Tensor& frame_state() const { return state_; }
  const ActionGrid& last_actions() const { return prev_actions_; }
  const Tensor& last_ig() const { return ig_map_; }
  const TaskBackend& task() const { return task_; }

 private:
  ActionGrid override_actions(const ActionOverride& ov, long t) const;

  Pipeline& pipe_;
  long clip_;
  TaskBackend task_;
  Tensor state_;         // H_t
  TaskOutput prev_output_;
  Tensor prev_rendered_;  // O_{t-1} as policy input channels
  ActionGrid prev_actions_;
  Tensor ig_map_;
  long next_frame_ = 0;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg);

  const RunConfig& config() const { return cfg_; }
  const BlockGrid& grid() const { return grid_; }
  OnlinePolicy& policy() { return *policy_; }
  const OnlinePolicy& policy() const { return *policy_; }
  std::shared_ptr<const ToyDetector> detector() const { return detector_; }
  std::size_t state_channels() const;

  ClipResult run_clip(const Clip& clip, long clip_index, const ActionOverride& override = {},
                      const FrameObserver& observer = nullptr);

  // Online passes over training clips; task metrics are ignored.
  void warmup(const std::vector<Clip>& clips);

  // Freeze or resume policy updates (offline ablation).
  void set_online(bool online) { policy_->config().online = online; }

 private:
  friend class ClipRun;
  RunConfig cfg_;
  BlockGrid grid_;
  std::shared_ptr<ToyDetector> detector_;
  std::unique_ptr<OnlinePolicy> policy_;
};

// Deterministic clip sets: stream 0 for warmup, 1 for evaluation.
std::vector<Clip> make_clips(const RunConfig& cfg, std::size_t count, std::uint64_t stream);

struct RunSummary {
  std::size_t clips = 0;
  std::size_t frames = 0;
  double mean_executed_fraction = 0.0;
  double mean_sparse_executed_fraction = 0.0;  // frames >= 1
  double mean_metric = 0.0;                    // mean of per-clip frame-averaged metrics
  double mean_overlap = 0.0;                   // over frames with moving objects
  std::size_t overlap_frames = 0;
  double mean_macs_task = 0.0;
  double mean_macs_policy = 0.0;
  double mean_macs_ig = 0.0;
  double dense_macs_task = 0.0;
  std::size_t policy_updates = 0;
  double time_policy = 0.0, time_gather_scatter = 0.0, time_task = 0.0, time_ig = 0.0, time_update = 0.0;
};

RunSummary summarize(const std::vector<ClipResult>& clips, std::uint64_t dense_macs_task,
                     std::size_t policy_updates);

// Evaluates `clips` in order with one backend per clip; the policy keeps learning when online.
std::vector<ClipResult> evaluate_clips(Pipeline& pipeline, const std::vector<Clip>& clips,
                                       const ActionOverride& override = {}, const FrameObserver& observer = nullptr);

// Executed-block counts per frame of a finished run, for seed-matched random baselines.
std::vector<std::size_t> executed_counts(const ClipResult& run);

// Per-frame JSONL records ("schema": 1); time_* keys only when with_timing.
void write_records_jsonl(std::ostream& os, const std::vector<ClipResult>& clips, bool with_timing);
std::string summary_json(const RunSummary& s, const RunConfig& cfg, bool with_timing);

}  // namespace blockprop
