#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "blockprop/block_grid.hpp"
#include "blockprop/info_gain.hpp"
#include "blockprop/serialize.hpp"
#include "blockprop/sparse_runtime.hpp"
#include "blockprop/synth.hpp"
#include "blockprop/tensor.hpp"

namespace blockprop {

enum class TaskKind { ToyDetector, OracleDetector, OracleSegmenter };

// "toy-det", "oracle-det", "oracle-seg".
std::string task_name(TaskKind kind);
TaskKind task_from_name(const std::string& name);

// Either a detection set or a (1,C,H,W) per-pixel class distribution.
struct TaskOutput {
  DetectionSet detections;
  Tensor probs;

  bool is_segmentation() const { return !probs.empty(); }
  bool operator==(const TaskOutput&) const = default;
};

// Greedy non-maximum suppression; keeps the highest-scoring box of every
// group overlapping above `threshold`. Output is ordered by score.
DetectionSet nms(DetectionSet dets, float threshold = 0.5f);

// Frozen task network behind the sparse runtime: 3x3 convs 3->8 (s1), 8->16
// (s2), 16->16 (s2), 16->16 (s1) with a residual add, then 1x1 heads for a
// centre heatmap (1 channel) and log box size (2 channels) at stride 4.
class ToyDetector {
 public:
  static constexpr std::size_t kStride = 4;

  explicit ToyDetector(std::uint64_t seed = 7);

  const Network& network() const { return *net_; }
  std::shared_ptr<const Network> shared_network() const { return net_; }
  std::size_t heatmap_layer() const { return heat_; }
  std::size_t size_layer() const { return size_; }

  // Local maxima of sigmoid(heatmap) in a 3x3 window with score > threshold,
  // boxes from the size head, then NMS at IoU 0.5.
  DetectionSet decode(const Tensor& heat_logits, const Tensor& size_logits, std::size_t height,
                      std::size_t width) const;

  NamedTensors to_tensors() const;
  void from_tensors(const NamedTensors& tensors);
  void save(const std::filesystem::path& dir) const { save_tensor_set(dir, to_tensors()); }
  void load(const std::filesystem::path& dir) { from_tensors(load_tensor_set(dir)); }

  // Logistic/regression fit of the two 1x1 heads on dense trunk features of
  // generator clips; the trunk stays at its seeded weights. Returns the final
  // mean heatmap loss.
  double fit_heads(const std::vector<Clip>& clips, std::size_t epochs, float learning_rate = 0.05f);

  float threshold = 0.5f;

 private:
  std::shared_ptr<Network> net_;
  std::size_t heat_ = 0, size_ = 0;
};

// Connected components (4-connected) of palette-coloured pixels per class on
// the composite frame state; one box per component with score = fill ratio
// clipped to [0.5, 1]. Components smaller than min_area pixels are dropped.
DetectionSet oracle_detect(const Tensor& frame_state, std::size_t min_area = 4);

// Per pixel: 0.9 on the colour-matched class (0 = background), the remaining
// 0.1 spread over the other classes.
Tensor oracle_segment(const Tensor& frame_state, std::size_t classes = kObjectClasses + 1);

// Task output rendered as the K channels of the policy state: per-class
// score-filled boxes (max over overlaps) for detection, the class
// distribution itself for segmentation.
Tensor render_output(const TaskOutput& out, std::size_t channels, std::size_t height, std::size_t width,
                     int first_class = 0);

// One backend instance per clip; it owns whatever per-clip state the backend
// needs (the feature canvases of the toy detector).
class TaskBackend {
 public:
  TaskBackend(TaskKind kind, BlockGrid grid, std::shared_ptr<const ToyDetector> detector = nullptr);

  TaskKind kind() const { return kind_; }
  const BlockGrid& grid() const { return grid_; }
  // K in the policy state.
  static std::size_t channels_for(TaskKind kind);
  std::size_t output_channels() const { return channels_for(kind_); }
  // Class id mapped to channel 0 of the rendered output.
  int first_class() const { return kind_ == TaskKind::OracleDetector ? 1 : 0; }

  // Frame 0 of a clip: everything is computed from scratch.
  TaskOutput run_dense(const Tensor& frame_state, long frame_index);
  // Later frames: only executed blocks are recomputed (toy detector), or the
  // backend is re-read on the composite state (oracles, which are pure).
  TaskOutput run_sparse(const Tensor& frame_state, const ActionGrid& actions);

  Tensor render(const TaskOutput& out) const;
  IouMode iou_mode() const { return IouMode::Box; }

  const MacCounter& last_frame_stats() const { return stats_; }
  // Task cost of one dense frame in the same unit as last_frame_stats().task.
  std::uint64_t dense_task_macs() const;
  const SparseExecutor* executor() const { return executor_.get(); }

 private:
  TaskOutput from_canvases() const;

  TaskKind kind_;
  BlockGrid grid_;
  std::shared_ptr<const ToyDetector> detector_;
  std::unique_ptr<SparseExecutor> executor_;
  MacCounter stats_;
};

struct DetectionMetrics {
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 1.0, recall = 1.0, f1 = 1.0;
};

// Greedy matching in descending score order, IoU >= iou_threshold, only
// predictions with score >= score_threshold count. Empty prediction and
// ground-truth sets give precision = recall = F1 = 1.
DetectionMetrics evaluate_detections(const DetectionSet& pred, const std::vector<GtObject>& gt,
                                     float iou_threshold = 0.5f, float score_threshold = 0.5f,
                                     bool class_aware = false);

// Mean IoU over classes present in prediction (argmax) or ground truth.
double mean_iou(const Tensor& probs, const Tensor& labels, std::size_t classes);

struct ClipMetrics {
  std::vector<double> per_frame;  // F1 or mIoU
  double mean = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
};

ClipMetrics evaluate_clip(const std::vector<TaskOutput>& outputs, const GroundTruth& gt, std::size_t height,
                          std::size_t width, bool class_aware = false);

}  // namespace blockprop
