#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "blockprop/block_grid.hpp"
#include "blockprop/ops.hpp"
#include "blockprop/tensor.hpp"

namespace blockprop {

// Multiply-accumulate and data-movement accounting for one frame.
struct MacCounter {
  std::uint64_t task = 0;
  std::uint64_t policy = 0;
  std::uint64_t info_gain = 0;  // elementwise operations
  std::uint64_t bytes_moved = 0;  // gather + scatter + commit copies

  std::uint64_t total_macs() const { return task + policy + info_gain; }
  void reset() { *this = MacCounter{}; }
};

// Conv MACs for dense execution over an output of out_h x out_w pixels.
std::uint64_t dense_conv_macs(const ConvSpec& spec, std::size_t out_h, std::size_t out_w);
// Conv MACs when only `executed` output blocks of edge `block_out` are computed.
std::uint64_t sparse_conv_macs(const ConvSpec& spec, std::size_t block_out, std::size_t executed);

enum class LayerKind { Input, Conv, Op, Add };

struct Layer {
  std::string name;
  LayerKind kind = LayerKind::Input;
  std::vector<std::size_t> inputs;
  ConvSpec conv;
  OpKind op = OpKind::Relu;
  bool relu_after = false;
  // Derived at construction.
  std::size_t channels = 0;
  int level = 0;         // feature extents are frame extents / 2^level
  bool spatial = true;   // false after global pooling
};

// Directed acyclic graph of layers in topological order; layer 0 is the input.
class Network {
 public:
  explicit Network(std::size_t input_channels);

  std::size_t add_conv(std::string name, std::size_t input, ConvSpec spec, bool relu_after = false);
  std::size_t add_op(std::string name, std::size_t input, OpKind op);
  // Residual sum of two layers at the same scale and channel count.
  std::size_t add_add(std::string name, std::size_t a, std::size_t b, bool relu_after = false);

  const std::vector<Layer>& layers() const { return layers_; }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  Layer& layer(std::size_t i) { return layers_.at(i); }
  std::size_t size() const { return layers_.size(); }
  std::size_t find(const std::string& name) const;
  // Deepest downsampling level reached by any layer.
  int max_level() const;

 private:
  std::size_t push(Layer layer);
  std::vector<Layer> layers_;
};

// Full-frame reference execution; returns one activation per layer.
std::vector<Tensor> run_dense(const Network& net, const Tensor& input, MacCounter* macs = nullptr);

enum class HaloFill { Zero, Replicate };

// Stacks the executed blocks of a (1,C,H,W) canvas, each surrounded by `halo`
// pixels read from neighbouring canvas regions. Outside the image the ring is
// zero (Zero) or the nearest edge pixel (Replicate).
Tensor gather_blocks(const Tensor& canvas, const ActionGrid& actions, std::size_t block, std::size_t halo,
                     HaloFill fill = HaloFill::Zero);

// Writes block interiors back; the outer `halo` ring of each stacked block is dropped.
void scatter_blocks(const Tensor& blocks, const ActionGrid& actions, std::size_t block, Tensor& canvas,
                    std::size_t halo = 0);

// Per-layer activation store persisting across frames.
struct FeatureCanvas {
  Tensor data;
  std::size_t block = 0;          // block edge at this layer's scale
  std::vector<long> last_write;   // frame index per grid position, -1 before any write
};

// Runs a network block-sparsely against persistent canvases. Layers execute
// synchronously: every executed block of a layer is scattered before the next
// layer gathers, so halos see current values where neighbours ran and cached
// values elsewhere.
class SparseExecutor {
 public:
  SparseExecutor(std::shared_ptr<const Network> net, BlockGrid grid);

  // Dense execution that (re)initialises every canvas.
  void run_dense_frame(const Tensor& frame, long frame_index = 0);
  // Executes only blocks with a_b = 1. The input canvas takes the frame's
  // content in executed blocks; all other canvas regions are left untouched.
  void run_sparse_frame(const Tensor& frame, const ActionGrid& actions);

  bool initialized() const { return !canvases_.empty(); }
  const std::vector<FeatureCanvas>& canvases() const { return canvases_; }
  const Tensor& canvas(std::size_t layer) const { return canvases_.at(layer).data; }
  const Network& network() const { return *net_; }
  const BlockGrid& grid() const { return grid_; }
  // Accounting for the most recent frame.
  const MacCounter& last_frame_stats() const { return stats_; }
  std::uint64_t dense_conv_macs_per_frame() const { return dense_macs_; }
  // Wall time spent in gather/scatter/commit copies during the most recent frame.
  double last_copy_seconds() const { return copy_seconds_; }

 private:
  void run_layer(std::size_t li, const ActionGrid& actions);

  std::shared_ptr<const Network> net_;
  BlockGrid grid_;
  std::vector<FeatureCanvas> canvases_;
  MacCounter stats_;
  std::uint64_t dense_macs_ = 0;
  double copy_seconds_ = 0.0;
};

}  // namespace blockprop
