#include "blockprop/sparse_runtime.hpp"

#include <algorithm>
#include <chrono>

namespace blockprop {

std::uint64_t dense_conv_macs(const ConvSpec& spec, std::size_t out_h, std::size_t out_w) {
  return static_cast<std::uint64_t>(spec.macs_per_pixel()) * out_h * out_w;
}

std::uint64_t sparse_conv_macs(const ConvSpec& spec, std::size_t block_out, std::size_t executed) {
  return static_cast<std::uint64_t>(spec.macs_per_pixel()) * block_out * block_out * executed;
}

Network::Network(std::size_t input_channels) {
  Layer in;
  in.name = "input";
  in.kind = LayerKind::Input;
  in.channels = input_channels;
  layers_.push_back(std::move(in));
}

std::size_t Network::push(Layer layer) {
  for (const auto& l : layers_)
    if (l.name == layer.name) throw Error("network: duplicate layer name '" + layer.name + "'");
  for (auto i : layer.inputs)
    if (i >= layers_.size()) throw Error("network: layer '" + layer.name + "' references unknown input");
  layers_.push_back(std::move(layer));
  return layers_.size() - 1;
}

std::size_t Network::add_conv(std::string name, std::size_t input, ConvSpec spec, bool relu_after) {
  spec.validate();
  const Layer& src = layers_.at(input);
  if (spec.in_channels != src.channels) {
    throw Error("network: conv '" + name + "' expects " + std::to_string(spec.in_channels) + " channels, input '" +
                src.name + "' has " + std::to_string(src.channels));
  }
  Layer l;
  l.name = std::move(name);
  l.kind = LayerKind::Conv;
  l.inputs = {input};
  l.channels = spec.out_channels;
  l.spatial = src.spatial;
  l.level = src.level + (spec.stride == 2 ? 1 : 0);
  l.conv = std::move(spec);
  l.relu_after = relu_after;
  return push(std::move(l));
}

std::size_t Network::add_op(std::string name, std::size_t input, OpKind op) {
  const Layer& src = layers_.at(input);
  Layer l;
  l.name = std::move(name);
  l.kind = LayerKind::Op;
  l.inputs = {input};
  l.op = op;
  l.channels = src.channels;
  l.spatial = src.spatial;
  l.level = src.level;
  switch (op) {
    case OpKind::MaxPool2:
    case OpKind::AvgPool2: l.level += 1; break;
    case OpKind::UpsampleNearest2:
    case OpKind::UpsampleBilinear2: l.level -= 1; break;
    case OpKind::GlobalAvgPool: l.spatial = false; break;
    default: break;
  }
  return push(std::move(l));
}

std::size_t Network::add_add(std::string name, std::size_t a, std::size_t b, bool relu_after) {
  const Layer& la = layers_.at(a);
  const Layer& lb = layers_.at(b);
  if (la.channels != lb.channels || la.level != lb.level || la.spatial != lb.spatial) {
    throw Error("network: add '" + name + "' joins incompatible layers '" + la.name + "' and '" + lb.name + "'");
  }
  Layer l;
  l.name = std::move(name);
  l.kind = LayerKind::Add;
  l.inputs = {a, b};
  l.channels = la.channels;
  l.level = la.level;
  l.spatial = la.spatial;
  l.relu_after = relu_after;
  return push(std::move(l));
}

std::size_t Network::find(const std::string& name) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].name == name) return i;
  throw Error("network: no layer named '" + name + "'");
}

int Network::max_level() const {
  int m = 0;
  for (const auto& l : layers_) m = std::max(m, l.level);
  return m;
}

namespace {

Tensor eval_layer(const Layer& l, const std::vector<const Tensor*>& in) {
  Tensor out;
  switch (l.kind) {
    case LayerKind::Conv: out = conv2d(*in[0], l.conv); break;
    case LayerKind::Op: out = apply_op(l.op, *in[0]); break;
    case LayerKind::Add: out = add(*in[0], *in[1]); break;
    case LayerKind::Input: throw Error("network: input layer cannot be evaluated");
  }
  if (l.relu_after) out = relu(out);
  return out;
}

}  // namespace

std::vector<Tensor> run_dense(const Network& net, const Tensor& input, MacCounter* macs) {
  require_rank4(input, "run_dense");
  if (input.c() != net.layer(0).channels) {
    throw Error("run_dense: input has " + std::to_string(input.c()) + " channels, network expects " +
                std::to_string(net.layer(0).channels));
  }
  std::vector<Tensor> acts(net.size());
  acts[0] = input;
  for (std::size_t i = 1; i < net.size(); ++i) {
    const Layer& l = net.layer(i);
    std::vector<const Tensor*> in;
    for (auto j : l.inputs) in.push_back(&acts[j]);
    acts[i] = eval_layer(l, in);
    if (macs && l.kind == LayerKind::Conv) macs->task += dense_conv_macs(l.conv, acts[i].h(), acts[i].w());
  }
  return acts;
}

Tensor gather_blocks(const Tensor& canvas, const ActionGrid& actions, std::size_t block, std::size_t halo,
                     HaloFill fill) {
  require_rank4(canvas, "gather_blocks");
  if (canvas.n() != 1) throw Error("gather_blocks: canvas batch must be 1");
  if (halo > block) {
    throw Error("gather_blocks: halo " + std::to_string(halo) + " larger than block size " + std::to_string(block));
  }
  if (canvas.h() != actions.rows * block || canvas.w() != actions.cols * block) {
    throw Error("gather_blocks: canvas " + shape_str(canvas.shape()) + " inconsistent with " +
                std::to_string(actions.rows) + "x" + std::to_string(actions.cols) + " grid of " +
                std::to_string(block) + " px blocks");
  }
  const auto idx = actions.executed_indices();
  const std::size_t C = canvas.c(), E = block + 2 * halo;
  const long H = static_cast<long>(canvas.h()), W = static_cast<long>(canvas.w());
  Tensor out = Tensor::nchw(idx.size(), C, E, E);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const long y0 = static_cast<long>((idx[k] / actions.cols) * block) - static_cast<long>(halo);
    const long x0 = static_cast<long>((idx[k] % actions.cols) * block) - static_cast<long>(halo);
    for (std::size_t c = 0; c < C; ++c) {
      const float* src = canvas.plane(0, c);
      float* dst = out.plane(k, c);
      for (std::size_t yy = 0; yy < E; ++yy) {
        long sy = y0 + static_cast<long>(yy);
        const bool row_out = sy < 0 || sy >= H;
        if (fill == HaloFill::Replicate) sy = std::clamp(sy, 0L, H - 1);
        for (std::size_t xx = 0; xx < E; ++xx) {
          long sx = x0 + static_cast<long>(xx);
          const bool col_out = sx < 0 || sx >= W;
          if (fill == HaloFill::Replicate) {
            sx = std::clamp(sx, 0L, W - 1);
            dst[yy * E + xx] = src[sy * W + sx];
          } else {
            dst[yy * E + xx] = (row_out || col_out) ? 0.0f : src[sy * W + sx];
          }
        }
      }
    }
  }
  return out;
}

void scatter_blocks(const Tensor& blocks, const ActionGrid& actions, std::size_t block, Tensor& canvas,
                    std::size_t halo) {
  require_rank4(blocks, "scatter_blocks");
  require_rank4(canvas, "scatter_blocks");
  const auto idx = actions.executed_indices();
  if (blocks.n() != idx.size()) {
    throw Error("scatter_blocks: " + std::to_string(blocks.n()) + " blocks for " + std::to_string(idx.size()) +
                " executed positions");
  }
  if (idx.empty()) return;
  const std::size_t E = block + 2 * halo;
  if (blocks.h() != E || blocks.w() != E || blocks.c() != canvas.c()) {
    throw Error("scatter_blocks: block tensor " + shape_str(blocks.shape()) + " inconsistent with canvas " +
                shape_str(canvas.shape()));
  }
  if (canvas.h() != actions.rows * block || canvas.w() != actions.cols * block) {
    throw Error("scatter_blocks: canvas extents inconsistent with grid");
  }
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const std::size_t y0 = (idx[k] / actions.cols) * block, x0 = (idx[k] % actions.cols) * block;
    for (std::size_t c = 0; c < canvas.c(); ++c)
      for (std::size_t yy = 0; yy < block; ++yy)
        std::copy_n(&blocks.at(k, c, yy + halo, halo), block, &canvas.at(0, c, y0 + yy, x0));
  }
}

SparseExecutor::SparseExecutor(std::shared_ptr<const Network> net, BlockGrid grid)
    : net_(std::move(net)), grid_(grid) {
  if (!net_) throw Error("sparse executor: null network");
  BlockGrid::make(grid_.height, grid_.width, grid_.block_size, static_cast<std::size_t>(std::max(0, net_->max_level())));
  for (std::size_t i = 1; i < net_->size(); ++i) {
    const Layer& l = net_->layer(i);
    const Layer& src = net_->layer(l.inputs[0]);
    if (!src.spatial) {
      throw Error("unsupported operator in sparse path: layer '" + l.name + "' consumes non-spatial input '" +
                  src.name + "'");
    }
    if (l.kind == LayerKind::Conv) {
      const ConvSpec& s = l.conv;
      if (s.dilation != 1) throw Error("unsupported operator in sparse path: dilated conv '" + l.name + "'");
      if (s.kernel_h != s.kernel_w || s.kernel_h != 2 * s.pad + 1) {
        throw Error("unsupported operator in sparse path: conv '" + l.name +
                    "' must be square with same-padding (kernel = 2*pad+1)");
      }
      if (s.stride != 1 && s.stride != 2) {
        throw Error("unsupported operator in sparse path: conv '" + l.name + "' with stride " +
                    std::to_string(s.stride));
      }
    }
    if (l.spatial && grid_.block_at_level(l.level) == 0) {
      throw Error("sparse executor: block size vanishes at layer '" + l.name + "'");
    }
  }
}

void SparseExecutor::run_dense_frame(const Tensor& frame, long frame_index) {
  if (frame.h() != grid_.height || frame.w() != grid_.width) {
    throw Error("sparse executor: frame " + shape_str(frame.shape()) + " does not match grid");
  }
  stats_.reset();
  copy_seconds_ = 0.0;
  auto acts = run_dense(*net_, frame, &stats_);
  dense_macs_ = stats_.task;
  canvases_.clear();
  canvases_.reserve(acts.size());
  for (std::size_t i = 0; i < acts.size(); ++i) {
    const Layer& l = net_->layer(i);
    FeatureCanvas fc;
    fc.data = std::move(acts[i]);
    fc.block = l.spatial ? grid_.block_at_level(l.level) : 0;
    fc.last_write.assign(grid_.count(), frame_index);
    canvases_.push_back(std::move(fc));
  }
}

void SparseExecutor::run_sparse_frame(const Tensor& frame, const ActionGrid& actions) {
  if (!initialized()) throw Error("sparse executor: first frame must be executed densely");
  actions.validate(grid_);
  if (frame.shape() != canvases_[0].data.shape()) {
    throw Error("sparse executor: frame " + shape_str(frame.shape()) + " does not match input canvas " +
                shape_str(canvases_[0].data.shape()));
  }
  stats_.reset();
  copy_seconds_ = 0.0;
  const auto idx = actions.executed_indices();
  const auto t0 = std::chrono::steady_clock::now();
  commit_blocks(frame, actions, grid_, canvases_[0].data);
  copy_seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  stats_.bytes_moved += idx.size() * frame.c() * grid_.block_size * grid_.block_size * sizeof(float);
  for (std::size_t b : idx) canvases_[0].last_write[b] = actions.frame;
  for (std::size_t i = 1; i < net_->size(); ++i) run_layer(i, actions);
}

void SparseExecutor::run_layer(std::size_t li, const ActionGrid& actions) {
  const Layer& l = net_->layer(li);
  FeatureCanvas& out = canvases_[li];
  const auto idx = actions.executed_indices();
  if (idx.empty()) return;

  if (!l.spatial) {
    // Global reductions have no block locality; evaluate on the full canvas.
    std::vector<const Tensor*> in;
    for (auto j : l.inputs) in.push_back(&canvases_[j].data);
    out.data = eval_layer(l, in);
    for (std::size_t b = 0; b < grid_.count(); ++b) out.last_write[b] = actions.frame;
    return;
  }

  auto timed_gather = [this](auto&&... args) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor g = gather_blocks(args...);
    copy_seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return g;
  };
  const FeatureCanvas& src = canvases_[l.inputs[0]];
  const std::size_t in_block = src.block;
  Tensor result;
  std::size_t crop = 0;
  std::uint64_t gathered = 0;

  switch (l.kind) {
    case LayerKind::Conv: {
      ConvSpec block_spec = l.conv;
      block_spec.pad = 0;
      Tensor blocks = timed_gather(src.data, actions, in_block, l.conv.pad);
      gathered += blocks.numel();
      result = conv2d(blocks, block_spec);
      stats_.task += sparse_conv_macs(l.conv, out.block, idx.size());
      break;
    }
    case LayerKind::Op: {
      if (l.op == OpKind::UpsampleBilinear2) {
        Tensor blocks = timed_gather(src.data, actions, in_block, 1, HaloFill::Replicate);
        gathered += blocks.numel();
        result = resize_bilinear(blocks, blocks.h() * 2, blocks.w() * 2);
        crop = 2;
      } else {
        Tensor blocks = timed_gather(src.data, actions, in_block, 0);
        gathered += blocks.numel();
        result = apply_op(l.op, blocks);
      }
      break;
    }
    case LayerKind::Add: {
      Tensor a = timed_gather(src.data, actions, in_block, 0);
      Tensor b = timed_gather(canvases_[l.inputs[1]].data, actions, canvases_[l.inputs[1]].block, 0);
      gathered += a.numel() + b.numel();
      result = add(a, b);
      break;
    }
    case LayerKind::Input: throw Error("sparse executor: unexpected input layer");
  }
  if (l.relu_after) result = relu(result);
  const auto t0 = std::chrono::steady_clock::now();
  scatter_blocks(result, actions, out.block, out.data, crop);
  copy_seconds_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  stats_.bytes_moved += (gathered + idx.size() * out.data.c() * out.block * out.block) * sizeof(float);
  for (std::size_t b : idx) out.last_write[b] = actions.frame;
}

}  // namespace blockprop
