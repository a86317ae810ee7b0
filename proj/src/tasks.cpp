#include "blockprop/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "blockprop/rng.hpp"

namespace blockprop {

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::ToyDetector: return "toy-det";
    case TaskKind::OracleDetector: return "oracle-det";
    case TaskKind::OracleSegmenter: return "oracle-seg";
  }
  return "?";
}

TaskKind task_from_name(const std::string& name) {
  if (name == "toy-det") return TaskKind::ToyDetector;
  if (name == "oracle-det") return TaskKind::OracleDetector;
  if (name == "oracle-seg") return TaskKind::OracleSegmenter;
  throw Error("unknown task '" + name + "' (expected toy-det, oracle-det or oracle-seg)");
}

DetectionSet nms(DetectionSet dets, float threshold) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  DetectionSet kept;
  for (auto& d : dets) {
    bool keep = true;
    for (const auto& k : kept) {
      if (box_iou(d.box, k.box) > threshold) {
        keep = false;
        break;
      }
    }
    if (keep) kept.push_back(std::move(d));
  }
  return kept;
}

// ---------------------------------------------------------------------------

ToyDetector::ToyDetector(std::uint64_t seed) : net_(std::make_shared<Network>(3)) {
  Rng rng(seed);
  auto conv = [&](std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, double std_dev) {
    ConvSpec s = ConvSpec::make(cin, cout, k, stride, k / 2);
    for (auto& v : s.weights.storage()) v = static_cast<float>(rng.normal() * std_dev);
    return s;
  };
  auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  const std::size_t s1 = net_->add_conv("stage1", 0, conv(3, 8, 3, 1, he(27)), true);
  const std::size_t s2 = net_->add_conv("stage2", s1, conv(8, 16, 3, 2, he(72)), true);
  const std::size_t s3 = net_->add_conv("stage3", s2, conv(16, 16, 3, 2, he(144)), true);
  const std::size_t s4 = net_->add_conv("stage4", s3, conv(16, 16, 3, 1, he(144)));
  const std::size_t res = net_->add_add("residual", s4, s3, true);
  heat_ = net_->add_conv("heatmap", res, conv(16, 1, 1, 1, 0.1));
  size_ = net_->add_conv("size", res, conv(16, 2, 1, 1, 0.1));
}

DetectionSet ToyDetector::decode(const Tensor& heat_logits, const Tensor& size_logits, std::size_t height,
                                 std::size_t width) const {
  const std::size_t h = heat_logits.h(), w = heat_logits.w();
  if (size_logits.c() != 2 || size_logits.h() != h || size_logits.w() != w) {
    throw Error("toy detector: size head " + shape_str(size_logits.shape()) + " does not match heatmap " +
                shape_str(heat_logits.shape()));
  }
  const Tensor p = sigmoid(heat_logits);
  DetectionSet dets;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const float s = p.at(0, 0, y, x);
      if (!(s > threshold)) continue;
      bool peak = true;
      for (int dy = -1; dy <= 1 && peak; ++dy)
        for (int dx = -1; dx <= 1 && peak; ++dx) {
          const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          if ((dy == 0 && dx == 0) || yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) {
            continue;
          }
          const float n = p.at(0, 0, yy, xx);
          // Plateaus keep their first cell in raster order.
          const bool earlier = dy < 0 || (dy == 0 && dx < 0);
          if (n > s || (earlier && n == s)) peak = false;
        }
      if (!peak) continue;
      const float cx = (static_cast<float>(x) + 0.5f) * kStride, cy = (static_cast<float>(y) + 0.5f) * kStride;
      const float bw = kStride * std::exp(std::clamp(size_logits.at(0, 0, y, x), -4.0f, 4.0f));
      const float bh = kStride * std::exp(std::clamp(size_logits.at(0, 1, y, x), -4.0f, 4.0f));
      Detection d;
      d.box = {std::max(0.0f, cx - bw / 2), std::max(0.0f, cy - bh / 2),
               std::min(static_cast<float>(width), cx + bw / 2), std::min(static_cast<float>(height), cy + bh / 2)};
      d.score = s;
      dets.push_back(d);
    }
  return nms(std::move(dets), 0.5f);
}

NamedTensors ToyDetector::to_tensors() const {
  NamedTensors out;
  for (const auto& l : net_->layers()) {
    if (l.kind != LayerKind::Conv) continue;
    out.emplace_back(l.name + ".weight", l.conv.weights);
    out.emplace_back(l.name + ".bias", l.conv.bias);
  }
  return out;
}

void ToyDetector::from_tensors(const NamedTensors& tensors) {
  std::size_t i = 0;
  for (std::size_t li = 0; li < net_->size(); ++li) {
    Layer& l = net_->layer(li);
    if (l.kind != LayerKind::Conv) continue;
    for (Tensor* t : {&l.conv.weights, &l.conv.bias}) {
      const std::string want = l.name + (t == &l.conv.weights ? ".weight" : ".bias");
      if (i >= tensors.size() || tensors[i].first != want || tensors[i].second.shape() != t->shape()) {
        throw Error("toy detector: weight manifest does not match the network at '" + want + "' " +
                    shape_str(t->shape()));
      }
      ++i;
    }
  }
  if (i != tensors.size()) throw Error("toy detector: weight manifest has extra entries");
  i = 0;
  for (std::size_t li = 0; li < net_->size(); ++li) {
    Layer& l = net_->layer(li);
    if (l.kind != LayerKind::Conv) continue;
    l.conv.weights = tensors[i++].second;
    l.conv.bias = tensors[i++].second;
  }
}

double ToyDetector::fit_heads(const std::vector<Clip>& clips, std::size_t epochs, float learning_rate) {
  // Trunk features and targets for every frame, computed once.
  struct Sample {
    Tensor feat;    // (1,16,h,w)
    Tensor target;  // (1,1,h,w) centre indicator
    Tensor logsize;  // (1,2,h,w) log(size / stride) at centres
  };
  const std::size_t res = net_->layer(heat_).inputs[0];
  std::vector<Sample> samples;
  double pos = 0.0, total = 0.0;
  for (const Clip& clip : clips)
    for (std::size_t t = 0; t < clip.frames.size(); ++t) {
      const auto acts = run_dense(*net_, clip.frames[t]);
      Sample s{acts[res], Tensor::nchw(1, 1, acts[res].h(), acts[res].w()),
               Tensor::nchw(1, 2, acts[res].h(), acts[res].w())};
      for (const auto& g : clip.gt[t]) {
        const auto cx = static_cast<std::size_t>((g.box.x1 + g.box.x2) / 2 / kStride);
        const auto cy = static_cast<std::size_t>((g.box.y1 + g.box.y2) / 2 / kStride);
        if (cx >= s.target.w() || cy >= s.target.h()) continue;
        s.target.at(0, 0, cy, cx) = 1.0f;
        s.logsize.at(0, 0, cy, cx) = std::log((g.box.x2 - g.box.x1) / kStride);
        s.logsize.at(0, 1, cy, cx) = std::log((g.box.y2 - g.box.y1) / kStride);
      }
      for (float v : s.target.values()) pos += v;
      total += static_cast<double>(s.target.numel());
      samples.push_back(std::move(s));
    }
  if (samples.empty()) throw Error("toy detector fit: no frames");
  // Positives are rare; weight them up to balance the two classes.
  const double pos_weight = pos > 0 ? (total - pos) / pos : 1.0;

  ConvSpec& hs = net_->layer(heat_).conv;
  ConvSpec& ss = net_->layer(size_).conv;
  const std::size_t C = hs.in_channels;
  double last_loss = 0.0;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<double> gh(C + 1, 0.0), gs(2 * (C + 1), 0.0);
    double loss = 0.0, npos = 0.0;
    for (const Sample& s : samples) {
      const std::size_t hw = s.target.h() * s.target.w();
      for (std::size_t i = 0; i < hw; ++i) {
        double z = hs.bias[0];
        for (std::size_t c = 0; c < C; ++c) z += hs.weights[c] * s.feat[c * hw + i];
        const double y = s.target[i];
        const double p = 1.0 / (1.0 + std::exp(-z));
        const double wgt = y > 0 ? pos_weight : 1.0;
        loss -= wgt * (y > 0 ? std::log(std::max(p, 1e-12)) : std::log(std::max(1.0 - p, 1e-12)));
        const double dz = wgt * (p - y);
        for (std::size_t c = 0; c < C; ++c) gh[c] += dz * s.feat[c * hw + i];
        gh[C] += dz;
        if (y <= 0) continue;
        npos += 1.0;
        for (std::size_t k = 0; k < 2; ++k) {
          double r = ss.bias[k];
          for (std::size_t c = 0; c < C; ++c) r += ss.weights[k * C + c] * s.feat[c * hw + i];
          const double d = r - s.logsize[k * hw + i];
          for (std::size_t c = 0; c < C; ++c) gs[k * (C + 1) + c] += d * s.feat[c * hw + i];
          gs[k * (C + 1) + C] += d;
        }
      }
    }
    const double n = total;
    for (std::size_t c = 0; c < C; ++c) hs.weights[c] -= static_cast<float>(learning_rate * gh[c] / n);
    hs.bias[0] -= static_cast<float>(learning_rate * gh[C] / n);
    if (npos > 0) {
      for (std::size_t k = 0; k < 2; ++k) {
        for (std::size_t c = 0; c < C; ++c) {
          ss.weights[k * C + c] -= static_cast<float>(learning_rate * gs[k * (C + 1) + c] / npos);
        }
        ss.bias[k] -= static_cast<float>(learning_rate * gs[k * (C + 1) + C] / npos);
      }
    }
    last_loss = loss / n;
  }
  return last_loss;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<int> class_map(const Tensor& state) {
  require_rank4(state, "oracle");
  if (state.n() != 1 || state.c() != 3) throw Error("oracle: frame state must be (1,3,H,W)");
  const std::size_t H = state.h(), W = state.w();
  std::vector<int> cls(H * W);
  const float* r = state.plane(0, 0);
  const float* g = state.plane(0, 1);
  const float* b = state.plane(0, 2);
  for (std::size_t i = 0; i < H * W; ++i) cls[i] = match_color(r[i], g[i], b[i]);
  return cls;
}

}  // namespace

DetectionSet oracle_detect(const Tensor& frame_state, std::size_t min_area) {
  const std::vector<int> cls = class_map(frame_state);
  const std::size_t H = frame_state.h(), W = frame_state.w();
  std::vector<std::uint8_t> seen(H * W, 0);
  std::vector<std::size_t> stack;
  DetectionSet out;
  for (std::size_t start = 0; start < H * W; ++start) {
    if (cls[start] == 0 || seen[start]) continue;
    const int c = cls[start];
    std::size_t count = 0, x0 = W, y0 = H, x1 = 0, y1 = 0;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t y = i / W, x = i % W;
      ++count;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x + 1);
      y1 = std::max(y1, y + 1);
      auto visit = [&](std::size_t j) {
        if (!seen[j] && cls[j] == c) {
          seen[j] = 1;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < W) visit(i + 1);
      if (y > 0) visit(i - W);
      if (y + 1 < H) visit(i + W);
    }
    if (count < min_area) continue;
    Detection d;
    d.box = {static_cast<float>(x0), static_cast<float>(y0), static_cast<float>(x1), static_cast<float>(y1)};
    const double fill = static_cast<double>(count) / static_cast<double>((x1 - x0) * (y1 - y0));
    d.score = static_cast<float>(std::clamp(fill, 0.5, 1.0));
    d.class_id = c;
    out.push_back(d);
  }
  return out;
}

Tensor oracle_segment(const Tensor& frame_state, std::size_t classes) {
  if (classes == 0) throw Error("oracle segmenter: class count must be positive");
  const std::vector<int> cls = class_map(frame_state);
  const std::size_t HW = frame_state.h() * frame_state.w();
  Tensor probs = Tensor::nchw(1, classes, frame_state.h(), frame_state.w());
  const float hit = classes == 1 ? 1.0f : 0.9f;
  const float miss = classes == 1 ? 0.0f : 0.1f / static_cast<float>(classes - 1);
  for (std::size_t i = 0; i < HW; ++i) {
    const std::size_t k = static_cast<std::size_t>(cls[i]) < classes ? static_cast<std::size_t>(cls[i]) : 0;
    for (std::size_t c = 0; c < classes; ++c) probs[c * HW + i] = c == k ? hit : miss;
  }
  return probs;
}

Tensor render_output(const TaskOutput& out, std::size_t channels, std::size_t height, std::size_t width,
                     int first_class) {
  if (out.is_segmentation()) {
    if (out.probs.c() != channels || out.probs.h() != height || out.probs.w() != width) {
      throw Error("render_output: class map " + shape_str(out.probs.shape()) + " does not match " +
                  std::to_string(channels) + " channels at " + std::to_string(height) + "x" + std::to_string(width));
    }
    return out.probs;
  }
  Tensor t = Tensor::nchw(1, channels, height, width);
  for (const auto& d : out.detections) {
    const long ch = d.class_id - first_class;
    if (ch < 0 || ch >= static_cast<long>(channels)) continue;
    const PixelRange r = box_pixels(d.box, height, width);
    for (std::size_t y = r.y0; y < r.y1; ++y)
      for (std::size_t x = r.x0; x < r.x1; ++x) {
        float& v = t.at(0, static_cast<std::size_t>(ch), y, x);
        v = std::max(v, d.score);
      }
  }
  return t;
}

// ---------------------------------------------------------------------------

TaskBackend::TaskBackend(TaskKind kind, BlockGrid grid, std::shared_ptr<const ToyDetector> detector)
    : kind_(kind), grid_(grid), detector_(std::move(detector)) {
  if (kind_ == TaskKind::ToyDetector) {
    if (!detector_) detector_ = std::make_shared<const ToyDetector>();
    if (grid_.block_size % ToyDetector::kStride) {
      throw Error("toy detector: block size " + std::to_string(grid_.block_size) + " must be divisible by " +
                  std::to_string(ToyDetector::kStride));
    }
    executor_ = std::make_unique<SparseExecutor>(detector_->shared_network(), grid_);
  }
}

std::size_t TaskBackend::channels_for(TaskKind kind) {
  switch (kind) {
    case TaskKind::ToyDetector: return 1;
    case TaskKind::OracleDetector: return kObjectClasses;
    case TaskKind::OracleSegmenter: return kObjectClasses + 1;
  }
  return 0;
}

TaskOutput TaskBackend::from_canvases() const {
  return {detector_->decode(executor_->canvas(detector_->heatmap_layer()), executor_->canvas(detector_->size_layer()),
                            grid_.height, grid_.width),
          Tensor()};
}

TaskOutput TaskBackend::run_dense(const Tensor& frame_state, long frame_index) {
  if (kind_ == TaskKind::ToyDetector) {
    executor_->run_dense_frame(frame_state, frame_index);
    stats_ = executor_->last_frame_stats();
    return from_canvases();
  }
  stats_.reset();
  stats_.task = grid_.height * grid_.width;
  if (kind_ == TaskKind::OracleDetector) return {oracle_detect(frame_state), Tensor()};
  return {DetectionSet{}, oracle_segment(frame_state, output_channels())};
}

TaskOutput TaskBackend::run_sparse(const Tensor& frame_state, const ActionGrid& actions) {
  actions.validate(grid_);
  if (kind_ == TaskKind::ToyDetector) {
    executor_->run_sparse_frame(frame_state, actions);
    stats_ = executor_->last_frame_stats();
    return from_canvases();
  }
  // Oracles re-read the composite, so only executed pixels are charged.
  stats_.reset();
  stats_.task = actions.executed() * grid_.block_size * grid_.block_size;
  if (kind_ == TaskKind::OracleDetector) return {oracle_detect(frame_state), Tensor()};
  return {DetectionSet{}, oracle_segment(frame_state, output_channels())};
}

Tensor TaskBackend::render(const TaskOutput& out) const {
  return render_output(out, output_channels(), grid_.height, grid_.width, first_class());
}

std::uint64_t TaskBackend::dense_task_macs() const {
  if (kind_ == TaskKind::ToyDetector) {
    std::uint64_t macs = 0;
    for (const auto& l : detector_->network().layers()) {
      if (l.kind == LayerKind::Conv) {
        macs += dense_conv_macs(l.conv, grid_.height_at_level(l.level), grid_.width_at_level(l.level));
      }
    }
    return macs;
  }
  return grid_.height * grid_.width;
}

// ---------------------------------------------------------------------------

DetectionMetrics evaluate_detections(const DetectionSet& pred, const std::vector<GtObject>& gt, float iou_threshold,
                                     float score_threshold, bool class_aware) {
  std::vector<const Detection*> order;
  for (const auto& d : pred)
    if (d.score >= score_threshold) order.push_back(&d);
  std::stable_sort(order.begin(), order.end(),
                   [](const Detection* a, const Detection* b) { return a->score > b->score; });
  std::vector<bool> used(gt.size(), false);
  DetectionMetrics m;
  for (const Detection* d : order) {
    long best = -1;
    float best_iou = 0.0f;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (used[j] || (class_aware && gt[j].class_id != d->class_id)) continue;
      const float v = box_iou(d->box, gt[j].box);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = static_cast<long>(j);
      }
    }
    if (best >= 0) {
      used[best] = true;
      ++m.tp;
    } else {
      ++m.fp;
    }
  }
  m.fn = gt.size() - m.tp;
  m.precision = order.empty() ? 1.0 : static_cast<double>(m.tp) / static_cast<double>(order.size());
  m.recall = gt.empty() ? 1.0 : static_cast<double>(m.tp) / static_cast<double>(gt.size());
  m.f1 = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

double mean_iou(const Tensor& probs, const Tensor& labels, std::size_t classes) {
  require_rank4(probs, "mean_iou");
  const std::size_t HW = probs.h() * probs.w();
  if (labels.numel() != HW) throw Error("mean_iou: label map does not match the prediction extents");
  std::vector<std::size_t> inter(classes, 0), uni(classes, 0);
  for (std::size_t i = 0; i < HW; ++i) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < probs.c(); ++c)
      if (probs[c * HW + i] > probs[arg * HW + i]) arg = c;
    const auto lab = static_cast<std::size_t>(labels[i]);
    for (std::size_t c = 0; c < classes; ++c) {
      const bool a = arg == c, b = lab == c;
      inter[c] += a && b;
      uni[c] += a || b;
    }
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (!uni[c]) continue;
    sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++present;
  }
  return present ? sum / static_cast<double>(present) : 1.0;
}

ClipMetrics evaluate_clip(const std::vector<TaskOutput>& outputs, const GroundTruth& gt, std::size_t height,
                          std::size_t width, bool class_aware) {
  if (outputs.size() != gt.size()) {
    throw Error("evaluate: " + std::to_string(outputs.size()) + " output frames vs " + std::to_string(gt.size()) +
                " ground-truth frames");
  }
  ClipMetrics m;
  for (std::size_t t = 0; t < outputs.size(); ++t) {
    if (outputs[t].is_segmentation()) {
      m.per_frame.push_back(mean_iou(outputs[t].probs, label_map(gt[t], height, width), outputs[t].probs.c()));
    } else {
      const DetectionMetrics d = evaluate_detections(outputs[t].detections, gt[t], 0.5f, 0.5f, class_aware);
      m.tp += d.tp;
      m.fp += d.fp;
      m.fn += d.fn;
      m.per_frame.push_back(d.f1);
    }
  }
  if (!m.per_frame.empty()) {
    m.mean = std::accumulate(m.per_frame.begin(), m.per_frame.end(), 0.0) / static_cast<double>(m.per_frame.size());
  }
  return m;
}

}  // namespace blockprop
