#include "blockprop/info_gain.hpp"

#include <algorithm>
#include <cmath>

namespace blockprop {

std::size_t Bitmap::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

float box_iou(const Box& a, const Box& b) {
  const float iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const float ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const float inter = (iw > 0 && ih > 0) ? iw * ih : 0.0f;
  const float uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

float mask_iou(const Bitmap& a, const Bitmap& b) {
  if (a.height != b.height || a.width != b.width) throw Error("mask_iou: mask extents differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool x = a.bits[i] != 0, y = b.bits[i] != 0;
    inter += (x && y);
    uni += (x || y);
  }
  return uni ? static_cast<float>(inter) / static_cast<float>(uni) : 0.0f;
}

float iou(const Detection& a, const Detection& b, IouMode mode) {
  if (mode == IouMode::Box) return box_iou(a.box, b.box);
  if (!a.mask || !b.mask) throw Error("iou: mask mode requires instance masks on both detections");
  return mask_iou(*a.mask, *b.mask);
}

PixelRange box_pixels(const Box& b, std::size_t height, std::size_t width) {
  auto clip = [](float v, std::size_t hi) {
    if (v <= 0.0f) return std::size_t{0};
    const auto u = static_cast<std::size_t>(v);
    return std::min(u, hi);
  };
  const std::size_t x0 = clip(std::floor(b.x1), width), x1 = clip(std::ceil(b.x2), width);
  const std::size_t y0 = clip(std::floor(b.y1), height), y1 = clip(std::ceil(b.y2), height);
  return {y0, std::max(y0, y1), x0, std::max(x0, x1)};
}

namespace {

void max_fill(Tensor& map, const Box& box, float value) {
  const PixelRange r = box_pixels(box, map.h(), map.w());
  for (std::size_t y = r.y0; y < r.y1; ++y)
    for (std::size_t x = r.x0; x < r.x1; ++x) {
      float& p = map.at(0, 0, y, x);
      p = std::max(p, value);
    }
}

}  // namespace

Tensor ig_detection(const DetectionSet& curr, const DetectionSet& prev, std::size_t height, std::size_t width,
                    const DetectionIgOptions& opts) {
  Tensor map = Tensor::nchw(1, 1, height, width);
  std::vector<bool> processed(prev.size(), false);

  for (const Detection& det : curr) {
    float best_iou = 0.0f;
    std::optional<std::size_t> best;
    for (std::size_t j = 0; j < prev.size(); ++j) {
      if (opts.class_aware && prev[j].class_id != det.class_id) continue;
      const float v = iou(det, prev[j], opts.mode);
      if (v <= 0.0f) continue;
      const bool better = v > best_iou || (v == best_iou && best && prev[j].score > prev[*best].score);
      if (better) {
        best_iou = v;
        best = j;
      }
    }
    const float keep = 1.0f - best_iou;
    max_fill(map, det.box, keep * det.score);
    if (best) {
      max_fill(map, prev[*best].box, keep * prev[*best].score);
      processed[*best] = true;
    }
  }
  for (std::size_t j = 0; j < prev.size(); ++j)
    if (!processed[j]) max_fill(map, prev[j].box, prev[j].score);
  return map;
}

Tensor ig_semseg(const Tensor& curr, const Tensor& prev) {
  require_rank4(curr, "ig_semseg");
  if (curr.shape() != prev.shape()) {
    throw Error("ig_semseg: shape mismatch " + shape_str(curr.shape()) + " vs " + shape_str(prev.shape()));
  }
  if (curr.n() != 1) throw Error("ig_semseg: batch must be 1");
  const std::size_t C = curr.c(), H = curr.h(), W = curr.w();
  for (const Tensor* t : {&curr, &prev}) {
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) s += t->at(0, c, y, x);
        if (std::fabs(s - 1.0) > 1e-4) throw Error("ig_semseg: probabilities do not sum to 1 at a pixel");
      }
  }
  constexpr double lo = 1e-8;
  Tensor map = Tensor::nchw(1, 1, H, W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double kl = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double p = std::clamp<double>(curr.at(0, c, y, x), lo, 1.0);
        const double q = std::clamp<double>(prev.at(0, c, y, x), lo, 1.0);
        kl += p * std::log(p / q);
      }
      map.at(0, 0, y, x) = static_cast<float>(std::max(0.0, kl));
    }
  return map;
}

Tensor block_maxpool(const Tensor& map, const BlockGrid& grid) {
  require_rank4(map, "block_maxpool");
  const std::size_t bs = grid.block_size;
  if (bs == 0 || map.h() % bs || map.w() % bs) {
    throw Error("block_maxpool: map " + shape_str(map.shape()) + " not divisible by block size " +
                std::to_string(bs));
  }
  if (map.h() / bs != grid.rows || map.w() / bs != grid.cols) {
    throw Error("block_maxpool: map extents do not match block grid");
  }
  Tensor out = Tensor::nchw(1, 1, grid.rows, grid.cols);
  for (std::size_t r = 0; r < grid.rows; ++r)
    for (std::size_t c = 0; c < grid.cols; ++c) {
      float m = map.at(0, 0, r * bs, c * bs);
      for (std::size_t y = r * bs; y < (r + 1) * bs; ++y)
        for (std::size_t x = c * bs; x < (c + 1) * bs; ++x) m = std::max(m, map.at(0, 0, y, x));
      out.at(0, 0, r, c) = m;
    }
  return out;
}

}  // namespace blockprop
