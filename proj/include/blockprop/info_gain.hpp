#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "blockprop/block_grid.hpp"
#include "blockprop/tensor.hpp"

namespace blockprop {

// Half-open pixel box [x1, x2) x [y1, y2).
struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  float area() const { return (x2 - x1) * (y2 - y1); }
  bool operator==(const Box&) const = default;
};

// Frame-aligned binary mask.
struct Bitmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::size_t count() const;
  bool operator==(const Bitmap&) const = default;
};

struct Detection {
  Box box;
  float score = 0.0f;
  int class_id = 0;
  std::optional<Bitmap> mask;

  bool operator==(const Detection&) const = default;
};

using DetectionSet = std::vector<Detection>;

enum class IouMode { Box, Mask };

float box_iou(const Box& a, const Box& b);
float mask_iou(const Bitmap& a, const Bitmap& b);
// Empty unions yield 0. Mask mode requires both detections to carry masks.
float iou(const Detection& a, const Detection& b, IouMode mode = IouMode::Box);

// Pixel rows/cols covered by a box, clipped to the frame.
struct PixelRange {
  std::size_t y0, y1, x0, x1;
};
PixelRange box_pixels(const Box& b, std::size_t height, std::size_t width);

struct DetectionIgOptions {
  IouMode mode = IouMode::Box;
  bool class_aware = false;  // restrict best-match search to the same class
};

// Per-pixel information gain between consecutive detection outputs, as a
// (1,1,H,W) map. For each current detection the most-overlapping previous
// detection is found (ties: higher score, then lower index); (1-IoU) times
// each score is max-written over the current box and the matched previous
// box. Previous detections never chosen as a best match write their own
// score over their box.
Tensor ig_detection(const DetectionSet& curr, const DetectionSet& prev, std::size_t height, std::size_t width,
                    const DetectionIgOptions& opts = {});

// Pixelwise KL(curr || prev) over (1,C,H,W) probability maps, with
// probabilities clamped to [1e-8, 1]; negative values from clamping are
// floored to 0.
Tensor ig_semseg(const Tensor& curr, const Tensor& prev);

// Per-block maximum of a (1,1,H,W) map -> (1,1,rows,cols).
Tensor block_maxpool(const Tensor& map, const BlockGrid& grid);

}  // namespace blockprop
