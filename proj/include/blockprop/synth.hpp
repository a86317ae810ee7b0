#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "blockprop/info_gain.hpp"
#include "blockprop/tensor.hpp"

namespace blockprop {

// Object classes are 1..kObjectClasses; 0 is background.
inline constexpr int kObjectClasses = 3;

struct ColorKey {
  float r, g, b;
};

// Saturated colour of each object class (index class_id - 1).
const std::array<ColorKey, kObjectClasses>& palette();
// Class whose key lies within `tol` of an RGB value on every channel, else 0.
int match_color(float r, float g, float b, float tol = 0.08f);

struct ObjectSpec {
  int id = 0;
  int class_id = 1;
  int x = 0, y = 0;  // top-left at the spawn frame
  int w = 8, h = 8;
  int vx = 0, vy = 0;
  long spawn = 0;
  long despawn = -1;  // first frame without the object; -1 for never
};

struct SyntheticClipSpec {
  std::size_t width = 128;
  std::size_t height = 64;
  std::size_t frames = 20;
  std::uint64_t background_seed = 0;
  float noise_amplitude = 0.05f;
  std::vector<ObjectSpec> objects;

  // Extents must be divisible by block_size when it is nonzero.
  void validate(std::size_t block_size = 0) const;
};

struct GtObject {
  long frame = 0;
  int object_id = 0;
  Box box;
  int class_id = 0;

  bool operator==(const GtObject&) const = default;
};

// Ground truth indexed by frame.
using GroundTruth = std::vector<std::vector<GtObject>>;

struct Clip {
  SyntheticClipSpec spec;
  std::vector<Tensor> frames;  // (1,3,H,W), quantised to 8-bit levels
  GroundTruth gt;
};

// Random object layout with constant velocities and some spawn/despawn events.
SyntheticClipSpec random_clip_spec(std::uint64_t seed, std::size_t width, std::size_t height, std::size_t frames,
                                   std::size_t objects = 3);

// Objects are drawn in id order, later ids on top. An object is removed from
// the first frame where it would come within 1 px of the border.
Clip generate_clip(const SyntheticClipSpec& spec);

// Line format: "frame object_id x1 y1 x2 y2 class".
void write_ground_truth(std::ostream& os, const GroundTruth& gt);
GroundTruth read_ground_truth(std::istream& is, std::size_t frames);

// Directory layout: index.txt (width height frames, then one file name per
// frame), frame_NNNN.ppm, gt.txt.
void save_clip(const std::filesystem::path& dir, const Clip& clip);
Clip load_clip(const std::filesystem::path& dir);

// Per-pixel class map (1,1,H,W) painted in object id order.
Tensor label_map(const std::vector<GtObject>& objects, std::size_t height, std::size_t width);

}  // namespace blockprop
