#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "blockprop/tensor.hpp"

namespace blockprop {

// 8-bit image with interleaved channels (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Image8&) const = default;
};

// (1,C,H,W) tensor in [0,1] -> 8-bit image; values are clamped and rounded.
Image8 to_image8(const Tensor& t);
Tensor from_image8(const Image8& img);

// Binary PGM (P5) for one channel, PPM (P6) for three.
void write_pnm(const std::filesystem::path& path, const Image8& img);
Image8 read_pnm(const std::filesystem::path& path);

}  // namespace blockprop
