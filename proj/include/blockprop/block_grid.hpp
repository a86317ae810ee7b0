#pragma once

#include <cstdint>
#include <vector>

#include "blockprop/tensor.hpp"

namespace blockprop {

// Lattice of square blocks covering a frame.
struct BlockGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t block_size = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  // Throws unless block_size divides both extents and is divisible by
  // 2^downsample_stages.
  static BlockGrid make(std::size_t height, std::size_t width, std::size_t block_size,
                        std::size_t downsample_stages = 0);

  std::size_t count() const { return rows * cols; }
  // Block edge length at a feature scale (level d means extents divided by 2^d).
  std::size_t block_at_level(int level) const;
  std::size_t height_at_level(int level) const;
  std::size_t width_at_level(int level) const;

  bool operator==(const BlockGrid&) const = default;
};

// Binary execute (1) / copy (0) decisions, row-major over the grid.
struct ActionGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> values;
  long frame = 0;

  static ActionGrid filled(const BlockGrid& grid, std::uint8_t value, long frame = 0);

  std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::uint8_t& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  std::size_t count() const { return values.size(); }
  std::size_t executed() const;
  double fraction() const;
  // Row-major indices of executed blocks.
  std::vector<std::size_t> executed_indices() const;
  void validate(const BlockGrid& grid) const;

  bool operator==(const ActionGrid& o) const { return rows == o.rows && cols == o.cols && values == o.values; }
};

// Nearest-neighbour upsampling of the grid to a (1,1,H,W) full-resolution mask.
Tensor action_mask(const ActionGrid& actions, const BlockGrid& grid);

// Copies executed blocks of `src` into `dst` (both (N,C,H,W) at full resolution).
void commit_blocks(const Tensor& src, const ActionGrid& actions, const BlockGrid& grid, Tensor& dst);

}  // namespace blockprop
