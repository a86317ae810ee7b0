#include "blockprop/block_grid.hpp"

#include <algorithm>
#include <numeric>

namespace blockprop {

BlockGrid BlockGrid::make(std::size_t height, std::size_t width, std::size_t block_size,
                          std::size_t downsample_stages) {
  if (block_size == 0) throw Error("block grid: block size must be positive");
  if (height == 0 || width == 0) throw Error("block grid: frame extents must be positive");
  if (height % block_size || width % block_size) {
    throw Error("block grid: block size " + std::to_string(block_size) + " does not divide frame " +
                std::to_string(height) + "x" + std::to_string(width));
  }
  const std::size_t factor = std::size_t{1} << downsample_stages;
  if (block_size % factor) {
    throw Error("block grid: block size " + std::to_string(block_size) + " not divisible by 2^" +
                std::to_string(downsample_stages));
  }
  return BlockGrid{height, width, block_size, height / block_size, width / block_size};
}

namespace {

std::size_t scale_extent(std::size_t v, int level) {
  if (level >= 0) {
    const std::size_t f = std::size_t{1} << level;
    if (v % f) throw Error("block grid: extent " + std::to_string(v) + " not divisible at level " + std::to_string(level));
    return v / f;
  }
  return v << (-level);
}

}  // namespace

std::size_t BlockGrid::block_at_level(int level) const { return scale_extent(block_size, level); }
std::size_t BlockGrid::height_at_level(int level) const { return scale_extent(height, level); }
std::size_t BlockGrid::width_at_level(int level) const { return scale_extent(width, level); }

ActionGrid ActionGrid::filled(const BlockGrid& grid, std::uint8_t value, long frame) {
  return ActionGrid{grid.rows, grid.cols, std::vector<std::uint8_t>(grid.count(), value ? 1 : 0), frame};
}

std::size_t ActionGrid::executed() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

double ActionGrid::fraction() const {
  return values.empty() ? 0.0 : static_cast<double>(executed()) / static_cast<double>(values.size());
}

std::vector<std::size_t> ActionGrid::executed_indices() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i]) idx.push_back(i);
  return idx;
}

void ActionGrid::validate(const BlockGrid& grid) const {
  if (rows != grid.rows || cols != grid.cols || values.size() != grid.count()) {
    throw Error("action grid: extents " + std::to_string(rows) + "x" + std::to_string(cols) +
                " do not match block grid " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols));
  }
  for (auto v : values)
    if (v > 1) throw Error("action grid: non-binary decision");
}

Tensor action_mask(const ActionGrid& actions, const BlockGrid& grid) {
  actions.validate(grid);
  Tensor m = Tensor::nchw(1, 1, grid.height, grid.width);
  for (std::size_t y = 0; y < grid.height; ++y)
    for (std::size_t x = 0; x < grid.width; ++x)
      m.at(0, 0, y, x) = actions.at(y / grid.block_size, x / grid.block_size) ? 1.0f : 0.0f;
  return m;
}

void commit_blocks(const Tensor& src, const ActionGrid& actions, const BlockGrid& grid, Tensor& dst) {
  require_rank4(src, "commit_blocks");
  actions.validate(grid);
  if (src.shape() != dst.shape() || src.h() != grid.height || src.w() != grid.width) {
    throw Error("commit_blocks: shape mismatch " + shape_str(src.shape()) + " vs " + shape_str(dst.shape()));
  }
  const std::size_t bs = grid.block_size;
  for (std::size_t b : actions.executed_indices()) {
    const std::size_t y0 = (b / grid.cols) * bs, x0 = (b % grid.cols) * bs;
    for (std::size_t n = 0; n < src.n(); ++n)
      for (std::size_t c = 0; c < src.c(); ++c)
        for (std::size_t y = y0; y < y0 + bs; ++y)
          std::copy_n(&src.at(n, c, y, x0), bs, &dst.at(n, c, y, x0));
  }
}

}  // namespace blockprop
