#include <memory>

#include "blockprop/sparse_runtime.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace blockprop;
using blockprop::testing::random_tensor;

namespace {

ConvSpec random_conv(Rng& rng, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride) {
  ConvSpec s = ConvSpec::make(cin, cout, k, stride, k / 2);
  s.weights = random_tensor(s.weights.shape(), rng, -0.4, 0.4);
  s.bias = random_tensor(s.bias.shape(), rng, -0.2, 0.2);
  return s;
}

// Exercises every operator the sparse path supports: strided and 1x1 convs,
// pooling, a residual join, and both upsampling modes.
std::shared_ptr<Network> mixed_network(std::uint64_t seed) {
  Rng rng(seed);
  auto net = std::make_shared<Network>(3);
  auto c1 = net->add_conv("c1", 0, random_conv(rng, 3, 4, 3, 1), true);
  auto c2 = net->add_conv("c2", c1, random_conv(rng, 4, 6, 3, 2), true);
  auto p = net->add_op("pool", c2, OpKind::MaxPool2);
  auto c3 = net->add_conv("c3", p, random_conv(rng, 6, 6, 3, 1), true);
  auto c4 = net->add_conv("c4", c3, random_conv(rng, 6, 6, 3, 1));
  auto r = net->add_add("res", c4, p, true);
  auto up = net->add_op("up_bilinear", r, OpKind::UpsampleBilinear2);
  auto c5 = net->add_conv("c5", up, random_conv(rng, 6, 4, 1, 1), true);
  auto up2 = net->add_op("up_nearest", c5, OpKind::UpsampleNearest2);
  auto c6 = net->add_conv("c6", up2, random_conv(rng, 4, 2, 3, 1));
  net->add_op("sig", c6, OpKind::Sigmoid);
  auto a = net->add_op("avg", c1, OpKind::AvgPool2);
  net->add_conv("side", a, random_conv(rng, 4, 2, 1, 1));
  return net;
}

Tensor pattern_canvas(std::size_t c, std::size_t h, std::size_t w) {
  Tensor t = Tensor::nchw(1, c, h, w);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 1.0f + static_cast<float>(i);
  return t;
}

ActionGrid checkerboard(const BlockGrid& g) {
  ActionGrid a = ActionGrid::filled(g, 0, 1);
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c) a.at(r, c) = (r + c) % 2;
  return a;
}

}  // namespace

TEST_CASE("block grid validation") {
  CHECK_NOTHROW(BlockGrid::make(64, 128, 16, 2));
  CHECK_THROWS_AS(BlockGrid::make(64, 120, 16), Error);
  CHECK_THROWS_AS(BlockGrid::make(64, 128, 16, 5), Error);
  const auto g = BlockGrid::make(64, 128, 16, 2);
  CHECK(g.rows == 4);
  CHECK(g.cols == 8);
  CHECK(g.count() == 32);
  CHECK(g.block_at_level(2) == 4);
  ActionGrid bad = ActionGrid::filled(g, 1);
  bad.values[3] = 2;
  CHECK_THROWS_AS(bad.validate(g), Error);
}

TEST_CASE("gather_blocks") {
  const Tensor canvas = pattern_canvas(2, 8, 8);  // 2x2 grid of 4 px blocks
  const auto grid = BlockGrid::make(8, 8, 4);

  SUBCASE("full execution degenerates to tiling with dense neighbours") {
    Tensor blocks = gather_blocks(canvas, ActionGrid::filled(grid, 1), 4, 1);
    REQUIRE(blocks.shape() == Shape{4, 2, 6, 6});
    for (std::size_t b = 0; b < 4; ++b) {
      const long y0 = static_cast<long>((b / 2) * 4) - 1, x0 = static_cast<long>((b % 2) * 4) - 1;
      for (std::size_t c = 0; c < 2; ++c)
        for (long yy = 0; yy < 6; ++yy)
          for (long xx = 0; xx < 6; ++xx) {
            const long sy = y0 + yy, sx = x0 + xx;
            const bool inside = sy >= 0 && sy < 8 && sx >= 0 && sx < 8;
            const float expected = inside ? canvas.at(0, c, sy, sx) : 0.0f;
            CHECK(blocks.at(b, c, yy, xx) == expected);
          }
    }
  }
  SUBCASE("single corner block: image border is zero, neighbours are cached values") {
    ActionGrid a = ActionGrid::filled(grid, 0);
    a.at(0, 0) = 1;
    Tensor blocks = gather_blocks(canvas, a, 4, 1);
    REQUIRE(blocks.shape() == Shape{1, 2, 6, 6});
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(blocks.at(0, 0, 0, i) == 0.0f);  // top edge
      CHECK(blocks.at(0, 0, i, 0) == 0.0f);  // left edge
    }
    for (std::size_t i = 1; i < 5; ++i) {
      CHECK(blocks.at(0, 1, i, 5) == canvas.at(0, 1, i - 1, 4));  // right edge from block (0,1)
      CHECK(blocks.at(0, 1, 5, i) == canvas.at(0, 1, 4, i - 1));  // bottom edge from block (1,0)
    }
    CHECK(blocks.at(0, 0, 5, 5) == canvas.at(0, 0, 4, 4));
  }
  SUBCASE("halo 0 returns exact sub-tiles") {
    ActionGrid a = ActionGrid::filled(grid, 0);
    a.at(1, 0) = 1;
    Tensor blocks = gather_blocks(canvas, a, 4, 0);
    REQUIRE(blocks.shape() == Shape{1, 2, 4, 4});
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) CHECK(blocks.at(0, c, y, x) == canvas.at(0, c, 4 + y, x));
  }
  SUBCASE("replicate fill clamps at the border") {
    ActionGrid a = ActionGrid::filled(grid, 0);
    a.at(0, 0) = 1;
    Tensor blocks = gather_blocks(canvas, a, 4, 1, HaloFill::Replicate);
    CHECK(blocks.at(0, 0, 0, 0) == canvas.at(0, 0, 0, 0));
    CHECK(blocks.at(0, 0, 0, 3) == canvas.at(0, 0, 0, 2));
  }
  SUBCASE("halo larger than block is rejected") {
    CHECK_THROWS_AS(gather_blocks(canvas, ActionGrid::filled(grid, 1), 4, 5), Error);
  }
}

TEST_CASE("scatter_blocks") {
  const auto grid = BlockGrid::make(8, 8, 4);
  const Tensor before = pattern_canvas(3, 8, 8);

  SUBCASE("zero executed blocks leaves the canvas unchanged") {
    Tensor canvas = before;
    scatter_blocks(Tensor::nchw(0, 3, 4, 4), ActionGrid::filled(grid, 0), 4, canvas);
    CHECK(canvas == before);
  }
  SUBCASE("one executed block changes exactly bs*bs*C values") {
    Tensor canvas = before;
    ActionGrid a = ActionGrid::filled(grid, 0);
    a.at(1, 1) = 1;
    scatter_blocks(Tensor::nchw(1, 3, 6, 6, -7.0f), a, 4, canvas, 1);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < canvas.numel(); ++i) changed += canvas[i] != before[i];
    CHECK(changed == 4 * 4 * 3);
    CHECK(canvas.at(0, 2, 7, 7) == -7.0f);
    CHECK(canvas.at(0, 2, 3, 3) == before.at(0, 2, 3, 3));
  }
  SUBCASE("count mismatch") {
    Tensor canvas = before;
    CHECK_THROWS_AS(scatter_blocks(Tensor::nchw(2, 3, 4, 4), ActionGrid::filled(grid, 1), 4, canvas), Error);
  }
}

TEST_CASE("sparse execution with all blocks equals dense execution") {
  const auto grid = BlockGrid::make(32, 48, 16, 2);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    auto net = mixed_network(seed);
    Rng rng(seed + 1000);
    SparseExecutor ex(net, grid);
    ex.run_dense_frame(random_tensor(Shape{1, 3, 32, 48}, rng, 0.0, 1.0));
    const Tensor next = random_tensor(Shape{1, 3, 32, 48}, rng, 0.0, 1.0);
    ex.run_sparse_frame(next, ActionGrid::filled(grid, 1, 1));
    const auto dense = run_dense(*net, next);
    for (std::size_t i = 0; i < net->size(); ++i) {
      CAPTURE(net->layer(i).name);
      CHECK(max_abs_diff(ex.canvas(i), dense[i]) <= 1e-5f);
    }
  }
}

TEST_CASE("sparse execution with no blocks is a pure copy") {
  const auto grid = BlockGrid::make(32, 48, 16, 2);
  auto net = mixed_network(7);
  Rng rng(7);
  SparseExecutor ex(net, grid);
  ex.run_dense_frame(random_tensor(Shape{1, 3, 32, 48}, rng, 0.0, 1.0));
  const auto before = ex.canvases();
  ex.run_sparse_frame(random_tensor(Shape{1, 3, 32, 48}, rng, 0.0, 1.0), ActionGrid::filled(grid, 0, 1));
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(ex.canvas(i) == before[i].data);
  CHECK(ex.last_frame_stats().task == 0);
}

TEST_CASE("checkerboard execution on a static scene equals dense execution") {
  const auto grid = BlockGrid::make(32, 48, 16, 2);
  auto net = mixed_network(3);
  Rng rng(3);
  const Tensor frame = random_tensor(Shape{1, 3, 32, 48}, rng, 0.0, 1.0);
  SparseExecutor ex(net, grid);
  ex.run_dense_frame(frame);
  ex.run_sparse_frame(frame, checkerboard(grid));
  const auto dense = run_dense(*net, frame);
  for (std::size_t i = 0; i < net->size(); ++i) CHECK(max_abs_diff(ex.canvas(i), dense[i]) <= 1e-5f);
}

TEST_CASE("locality of sparse execution") {
  const auto grid = BlockGrid::make(32, 48, 16, 2);
  auto net = mixed_network(5);
  Rng rng(5);
  const Tensor frame = random_tensor(Shape{1, 3, 32, 48}, rng, 0.0, 1.0);

  SUBCASE("edits inside a non-selected block change nothing") {
    SparseExecutor ex(net, grid);
    ex.run_dense_frame(frame);
    const auto before = ex.canvases();
    Tensor edited = frame;
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 16; x < 32; ++x) edited.at(0, 1, y, x) = 0.0f;  // block (0,1)
    ActionGrid a = ActionGrid::filled(grid, 0, 1);
    a.at(1, 2) = 1;
    ex.run_sparse_frame(edited, a);
    // Block (1,2) re-executes on unchanged pixels; its halo only reads cached values.
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(max_abs_diff(ex.canvas(i), before[i].data) <= 1e-5f);
  }
  SUBCASE("edits inside a selected block only touch that block") {
    SparseExecutor ex(net, grid);
    ex.run_dense_frame(frame);
    const auto before = ex.canvases();
    Tensor edited = frame;
    for (std::size_t y = 16; y < 32; ++y)
      for (std::size_t x = 0; x < 16; ++x) edited.at(0, 0, y, x) = 1.0f;  // block (1,0)
    ActionGrid a = ActionGrid::filled(grid, 0, 1);
    a.at(1, 0) = 1;
    ex.run_sparse_frame(edited, a);
    for (std::size_t li = 0; li < before.size(); ++li) {
      const Tensor& now = ex.canvas(li);
      const std::size_t bs = before[li].block;
      for (std::size_t c = 0; c < now.c(); ++c)
        for (std::size_t y = 0; y < now.h(); ++y)
          for (std::size_t x = 0; x < now.w(); ++x) {
            const bool in_block = y / bs == 1 && x / bs == 0;
            if (!in_block) CHECK(now.at(0, c, y, x) == before[li].data.at(0, c, y, x));
          }
      if (li != 0) CHECK(ex.canvases()[li].last_write[3] == 1);
    }
  }
}

TEST_CASE("unsupported operators in the sparse path") {
  const auto grid = BlockGrid::make(32, 32, 16);
  SUBCASE("dilated convolution") {
    auto net = std::make_shared<Network>(1);
    ConvSpec s = ConvSpec::make(1, 1, 3, 1, 2);
    s.dilation = 2;
    net->add_conv("dilated", 0, s);
    CHECK(run_dense(*net, Tensor::nchw(1, 1, 32, 32)).size() == 2);
    try {
      SparseExecutor ex(net, grid);
      FAIL("expected rejection");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("dilated") != std::string::npos);
    }
  }
  SUBCASE("global pooling falls back to dense evaluation") {
    Rng rng(2);
    auto net = std::make_shared<Network>(2);
    auto c = net->add_conv("c", 0, random_conv(rng, 2, 3, 3, 1), true);
    net->add_op("gap", c, OpKind::GlobalAvgPool);
    SparseExecutor ex(net, grid);
    ex.run_dense_frame(random_tensor(Shape{1, 2, 32, 32}, rng));
    const Tensor next = random_tensor(Shape{1, 2, 32, 32}, rng);
    ex.run_sparse_frame(next, ActionGrid::filled(grid, 1, 1));
    CHECK(max_abs_diff(ex.canvas(2), run_dense(*net, next)[2]) <= 1e-5f);
    net->add_conv("after", 2, random_conv(rng, 3, 1, 1, 1));
    CHECK_THROWS_AS(SparseExecutor(net, grid), Error);
  }
}

TEST_CASE("MAC counting") {
  ConvSpec s = ConvSpec::make(8, 8, 3, 1, 1);
  CHECK(sparse_conv_macs(s, 16, 3) == 442368);
  CHECK(sparse_conv_macs(s, 16, 0) == 0);
  CHECK(dense_conv_macs(s, 64, 128) == sparse_conv_macs(s, 16, 32));

  const auto grid = BlockGrid::make(32, 48, 16, 2);
  auto net = mixed_network(1);
  Rng rng(1);
  SparseExecutor ex(net, grid);
  ex.run_dense_frame(random_tensor(Shape{1, 3, 32, 48}, rng));
  const std::uint64_t dense = ex.dense_conv_macs_per_frame();
  for (std::size_t n = 0; n <= grid.count(); ++n) {
    ActionGrid a = ActionGrid::filled(grid, 0, 1);
    for (std::size_t i = 0; i < n; ++i) a.values[i] = 1;
    ex.run_sparse_frame(random_tensor(Shape{1, 3, 32, 48}, rng), a);
    CHECK(ex.last_frame_stats().task * grid.count() == dense * n);
  }
}
