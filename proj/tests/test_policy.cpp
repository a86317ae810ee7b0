#include <algorithm>
#include <cmath>
#include <filesystem>

#include "blockprop/policy.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace blockprop;
using blockprop::testing::fd_gradient;
using blockprop::testing::random_tensor;
using blockprop::testing::rel_error;

namespace {

const BlockGrid kGrid = BlockGrid::make(64, 128, 16);

Tensor random_frame(Rng& rng) { return random_tensor({1, 3, 64, 128}, rng, 0.0, 1.0); }

ActionGrid random_actions(Rng& rng, const BlockGrid& g) {
  ActionGrid a = ActionGrid::filled(g, 0);
  for (auto& v : a.values) v = rng.uniform() < 0.5 ? 1 : 0;
  return a;
}

// Closed loop on a static random scene with a fixed per-block IG field.
struct Loop {
  OnlinePolicy policy;
  Tensor frame, prev_state, prev_output;
  ActionGrid actions;
  std::uint64_t seed;
  long t = 0;

  Loop(double tau, std::uint64_t s) : policy(8, config(tau), s), seed(s) {
    Rng rng(s + 1000);
    frame = random_frame(rng);
    prev_state = frame;
    prev_output = Tensor::nchw(1, 1, 64, 128);
    actions = ActionGrid::filled(kGrid, 1);
  }
  static PolicyConfig config(double tau) {
    PolicyConfig c;
    c.target = tau;
    return c;
  }
  PolicyNet::Cache step(const Tensor& block_ig, PolicyStep* out = nullptr) {
    ++t;
    const Tensor s = assemble_state(frame, prev_state, prev_output, actions, kGrid);
    PolicyNet::Cache c = policy.evaluate(s, kGrid);
    actions = sample_actions(c.probs, seed, t);
    commit_blocks(frame, actions, kGrid, prev_state);
    const PolicyStep st = policy.learn(c, actions, block_ig);
    if (out) *out = st;
    return c;
  }
};

}  // namespace

TEST_CASE("assemble_state") {
  Rng rng(1);
  const Tensor f = random_frame(rng);
  const Tensor out = Tensor::nchw(1, 1, 64, 128, 0.25f);
  SUBCASE("layout for a one-class task") {
    ActionGrid a = ActionGrid::filled(kGrid, 0);
    a.at(1, 2) = 1;
    const Tensor s = assemble_state(f, f, out, a, kGrid);
    REQUIRE(s.shape() == Shape{1, 8, 64, 128});
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(s.at(0, c, 5, 7) == f.at(0, c, 5, 7));
      CHECK(s.at(0, 3 + c, 9, 100) == f.at(0, c, 9, 100));
    }
    CHECK(s.at(0, 6, 0, 0) == 0.25f);
    CHECK(s.at(0, 7, 16, 32) == 1.0f);
    CHECK(s.at(0, 7, 31, 47) == 1.0f);
    CHECK(s.at(0, 7, 15, 32) == 0.0f);
    CHECK(s.at(0, 7, 16, 48) == 0.0f);
  }
  SUBCASE("all-ones actions give a constant channel") {
    const Tensor s = assemble_state(f, f, out, ActionGrid::filled(kGrid, 1), kGrid);
    for (std::size_t y = 0; y < 64; ++y)
      for (std::size_t x = 0; x < 128; ++x) CHECK(s.at(0, 7, y, x) == 1.0f);
  }
  SUBCASE("extent mismatch") {
    const Tensor small = Tensor::nchw(1, 3, 32, 128);
    CHECK_THROWS_AS(assemble_state(small, f, out, ActionGrid::filled(kGrid, 1), kGrid), Error);
    CHECK_THROWS_AS(assemble_state(f, f, Tensor::nchw(1, 1, 64, 64), ActionGrid::filled(kGrid, 1), kGrid), Error);
  }
}

TEST_CASE("policy forward") {
  Rng rng(2);
  const Tensor s = random_tensor({1, 8, 64, 128}, rng, 0.0, 1.0);
  PolicyNet net(8, 16, 7);
  CHECK(net.convs().size() == 8);
  SUBCASE("zero head gives one half everywhere") {
    net.head().weights.fill(0.0f);
    net.head().bias.fill(0.0f);
    const auto c = net.forward(s, kGrid);
    REQUIRE(c.probs.shape() == Shape{1, 1, 4, 8});
    for (float p : c.probs.values()) CHECK(p == 0.5f);
  }
  SUBCASE("grid extents follow the block grid") {
    const BlockGrid g32 = BlockGrid::make(64, 128, 32);
    CHECK(net.forward(s, g32).probs.shape() == Shape{1, 1, 2, 4});
    const BlockGrid g8 = BlockGrid::make(64, 128, 8);
    CHECK_THROWS_AS(net.forward(s, g8), Error);
  }
  SUBCASE("determinism") {
    PolicyNet other(8, 16, 7);
    CHECK(net.forward(s, kGrid).probs == other.forward(s, kGrid).probs);
  }
  SUBCASE("probabilities are clamped") {
    net.head().bias.fill(100.0f);
    const Tensor hi = net.forward(s, kGrid).probs;
    for (float p : hi.values()) CHECK(p == 1.0f - kProbClamp);
    net.head().bias.fill(-100.0f);
    const Tensor lo = net.forward(s, kGrid).probs;
    for (float p : lo.values()) CHECK(p == kProbClamp);
  }
  SUBCASE("non-finite logits") {
    net.head().bias.fill(std::numeric_limits<float>::infinity());
    CHECK_THROWS_AS(net.forward(s, kGrid), Error);
  }
  SUBCASE("wrong channel count") { CHECK_THROWS_AS(net.forward(Tensor::nchw(1, 7, 64, 128), kGrid), Error); }
}

TEST_CASE("sample_actions") {
  SUBCASE("near-certain probabilities") {
    const Tensor p = Tensor::nchw(1, 1, 4, 8, 1.0f - kProbClamp);
    std::size_t ones = 0;
    for (long f = 0; f < 100; ++f) ones += sample_actions(p, 3, f).executed();
    CHECK(ones >= 3199);
  }
  SUBCASE("binomial concentration") {
    const Tensor p = Tensor::nchw(1, 1, 100, 100, 0.5f);
    CHECK(sample_actions(p, 11, 0).fraction() == doctest::Approx(0.5).epsilon(0.04));
  }
  SUBCASE("determinism and dependence on frame") {
    Rng rng(4);
    const Tensor p = random_tensor({1, 1, 4, 8}, rng, 0.1, 0.9);
    CHECK(sample_actions(p, 5, 9) == sample_actions(p, 5, 9));
    bool differs = false;
    for (long f = 0; f < 10; ++f) differs |= !(sample_actions(p, 5, f) == sample_actions(p, 5, 9));
    CHECK(differs);
  }
}

TEST_CASE("cost and moving average") {
  ActionGrid a = ActionGrid::filled(kGrid, 0);
  CHECK(compute_cost(a) == 0.0);
  for (std::size_t b = 0; b < 8; ++b) a.values[b * 4] = 1;
  CHECK(compute_cost(a) == 0.25);
  CHECK(update_moving_average(0.3, 0.5, 0.9) == doctest::Approx(0.48).epsilon(1e-12));
}

TEST_CASE("rewards") {
  const BlockGrid g = BlockGrid::make(16, 32, 16);
  Tensor ig = Tensor::nchw(1, 1, 1, 2, 0.6f);
  ActionGrid a = ActionGrid::filled(g, 0);
  a.values[0] = 1;
  const RewardGrid r = compute_rewards(ig, a, 0.5, 0.3, 5.0);
  CHECK(r.total[0] == doctest::Approx(-0.4).epsilon(1e-6));
  CHECK(r.total[1] == doctest::Approx(0.4).epsilon(1e-6));
  for (std::size_t b = 0; b < 2; ++b) CHECK(r.total[b] == doctest::Approx(r.ig_part[b] + r.cost_part[b]));

  SUBCASE("equilibrium") {
    const RewardGrid z = compute_rewards(Tensor::nchw(1, 1, 1, 2), a, 0.3, 0.3, 5.0);
    for (float v : z.total.values()) CHECK(v == 0.0f);
  }
  SUBCASE("sign symmetry") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
      const Tensor big_ig = random_tensor({1, 1, 4, 8}, rng, 0.0, 1.0);
      ActionGrid x = random_actions(rng, kGrid), y = x;
      for (auto& v : y.values) v = 1 - v;
      const double m = rng.uniform(), tau = rng.uniform();
      const RewardGrid rx = compute_rewards(big_ig, x, m, tau, 5.0), ry = compute_rewards(big_ig, y, m, tau, 5.0);
      for (std::size_t b = 0; b < 32; ++b) {
        CHECK(rx.ig_part[b] == -ry.ig_part[b]);
        CHECK(rx.cost_part[b] == -ry.cost_part[b]);
      }
    }
  }
  SUBCASE("negative IG") {
    ig[0] = -0.1f;
    CHECK_THROWS_AS(compute_rewards(ig, a, 0.5, 0.3, 5.0), Error);
  }
}

TEST_CASE("reinforce loss") {
  SUBCASE("single block example") {
    const BlockGrid g = BlockGrid::make(16, 16, 16);
    const auto l = reinforce_loss(Tensor::nchw(1, 1, 1, 1, 0.7f), ActionGrid::filled(g, 1),
                                  Tensor::nchw(1, 1, 1, 1, 0.5f));
    CHECK(l.loss == doctest::Approx(-0.5 * std::log(0.7)).epsilon(1e-6));
    CHECK(l.loss == doctest::Approx(0.1783).epsilon(1e-3));
  }
  SUBCASE("zero rewards") {
    Rng rng(1);
    const auto l = reinforce_loss(random_tensor({1, 1, 4, 8}, rng, 0.1, 0.9), random_actions(rng, kGrid),
                                  Tensor::nchw(1, 1, 4, 8));
    CHECK(l.loss == 0.0);
    for (float v : l.grad_logits.values()) CHECK(v == 0.0f);
  }
  SUBCASE("probability outside the open interval") {
    const BlockGrid g = BlockGrid::make(16, 16, 16);
    CHECK_THROWS_AS(reinforce_loss(Tensor::nchw(1, 1, 1, 1, 1.0f), ActionGrid::filled(g, 1),
                                   Tensor::nchw(1, 1, 1, 1, 1.0f)),
                    Error);
  }
  SUBCASE("logit gradient against finite differences") {
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
      Rng rng(seed);
      const Tensor z = random_tensor({1, 1, 4, 8}, rng, -3.0, 3.0);
      const ActionGrid a = random_actions(rng, kGrid);
      const Tensor r = random_tensor({1, 1, 4, 8}, rng, -2.0, 2.0);
      const auto loss_of = [&](const Tensor& logits) {
        Tensor p(logits.shape());
        double l = 0.0;
        for (std::size_t b = 0; b < p.numel(); ++b) {
          const double pb = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[b])));
          l -= r[b] * (a.values[b] ? std::log(pb) : std::log(1.0 - pb));
        }
        return l;
      };
      const auto l = reinforce_loss(sigmoid(z), a, r);
      CHECK(rel_error(l.grad_logits, fd_gradient(loss_of, z)) < 1e-3);
    }
  }
}

TEST_CASE("policy backward through the network") {
  // Scalar probe L = <w, logits>. The map is piecewise linear in any single
  // layer's weights; kink crossings inflate the error at large steps, so the
  // better of two steps is taken.
  for (std::uint64_t seed = 21; seed < 26; ++seed) {
    Rng rng(seed);
    PolicyNet net(8, 4, seed);
    const Tensor s = random_tensor({1, 8, 32, 32}, rng, 0.0, 1.0);
    const BlockGrid g = BlockGrid::make(32, 32, 16);
    const Tensor w = random_tensor({1, 1, 2, 2}, rng);
    const auto grads = net.backward(net.forward(s, g), w);
    auto ps = net.params();
    REQUIRE(grads.size() == ps.size());
    for (std::size_t idx = 0; idx < ps.size(); ++idx) {
      Tensor& p = *ps[idx];
      const Tensor orig = p;
      const auto loss_of = [&](const Tensor& x) {
        p = x;
        const double v = blockprop::testing::dot(net.forward(s, g).logits, w);
        p = orig;
        return v;
      };
      CAPTURE(seed);
      CAPTURE(idx);
      const double err = std::min(rel_error(grads[idx], fd_gradient(loss_of, orig, 1e-3f)),
                                  rel_error(grads[idx], fd_gradient(loss_of, orig, 1e-4f)));
      CHECK(err < 2.5e-2);
    }
  }
}

TEST_CASE("scheduled updates") {
  Rng rng(5);
  const Tensor s = random_tensor({1, 8, 64, 128}, rng, 0.0, 1.0);
  const Tensor ig = random_tensor({1, 1, 4, 8}, rng, 0.0, 1.0);
  SUBCASE("online") {
    OnlinePolicy pol(8, PolicyConfig{}, 1);
    const NamedTensors before = pol.net().to_tensors();
    for (int f = 1; f <= 3; ++f) {
      const auto c = pol.evaluate(s, kGrid);
      CHECK_FALSE(pol.learn(c, sample_actions(c.probs, 1, f), ig).updated);
      CHECK(pol.net().to_tensors() == before);
      CHECK(pol.pending_frames() == static_cast<std::size_t>(f));
    }
    const auto c = pol.evaluate(s, kGrid);
    CHECK(pol.learn(c, sample_actions(c.probs, 1, 4), ig).updated);
    CHECK(pol.updates() == 1);
    CHECK(pol.pending_frames() == 0);
    CHECK_FALSE(pol.net().to_tensors() == before);
  }
  SUBCASE("offline never updates") {
    PolicyConfig cfg;
    cfg.online = false;
    OnlinePolicy pol(8, cfg, 1);
    const NamedTensors before = pol.net().to_tensors();
    for (int f = 1; f <= 12; ++f) {
      const auto c = pol.evaluate(s, kGrid);
      CHECK_FALSE(pol.learn(c, sample_actions(c.probs, 1, f), ig).updated);
    }
    CHECK(pol.updates() == 0);
    CHECK(pol.net().to_tensors() == before);
  }
  SUBCASE("moving average modes") {
    PolicyConfig cfg;
    cfg.target = 0.5;
    OnlinePolicy rec(8, cfg, 1);
    cfg.average_mode = MovingAverageMode::TwoTerm;
    OnlinePolicy two(8, cfg, 1);
    const auto c = rec.evaluate(s, kGrid);
    ActionGrid a = ActionGrid::filled(kGrid, 0);
    for (std::size_t b = 0; b < 8; ++b) a.values[b] = 1;
    // First frame after the clip start: both use tau as the previous value.
    CHECK(rec.learn(c, a, ig).moving_avg == doctest::Approx(0.1 * 0.25 + 0.9 * 0.5));
    CHECK(two.learn(c, a, ig).moving_avg == doctest::Approx(0.1 * 0.25 + 0.9 * 0.5));
    const ActionGrid full = ActionGrid::filled(kGrid, 1);
    CHECK(rec.learn(c, full, ig).moving_avg == doctest::Approx(0.1 + 0.9 * 0.475));
    CHECK(two.learn(c, full, ig).moving_avg == doctest::Approx(0.1 + 0.9 * 0.25));
  }
  SUBCASE("invalid config") {
    PolicyConfig cfg;
    cfg.target = 1.5;
    CHECK_THROWS_AS(OnlinePolicy(8, cfg, 1), Error);
  }
}

TEST_CASE("policy parameters round-trip") {
  const auto dir = std::filesystem::temp_directory_path() / "blockprop_policy_roundtrip";
  std::filesystem::remove_all(dir);
  OnlinePolicy a(8, PolicyConfig{}, 3), b(8, PolicyConfig{}, 4);
  a.save(dir);
  CHECK(std::filesystem::exists(dir / "manifest.txt"));
  CHECK_FALSE(a.net().to_tensors() == b.net().to_tensors());
  b.load(dir);
  CHECK(a.net().to_tensors() == b.net().to_tensors());
  OnlinePolicy wrong(9, PolicyConfig{}, 1);
  CHECK_THROWS_AS(wrong.load(dir), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("cost steering converges from saturated starts") {
  for (double tau : {0.3, 0.5, 0.7}) {
    for (float bias : {-3.0f, 3.0f}) {
      Loop loop(tau, 17);
      loop.policy.net().head().bias.fill(bias);
      const Tensor zero = Tensor::nchw(1, 1, 4, 8);
      PolicyStep st;
      for (int f = 0; f < 300; ++f) loop.step(zero, &st);
      bool inside = true;
      for (int f = 0; f < 300; ++f) {
        loop.step(zero, &st);
        inside &= std::abs(st.moving_avg - tau) <= 0.1;
      }
      CAPTURE(tau);
      CAPTURE(bias);
      CHECK(inside);
    }
  }
}

TEST_CASE("importance steering") {
  // IG is 1 on a fixed quarter of the blocks and tau equals that quarter.
  const std::vector<std::size_t> subset{1, 2, 9, 10, 20, 21, 28, 29};
  Tensor ig = Tensor::nchw(1, 1, 4, 8);
  for (std::size_t b : subset) ig[b] = 1.0f;
  const auto gap = [&](const Tensor& probs) {
    double on = 0.0, off = 0.0;
    for (std::size_t b = 0; b < 32; ++b) (ig[b] > 0 ? on : off) += probs[b];
    return on / 8.0 - off / 24.0;
  };
  // Observed at frame 500: 0.49 0.71 0.13 0.17 0.29 0.42; all above 0.88 by 1000.
  double mean_gap = 0.0;
  const int seeds = 6;
  for (int s = 1; s <= seeds; ++s) {
    Loop loop(0.25, static_cast<std::uint64_t>(s));
    PolicyNet::Cache c;
    for (int f = 0; f < 500; ++f) c = loop.step(ig);
    mean_gap += gap(c.probs) / seeds;
    for (int f = 0; f < 500; ++f) c = loop.step(ig);
    CAPTURE(s);
    CHECK(gap(c.probs) > 0.8);
  }
  CHECK(mean_gap > 0.3);
}
