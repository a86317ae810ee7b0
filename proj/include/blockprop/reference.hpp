#pragma once

// Brute-force information-gain reference for the self checks and tests. It
// works per pixel on integer boxes, counting pixels for IoU instead of using
// box arithmetic, and picks matches by sorting candidates.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "blockprop/info_gain.hpp"
#include "blockprop/rng.hpp"

namespace blockprop::reference {

inline bool covers(const Box& b, std::size_t x, std::size_t y) {
  return static_cast<double>(x) >= b.x1 && static_cast<double>(x) < b.x2 && static_cast<double>(y) >= b.y1 &&
         static_cast<double>(y) < b.y2;
}

inline double pixel_iou(const Box& a, const Box& b, std::size_t H, std::size_t W) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const bool ia = covers(a, x, y), ib = covers(b, x, y);
      inter += ia && ib;
      uni += ia || ib;
    }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

inline std::vector<double> brute_force_ig(const DetectionSet& curr, const DetectionSet& prev, std::size_t H,
                                          std::size_t W) {
  struct Match {
    long prev = -1;
    double iou = 0.0;
  };
  std::vector<Match> match(curr.size());
  for (std::size_t i = 0; i < curr.size(); ++i) {
    std::vector<std::size_t> order(prev.size());
    for (std::size_t j = 0; j < prev.size(); ++j) order[j] = j;
    std::vector<double> ious(prev.size());
    for (std::size_t j = 0; j < prev.size(); ++j) ious[j] = pixel_iou(curr[i].box, prev[j].box, H, W);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (ious[a] != ious[b]) return ious[a] > ious[b];
      return prev[a].score > prev[b].score;
    });
    if (!order.empty() && ious[order[0]] > 0.0) match[i] = {static_cast<long>(order[0]), ious[order[0]]};
  }
  std::vector<double> ig(H * W, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double v = 0.0;
      for (std::size_t i = 0; i < curr.size(); ++i) {
        const double keep = 1.0 - match[i].iou;
        if (covers(curr[i].box, x, y)) v = std::max(v, keep * curr[i].score);
        if (match[i].prev >= 0 && covers(prev[match[i].prev].box, x, y)) {
          v = std::max(v, keep * prev[match[i].prev].score);
        }
      }
      for (std::size_t j = 0; j < prev.size(); ++j) {
        const bool matched = std::any_of(match.begin(), match.end(),
                                         [&](const Match& m) { return m.prev == static_cast<long>(j); });
        if (!matched && covers(prev[j].box, x, y)) v = std::max(v, static_cast<double>(prev[j].score));
      }
      ig[y * W + x] = v;
    }
  return ig;
}

inline DetectionSet random_detections(Rng& rng, std::size_t H, std::size_t W, std::size_t max_count) {
  DetectionSet out;
  const auto n = static_cast<std::size_t>(rng.integer(0, static_cast<long>(max_count)));
  for (std::size_t i = 0; i < n; ++i) {
    const long x1 = rng.integer(0, static_cast<long>(W) - 2), y1 = rng.integer(0, static_cast<long>(H) - 2);
    const long x2 = rng.integer(x1 + 1, static_cast<long>(W)), y2 = rng.integer(y1 + 1, static_cast<long>(H));
    Detection d;
    d.box = {static_cast<float>(x1), static_cast<float>(y1), static_cast<float>(x2), static_cast<float>(y2)};
    // Quantised scores make score ties (and thus the tie-break rule) likely.
    d.score = static_cast<float>(rng.integer(1, 10)) / 10.0f;
    out.push_back(d);
  }
  return out;
}

}  // namespace blockprop::reference
