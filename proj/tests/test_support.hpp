#pragma once

#include <cmath>
#include <functional>

#include "blockprop/rng.hpp"
#include "blockprop/tensor.hpp"

namespace blockprop::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

// Values bounded away from zero so kinks (relu) are not straddled by a 1e-3 step.
inline Tensor random_away_from_zero(Shape shape, Rng& rng, double margin = 0.05) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) {
    double u = rng.uniform(margin, 1.0);
    v = static_cast<float>(rng.uniform() < 0.5 ? -u : u);
  }
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

// Central finite-difference gradient of loss(x) with respect to every element of x.
inline Tensor fd_gradient(const std::function<double(const Tensor&)>& loss, const Tensor& x, float step = 1e-3f) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float orig = x[i];
    const float up = orig + step, down = orig - step;
    probe[i] = up;
    const double lp = loss(probe);
    probe[i] = down;
    const double lm = loss(probe);
    probe[i] = orig;
    g[i] = static_cast<float>((lp - lm) / (static_cast<double>(up) - static_cast<double>(down)));
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double rel_error(const Tensor& a, const Tensor& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    diff += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom < 1e-12 ? 0.0 : std::sqrt(diff) / denom;
}

}  // namespace blockprop::testing
