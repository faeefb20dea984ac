#pragma once

// Shared helpers for the unit and acceptance suites: seeded generators and
// finite-difference oracles that never touch the analytic derivative code.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "cifs/tensor.hpp"

namespace cifs::testing {

template <typename Real>
Tensor<Real> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<Real> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.values()) v = static_cast<Real>(dist(rng));
  return t;
}

template <typename Real>
Tensor<Real> random_normal(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  Tensor<Real> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<Real>(dist(rng));
  return t;
}

/// Central difference (f(x + h) - f(x - h)) / 2h.
inline double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-12) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <typename Real>
double max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace cifs::testing
