#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "mixsga/tensor.hpp"

namespace testing {

template <typename T = double>
mixsga::Tensor<T> uniform(mixsga::Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0,
                          bool requires_grad = false) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(mixsga::numel_of(shape));
  for (auto& x : v) x = static_cast<T>(d(rng));
  return mixsga::Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T = double>
mixsga::Tensor<T> normal(mixsga::Shape shape, std::mt19937_64& rng, double stddev,
                         bool requires_grad = false) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<T> v(mixsga::numel_of(shape));
  for (auto& x : v) x = static_cast<T>(d(rng));
  return mixsga::Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

// max |a - b| / max |b|, with b the reference.
template <typename A, typename B>
double max_rel_diff(const A& a, const B& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    scale = std::max(scale, std::abs(static_cast<double>(b[i])));
  }
  return scale > 0.0 ? diff / scale : diff;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  double diff = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return diff;
}

inline std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace testing
