#pragma once

// Shared fixtures and brute-force oracles for the unit tests.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "pointdiff/point.hpp"

namespace testing {

using pointdiff::Point;
using pointdiff::PointCloud;

inline PointCloud random_cloud(std::size_t n, std::uint64_t seed, double lo = -0.5, double hi = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.points.push_back({u(rng), u(rng), u(rng)});
  return c;
}

inline double sq(const Point& a, const Point& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline std::vector<double> nearest_sq(const PointCloud& a, const PointCloud& b) {
  std::vector<double> out;
  for (const auto& p : a.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : b.points) best = std::min(best, sq(p, q));
    out.push_back(best);
  }
  return out;
}

inline double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double chamfer(const PointCloud& a, const PointCloud& b) {
  return mean(nearest_sq(a, b)) + mean(nearest_sq(b, a));
}

inline double hausdorff(const PointCloud& a, const PointCloud& b) {
  double m = 0;
  for (double x : nearest_sq(a, b)) m = std::max(m, x);
  for (double x : nearest_sq(b, a)) m = std::max(m, x);
  return std::sqrt(m);
}

// Exhaustive greedy max-min order.
inline std::vector<std::size_t> fps(const PointCloud& c, std::size_t k, std::size_t seed) {
  std::vector<std::size_t> picked{seed};
  while (picked.size() < k) {
    std::size_t best = 0;
    double best_d = -1;
    for (std::size_t i = 0; i < c.size(); ++i) {
      double d = std::numeric_limits<double>::infinity();
      for (auto j : picked) d = std::min(d, sq(c[i], c[j]));
      if (d > best_d) {
        best_d = d;
        best = i;
      }
    }
    picked.push_back(best);
  }
  return picked;
}

inline std::vector<std::size_t> knn(const PointCloud& c, const Point& center, std::size_t k) {
  std::vector<std::size_t> idx(c.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return sq(c[a], center) < sq(c[b], center); });
  idx.resize(k);
  return idx;
}

// Moves a network's weights to a random point away from the small init.
template <typename Net>
void jitter(Net& net, double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, sd);
  for (auto& p : net.params())
    for (auto& v : p.value.data) v += n(rng);
}

}  // namespace testing
