#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace pointdiff {

using Point = std::array<double, 3>;

struct PointCloud {
  std::vector<Point> points;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  const Point& operator[](std::size_t i) const { return points[i]; }
  Point& operator[](std::size_t i) { return points[i]; }

  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

// Fixed evaluation order; every nearest-neighbour path in the library goes
// through this so accelerated and brute-force results agree bitwise.
inline double squared_distance(const Point& a, const Point& b) noexcept {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

inline Point operator+(const Point& a, const Point& b) noexcept {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}

inline Point operator-(const Point& a, const Point& b) noexcept {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

}  // namespace pointdiff
