#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "pointdiff/point.hpp"

namespace pointdiff {

/// Static 3-D KD-tree over a borrowed point array.
///
/// Distances are computed with squared_distance(), so the value returned
/// by nearest() is bitwise identical to a brute-force scan. Equal-distance
/// candidates resolve to the lowest index.
class KdTree {
 public:
  struct Hit {
    std::size_t index;
    double squared_distance;
  };

  explicit KdTree(std::span<const Point> points, std::size_t leaf_size = 8);

  Hit nearest(const Point& query) const;
  std::size_t size() const noexcept { return points_.size(); }

 private:
  struct Node {
    std::size_t begin, end;  // range into order_
    int axis = -1;           // -1 for leaves
    double split = 0.0;
    std::size_t left = 0, right = 0;
  };

  std::size_t build(std::size_t begin, std::size_t end);
  void search(std::size_t node, const Point& q, Hit& best) const;

  std::span<const Point> points_;
  std::size_t leaf_size_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace pointdiff
