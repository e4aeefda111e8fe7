#include "pointdiff/kdtree.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "pointdiff/errors.hpp"

namespace pointdiff {

KdTree::KdTree(std::span<const Point> points, std::size_t leaf_size)
    : points_(points), leaf_size_(std::max<std::size_t>(leaf_size, 1)), order_(points.size()) {
  if (points.empty()) throw InvalidArgument("KdTree: empty point set");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  nodes_.reserve(2 * points.size() / leaf_size_ + 2);
  build(0, points.size());
}

std::size_t KdTree::build(std::size_t begin, std::size_t end) {
  const std::size_t id = nodes_.size();
  nodes_.push_back(Node{begin, end});
  if (end - begin <= leaf_size_) return id;

  Point lo = points_[order_[begin]], hi = lo;
  for (std::size_t i = begin; i < end; ++i) {
    const Point& p = points_[order_[i]];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  }
  int axis = 0;
  for (int a = 1; a < 3; ++a)
    if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
  if (hi[axis] == lo[axis]) return id;  // all duplicates: stay a leaf

  const std::size_t mid = begin + (end - begin) / 2;
  auto first = order_.begin() + static_cast<std::ptrdiff_t>(begin);
  std::nth_element(first, order_.begin() + static_cast<std::ptrdiff_t>(mid),
                   order_.begin() + static_cast<std::ptrdiff_t>(end),
                   [&](std::size_t x, std::size_t y) { return points_[x][axis] < points_[y][axis]; });
  const double split = points_[order_[mid]][axis];

  nodes_[id].axis = axis;
  nodes_[id].split = split;
  const std::size_t left = build(begin, mid);
  const std::size_t right = build(mid, end);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

// Left subtree holds coordinates <= split, right holds >= split.
void KdTree::search(std::size_t node_id, const Point& q, Hit& best) const {
  const Node& node = nodes_[node_id];
  if (node.axis < 0) {
    for (std::size_t i = node.begin; i < node.end; ++i) {
      const std::size_t idx = order_[i];
      const double d = squared_distance(q, points_[idx]);
      if (d < best.squared_distance || (d == best.squared_distance && idx < best.index))
        best = {idx, d};
    }
    return;
  }
  const double diff = q[node.axis] - node.split;
  const std::size_t near = diff <= 0 ? node.left : node.right;
  const std::size_t far = diff <= 0 ? node.right : node.left;
  search(near, q, best);
  if (diff * diff <= best.squared_distance) search(far, q, best);
}

KdTree::Hit KdTree::nearest(const Point& query) const {
  Hit best{std::numeric_limits<std::size_t>::max(), std::numeric_limits<double>::infinity()};
  search(0, query, best);
  return best;
}

}  // namespace pointdiff
