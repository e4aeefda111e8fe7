#include "pointdiff/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "pointdiff/errors.hpp"
#include "pointdiff/kernels.hpp"

namespace pointdiff {

std::size_t MaskSpec::num_masked() const {
  return static_cast<std::size_t>(std::count(indicator.begin(), indicator.end(), true));
}

std::vector<std::size_t> MaskSpec::masked_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < indicator.size(); ++i)
    if (indicator[i]) out.push_back(i);
  return out;
}

std::vector<std::size_t> MaskSpec::visible_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < indicator.size(); ++i)
    if (!indicator[i]) out.push_back(i);
  return out;
}

std::size_t masked_count(std::size_t groups, double ratio) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(groups) + 0.5));
}

std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t k, std::size_t seed_index) {
  if (cloud.empty()) throw InvalidArgument("fps: empty cloud");
  if (k == 0 || k > cloud.size())
    throw InvalidArgument("fps: k=" + std::to_string(k) + " outside [1, " +
                          std::to_string(cloud.size()) + "]");
  if (seed_index >= cloud.size()) throw InvalidArgument("fps: seed index out of range");
  return kernels::omp::farthest_points(cloud.points, k, seed_index);
}

std::vector<std::vector<std::size_t>> knn_group(const PointCloud& cloud,
                                                std::span<const Point> centers,
                                                std::size_t group_size) {
  if (group_size == 0 || group_size > cloud.size())
    throw InvalidArgument("knn_group: group_size=" + std::to_string(group_size) +
                          " exceeds cloud size " + std::to_string(cloud.size()));
  return kernels::omp::k_nearest(cloud.points, centers, group_size);
}

PatchSet segment(const PointCloud& cloud, std::size_t groups, std::size_t group_size) {
  const auto center_idx = fps(cloud, groups, 0);
  PatchSet out;
  out.group_size = group_size;
  out.centers.reserve(groups);
  for (auto i : center_idx) out.centers.push_back(cloud[i]);
  out.source = knn_group(cloud, out.centers, group_size);
  out.patches.resize(groups);
  out.absolute.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    auto& rel = out.patches[g];
    auto& abs = out.absolute[g];
    rel.reserve(group_size);
    abs.reserve(group_size);
    for (auto i : out.source[g]) {
      abs.push_back(cloud[i]);
      rel.push_back(cloud[i] - out.centers[g]);
    }
  }
  return out;
}

namespace {

std::vector<std::size_t> nearest_chain(std::span<const Point> centers, std::size_t start,
                                       std::size_t length) {
  std::vector<char> used(centers.size(), 0);
  std::vector<std::size_t> chain{start};
  used[start] = 1;
  while (chain.size() < length) {
    const Point& tail = centers[chain.back()];
    std::size_t next = centers.size();
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < centers.size(); ++i) {
      if (used[i]) continue;
      const double d = squared_distance(tail, centers[i]);
      if (d < best) {
        best = d;
        next = i;
      }
    }
    used[next] = 1;
    chain.push_back(next);
  }
  return chain;
}

}  // namespace

MaskSpec apply_mask(std::size_t groups, double ratio, MaskStrategy strategy, std::uint64_t seed,
                    std::span<const Point> centers) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw InvalidArgument("apply_mask: ratio must be in (0,1)");
  const std::size_t m = masked_count(groups, ratio);
  if (m < 1 || m + 1 > groups)
    throw InvalidArgument("apply_mask: ratio " + std::to_string(ratio) + " masks " +
                          std::to_string(m) + " of " + std::to_string(groups) + " groups");

  MaskSpec spec;
  spec.ratio = ratio;
  spec.strategy = strategy;
  spec.indicator.assign(groups, false);
  std::mt19937_64 rng(seed);

  if (strategy == MaskStrategy::Random) {
    std::vector<std::size_t> idx(groups);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < m; ++i) spec.indicator[idx[i]] = true;
  } else {
    if (centers.size() != groups)
      throw InvalidArgument("apply_mask: block strategy needs one center per group");
    std::uniform_int_distribution<std::size_t> pick(0, groups - 1);
    for (auto i : nearest_chain(centers, pick(rng), m)) spec.indicator[i] = true;
  }
  return spec;
}

PointCloud assemble(const PatchSet& patches, const std::vector<bool>& subset,
                    std::optional<std::span<const std::vector<Point>>> override_points) {
  const std::size_t g = patches.num_groups();
  if (subset.size() != g)
    throw InvalidArgument("assemble: subset has " + std::to_string(subset.size()) +
                          " entries for " + std::to_string(g) + " patches");
  const auto selected = static_cast<std::size_t>(std::count(subset.begin(), subset.end(), true));
  if (override_points && override_points->size() != selected)
    throw InvalidArgument("assemble: override has " + std::to_string(override_points->size()) +
                          " patches, " + std::to_string(selected) + " selected");

  PointCloud out;
  std::size_t j = 0;
  for (std::size_t i = 0; i < g; ++i) {
    if (!subset[i]) continue;
    if (override_points) {
      const auto& rel = (*override_points)[j++];
      if (rel.empty()) throw InvalidArgument("assemble: empty override patch");
      for (const auto& p : rel) out.points.push_back(p + patches.centers[i]);
    } else {
      out.points.insert(out.points.end(), patches.absolute[i].begin(), patches.absolute[i].end());
    }
  }
  return out;
}

}  // namespace pointdiff
