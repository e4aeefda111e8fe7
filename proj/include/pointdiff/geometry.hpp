#pragma once

// Segmentation of a cloud into center-anchored patches, masking, and
// reassembly.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pointdiff/point.hpp"

namespace pointdiff {

struct PatchSet {
  std::vector<Point> centers;                    // G rows
  std::vector<std::vector<Point>> patches;       // G x group_size, center-relative
  std::vector<std::vector<std::size_t>> source;  // G x group_size indices into the source cloud
  std::vector<std::vector<Point>> absolute;      // source points, kept for exact reassembly
  std::size_t group_size = 0;

  std::size_t num_groups() const noexcept { return centers.size(); }
};

enum class MaskStrategy { Random, Block };

struct MaskSpec {
  std::vector<bool> indicator;  // true = masked
  double ratio = 0.75;
  MaskStrategy strategy = MaskStrategy::Random;

  std::size_t num_groups() const noexcept { return indicator.size(); }
  std::size_t num_masked() const;
  std::size_t num_visible() const { return num_groups() - num_masked(); }
  std::vector<std::size_t> masked_indices() const;
  std::vector<std::size_t> visible_indices() const;
};

// floor(ratio * groups + 0.5)
std::size_t masked_count(std::size_t groups, double ratio);

std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t k, std::size_t seed_index = 0);

std::vector<std::vector<std::size_t>> knn_group(const PointCloud& cloud,
                                                std::span<const Point> centers,
                                                std::size_t group_size);

PatchSet segment(const PointCloud& cloud, std::size_t groups, std::size_t group_size);

// Block masking needs the patch centers; Random ignores them.
MaskSpec apply_mask(std::size_t groups, double ratio, MaskStrategy strategy, std::uint64_t seed,
                    std::span<const Point> centers = {});

// Concatenates the selected patches in ascending patch order. Without an
// override the original source points are emitted unchanged; with one,
// override[j] + center is emitted for the j-th selected patch.
PointCloud assemble(const PatchSet& patches, const std::vector<bool>& subset,
                    std::optional<std::span<const std::vector<Point>>> override_points = std::nullopt);

}  // namespace pointdiff
