#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "pointdiff/point.hpp"

namespace pointdiff {

// Nearest-neighbour backend. All three give bitwise-identical results.
enum class NnMethod { Auto, Brute, BruteParallel, KdTree };

// mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2
double chamfer_l2(const PointCloud& a, const PointCloud& b, NnMethod method = NnMethod::Auto);
// max of the two directed max-min Euclidean distances
double hausdorff(const PointCloud& a, const PointCloud& b, NnMethod method = NnMethod::Auto);

// Mean over references of the best chamfer match among the generated clouds.
double mmd_cd(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref);
// Mean over generated clouds of the chamfer distance to their nearest reference.
double one_nn_cd(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref);
// Jensen-Shannon divergence (natural log) between the pooled voxel
// occupancy of each set over [-0.5, 0.5]^3.
double jsd(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref,
           std::size_t grid_resolution = 32);
// Voxel histogram used by jsd(), normalized to a probability vector.
std::vector<double> occupancy(const std::vector<PointCloud>& clouds, std::size_t grid_resolution);
double jsd_of(const std::vector<double>& p, const std::vector<double>& q);

struct ItemScore {
  std::string id;
  double cd;
  double hd;
};

struct MetricReport {
  double mmd_cd = 0;
  double one_nn_cd = 0;
  double jsd = 0;
  double hd = 0;
  std::vector<ItemScore> per_item;
};

struct EvalConfig {
  std::size_t grid_resolution = 32;
  // Paired: gen[i] is scored against ref[i] for the per-item rows and HD.
  // Unpaired: each generated cloud is scored against its nearest reference.
  bool paired = true;
};

MetricReport evaluate(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref,
                      const EvalConfig& config = {}, const std::vector<std::string>& ids = {});

// One row per item (id, cd, hd) then a summary row; values in %.17e.
std::string report_csv(const MetricReport& report);

}  // namespace pointdiff
