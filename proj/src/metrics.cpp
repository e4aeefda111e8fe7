#include "pointdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "pointdiff/errors.hpp"
#include "pointdiff/kdtree.hpp"
#include "pointdiff/kernels.hpp"

namespace pointdiff {

namespace {

// Below this many pair evaluations a brute-force scan beats building a tree.
constexpr std::size_t kTreeThreshold = 1u << 14;

std::vector<double> nearest_squared(const PointCloud& from, const PointCloud& to, NnMethod method) {
  std::vector<double> out(from.size());
  if (method == NnMethod::Auto)
    method = from.size() * to.size() < kTreeThreshold ? NnMethod::Brute : NnMethod::KdTree;
  switch (method) {
    case NnMethod::Brute:
      kernels::serial::nearest_squared(from.points, to.points, out);
      break;
    case NnMethod::BruteParallel:
      kernels::omp::nearest_squared(from.points, to.points, out);
      break;
    default: {
      const KdTree tree(to.points);
      const auto n = static_cast<std::ptrdiff_t>(from.size());
#pragma omp parallel for schedule(static) if (n > 4096)
      for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = tree.nearest(from[i]).squared_distance;
    }
  }
  return out;
}

void require_non_empty(const PointCloud& a, const PointCloud& b, const char* what) {
  if (a.empty() || b.empty()) throw InvalidArgument(std::string(what) + ": empty cloud");
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double max_of(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m = std::max(m, x);
  return m;
}

// cd[i][j] = chamfer_l2(gen[i], ref[j])
std::vector<std::vector<double>> cd_matrix(const std::vector<PointCloud>& gen,
                                           const std::vector<PointCloud>& ref) {
  if (gen.empty() || ref.empty()) throw InvalidArgument("metric: empty cloud set");
  std::vector<std::vector<double>> m(gen.size(), std::vector<double>(ref.size()));
  const auto total = static_cast<std::ptrdiff_t>(gen.size() * ref.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t k = 0; k < total; ++k) {
    const auto i = static_cast<std::size_t>(k) / ref.size(), j = static_cast<std::size_t>(k) % ref.size();
    m[i][j] = chamfer_l2(gen[i], ref[j]);
  }
  return m;
}

double mmd_from(const std::vector<std::vector<double>>& cd) {
  double s = 0;
  for (std::size_t j = 0; j < cd[0].size(); ++j) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& row : cd) best = std::min(best, row[j]);
    s += best;
  }
  return s / static_cast<double>(cd[0].size());
}

double one_nn_from(const std::vector<std::vector<double>>& cd) {
  double s = 0;
  for (const auto& row : cd) s += *std::min_element(row.begin(), row.end());
  return s / static_cast<double>(cd.size());
}

}  // namespace

double chamfer_l2(const PointCloud& a, const PointCloud& b, NnMethod method) {
  require_non_empty(a, b, "chamfer_l2");
  return mean_of(nearest_squared(a, b, method)) + mean_of(nearest_squared(b, a, method));
}

double hausdorff(const PointCloud& a, const PointCloud& b, NnMethod method) {
  require_non_empty(a, b, "hausdorff");
  return std::sqrt(std::max(max_of(nearest_squared(a, b, method)), max_of(nearest_squared(b, a, method))));
}

double mmd_cd(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref) {
  return mmd_from(cd_matrix(gen, ref));
}

double one_nn_cd(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref) {
  return one_nn_from(cd_matrix(gen, ref));
}

std::vector<double> occupancy(const std::vector<PointCloud>& clouds, std::size_t res) {
  if (res == 0) throw InvalidArgument("occupancy: grid resolution must be positive");
  std::vector<double> hist(res * res * res, 0.0);
  std::size_t total = 0;
  for (std::size_t c = 0; c < clouds.size(); ++c) {
    for (std::size_t i = 0; i < clouds[c].size(); ++i) {
      std::size_t cell[3];
      for (int k = 0; k < 3; ++k) {
        const double v = clouds[c][i][k];
        if (!(v >= -0.5 && v <= 0.5)) {
          std::ostringstream os;
          os << "jsd: cloud " << c << " point " << i << " coordinate " << k << " = " << v
             << " outside [-0.5, 0.5]";
          throw InvalidArgument(os.str());
        }
        cell[k] = std::min(res - 1, static_cast<std::size_t>((v + 0.5) * static_cast<double>(res)));
      }
      hist[(cell[0] * res + cell[1]) * res + cell[2]] += 1.0;
      ++total;
    }
  }
  if (total == 0) throw InvalidArgument("occupancy: no points");
  for (auto& h : hist) h /= static_cast<double>(total);
  return hist;
}

double jsd_of(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw InvalidArgument("jsd: histogram size mismatch");
  double kl_p = 0, kl_q = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) kl_p += p[i] * std::log(p[i] / m);
    if (q[i] > 0) kl_q += q[i] * std::log(q[i] / m);
  }
  return std::max(0.0, 0.5 * kl_p + 0.5 * kl_q);
}

double jsd(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref,
           std::size_t grid_resolution) {
  return jsd_of(occupancy(gen, grid_resolution), occupancy(ref, grid_resolution));
}

MetricReport evaluate(const std::vector<PointCloud>& gen, const std::vector<PointCloud>& ref,
                      const EvalConfig& config, const std::vector<std::string>& ids) {
  if (config.paired && gen.size() != ref.size())
    throw InvalidArgument("evaluate: paired evaluation needs equal set sizes (" +
                          std::to_string(gen.size()) + " vs " + std::to_string(ref.size()) + ")");
  if (!ids.empty() && ids.size() != gen.size())
    throw InvalidArgument("evaluate: one id per generated cloud required");
  const auto cd = cd_matrix(gen, ref);
  MetricReport r;
  r.mmd_cd = mmd_from(cd);
  r.one_nn_cd = one_nn_from(cd);
  r.jsd = jsd(gen, ref, config.grid_resolution);
  double hd_sum = 0;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    std::size_t j = i;
    if (!config.paired)
      j = static_cast<std::size_t>(std::min_element(cd[i].begin(), cd[i].end()) - cd[i].begin());
    const double h = hausdorff(gen[i], ref[j]);
    hd_sum += h;
    r.per_item.push_back({ids.empty() ? std::to_string(i) : ids[i], cd[i][j], h});
  }
  r.hd = hd_sum / static_cast<double>(gen.size());
  return r;
}

std::string report_csv(const MetricReport& report) {
  std::string out = "id,cd,hd\n";
  char buf[128];
  for (const auto& it : report.per_item) {
    std::snprintf(buf, sizeof buf, ",%.17e,%.17e\n", it.cd, it.hd);
    out += it.id + buf;
  }
  out += "mmd_cd,one_nn_cd,jsd,hd\n";
  std::snprintf(buf, sizeof buf, "%.17e,%.17e,%.17e,%.17e\n", report.mmd_cd, report.one_nn_cd,
                report.jsd, report.hd);
  out += buf;
  return out;
}

}  // namespace pointdiff
