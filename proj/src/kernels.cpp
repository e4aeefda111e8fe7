#include "pointdiff/kernels.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include <omp.h>

namespace pointdiff::kernels {

namespace {

double nearest_one(const Point& q, std::span<const Point> refs) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& r : refs) {
    const double d = squared_distance(q, r);
    if (d < best) best = d;
  }
  return best;
}

std::size_t argmax_unselected(const std::vector<double>& dist, const std::vector<char>& taken) {
  std::size_t best = dist.size();
  double best_d = -1.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (!taken[i] && dist[i] > best_d) {
      best_d = dist[i];
      best = i;
    }
  }
  return best;
}

std::vector<std::size_t> nearest_k_of(std::span<const Point> cloud, const Point& center,
                                      std::size_t k) {
  std::vector<std::pair<double, std::size_t>> keyed(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) keyed[i] = {squared_distance(center, cloud[i]), i};
  std::partial_sort(keyed.begin(), keyed.begin() + static_cast<std::ptrdiff_t>(k), keyed.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = keyed[i].second;
  return out;
}

// Small products are not worth a parallel region; nested regions are
// avoided so batch-level parallelism in training stays in charge.
bool worth_parallel(std::size_t work) { return work >= (1u << 16) && !omp_in_parallel(); }

}  // namespace

namespace serial {

void nearest_squared(std::span<const Point> queries, std::span<const Point> refs,
                     std::span<double> out) {
  for (std::size_t i = 0; i < queries.size(); ++i) out[i] = nearest_one(queries[i], refs);
}

std::vector<std::size_t> farthest_points(std::span<const Point> cloud, std::size_t k,
                                         std::size_t seed) {
  const std::size_t n = cloud.size();
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::vector<std::size_t> order;
  order.reserve(k);
  std::size_t last = seed;
  for (std::size_t step = 0; step < k; ++step) {
    order.push_back(last);
    taken[last] = 1;
    if (step + 1 == k) break;
    for (std::size_t i = 0; i < n; ++i) dist[i] = std::min(dist[i], squared_distance(cloud[i], cloud[last]));
    last = argmax_unselected(dist, taken);
  }
  return order;
}

std::vector<std::vector<std::size_t>> k_nearest(std::span<const Point> cloud,
                                                std::span<const Point> centers,
                                                std::size_t k) {
  std::vector<std::vector<std::size_t>> out(centers.size());
  for (std::size_t c = 0; c < centers.size(); ++c) out[c] = nearest_k_of(cloud, centers[c], k);
  return out;
}

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template void matmul<float>(const float*, const float*, float*, std::size_t, std::size_t,
                            std::size_t);
template void matmul<double>(const double*, const double*, double*, std::size_t, std::size_t,
                             std::size_t);

}  // namespace serial

namespace omp {

void nearest_squared(std::span<const Point> queries, std::span<const Point> refs,
                     std::span<double> out) {
  const auto n = static_cast<std::ptrdiff_t>(queries.size());
#pragma omp parallel for schedule(static) if (worth_parallel(queries.size() * refs.size()))
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = nearest_one(queries[i], refs);
}

std::vector<std::size_t> farthest_points(std::span<const Point> cloud, std::size_t k,
                                         std::size_t seed) {
  const std::size_t n = cloud.size();
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::vector<std::size_t> order;
  order.reserve(k);
  std::size_t last = seed;
  const bool par = worth_parallel(n * k);
  for (std::size_t step = 0; step < k; ++step) {
    order.push_back(last);
    taken[last] = 1;
    if (step + 1 == k) break;
    const Point anchor = cloud[last];
#pragma omp parallel for schedule(static) if (par)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i)
      dist[i] = std::min(dist[i], squared_distance(cloud[i], anchor));
    last = argmax_unselected(dist, taken);
  }
  return order;
}

std::vector<std::vector<std::size_t>> k_nearest(std::span<const Point> cloud,
                                                std::span<const Point> centers,
                                                std::size_t k) {
  std::vector<std::vector<std::size_t>> out(centers.size());
  const auto g = static_cast<std::ptrdiff_t>(centers.size());
#pragma omp parallel for schedule(dynamic) if (worth_parallel(cloud.size() * centers.size()))
  for (std::ptrdiff_t c = 0; c < g; ++c) out[c] = nearest_k_of(cloud, centers[c], k);
  return out;
}

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (worth_parallel(m * k * n))
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    T* crow = c + i * n;
    std::fill(crow, crow + n, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template void matmul<float>(const float*, const float*, float*, std::size_t, std::size_t,
                            std::size_t);
template void matmul<double>(const double*, const double*, double*, std::size_t, std::size_t,
                             std::size_t);

}  // namespace omp

}  // namespace pointdiff::kernels
