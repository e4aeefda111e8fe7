#include <doctest.h>

#include "pointdiff/kdtree.hpp"
#include "pointdiff/kernels.hpp"
#include "support.hpp"

using namespace pointdiff;

TEST_CASE("nearest_squared: serial, omp and brute oracle agree bitwise") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto a = testing::random_cloud(50 + 13 * s, s);
    const auto b = testing::random_cloud(70 + 7 * s, 100 + s);
    std::vector<double> ser(a.size()), par(a.size());
    kernels::serial::nearest_squared(a.points, b.points, ser);
    kernels::omp::nearest_squared(a.points, b.points, par);
    const auto oracle = testing::nearest_sq(a, b);
    CHECK(ser == oracle);
    CHECK(par == oracle);
  }
}

TEST_CASE("farthest_points: both paths match the exhaustive greedy order") {
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto c = testing::random_cloud(120, s);
    const std::size_t seed = s * 11 % c.size();
    const auto oracle = testing::fps(c, 24, seed);
    CHECK(kernels::serial::farthest_points(c.points, 24, seed) == oracle);
    CHECK(kernels::omp::farthest_points(c.points, 24, seed) == oracle);
  }
}

TEST_CASE("k_nearest: both paths match a stable distance sort") {
  const auto c = testing::random_cloud(200, 3);
  const auto centers = testing::random_cloud(17, 4);
  const auto ser = kernels::serial::k_nearest(c.points, centers.points, 9);
  const auto par = kernels::omp::k_nearest(c.points, centers.points, 9);
  REQUIRE(ser.size() == 17);
  for (std::size_t i = 0; i < 17; ++i) {
    const auto oracle = testing::knn(c, centers[i], 9);
    CHECK(ser[i] == oracle);
    CHECK(par[i] == oracle);
  }
}

TEST_CASE("k_nearest ties go to the lowest index") {
  PointCloud sq{{{1, 1, 0}, {-1, 1, 0}, {-1, -1, 0}, {1, -1, 0}}};
  const Point origin{0, 0, 0};
  const auto r = kernels::omp::k_nearest(sq.points, std::span<const Point>(&origin, 1), 2);
  CHECK(r[0] == std::vector<std::size_t>{0, 1});
}

TEST_CASE_TEMPLATE("matmul: serial and omp agree bitwise with a triple loop", T, float, double) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  const std::size_t m = 37, k = 19, p = 23;
  std::vector<T> a(m * k), b(k * p), c1(m * p), c2(m * p);
  for (auto& v : a) v = static_cast<T>(n(rng));
  for (auto& v : b) v = static_cast<T>(n(rng));
  kernels::serial::matmul(a.data(), b.data(), c1.data(), m, k, p);
  kernels::omp::matmul(a.data(), b.data(), c2.data(), m, k, p);
  CHECK(c1 == c2);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      double s = 0;
      for (std::size_t q = 0; q < k; ++q) s += static_cast<double>(a[i * k + q]) * b[q * p + j];
      CHECK(static_cast<double>(c1[i * p + j]) == doctest::Approx(s).epsilon(1e-4));
    }
}

TEST_CASE("KdTree::nearest matches brute force bitwise, including ties") {
  for (std::uint64_t s = 0; s < 6; ++s) {
    auto c = testing::random_cloud(300, s);
    c.points.push_back(c[5]);  // duplicate: index 5 must win
    const KdTree tree(c.points, 4);
    const auto q = testing::random_cloud(100, 50 + s);
    for (const auto& p : q.points) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < c.size(); ++i)
        if (testing::sq(p, c[i]) < bd) {
          bd = testing::sq(p, c[i]);
          best = i;
        }
      const auto hit = tree.nearest(p);
      CHECK(hit.squared_distance == bd);
      CHECK(hit.index == best);
    }
    CHECK(tree.nearest(c[5]).index == 5);
  }
}
