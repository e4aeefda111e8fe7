#pragma once

// Data-parallel inner loops. Each kernel has a serial reference under
// kernels::serial and an OpenMP version under kernels::omp; the two produce
// bitwise-identical results (per-element arithmetic order never depends on
// the thread split, reductions are done serially afterwards).

#include <cstddef>
#include <span>
#include <vector>

#include "pointdiff/point.hpp"

namespace pointdiff::kernels {

namespace serial {

// out[i] = min_j squared_distance(queries[i], refs[j])
void nearest_squared(std::span<const Point> queries, std::span<const Point> refs,
                     std::span<double> out);

// Greedy farthest-point order starting at seed; ties go to the lowest index.
std::vector<std::size_t> farthest_points(std::span<const Point> cloud, std::size_t k,
                                         std::size_t seed);

// For every center, the k nearest cloud indices in (distance, index) order.
std::vector<std::vector<std::size_t>> k_nearest(std::span<const Point> cloud,
                                                std::span<const Point> centers,
                                                std::size_t k);

// c[m x n] = a[m x k] * b[k x n], row-major. c is overwritten.
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

}  // namespace serial

namespace omp {

void nearest_squared(std::span<const Point> queries, std::span<const Point> refs,
                     std::span<double> out);

std::vector<std::size_t> farthest_points(std::span<const Point> cloud, std::size_t k,
                                         std::size_t seed);

std::vector<std::vector<std::size_t>> k_nearest(std::span<const Point> cloud,
                                                std::span<const Point> centers,
                                                std::size_t k);

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

}  // namespace omp

}  // namespace pointdiff::kernels
