#pragma once

// Linear-beta noise schedule, forward corruption and the x0-predicting
// reverse sampler.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace pointdiff {

struct NoiseSchedule {
  std::size_t timesteps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;           // 1 - beta
  std::vector<double> alpha_bar;       // running product of alpha
  std::vector<double> alpha_bar_prev;  // alpha_bar shifted right, with 1 at t = 0
  std::vector<double> sigma;           // 1 - alpha_bar
};

NoiseSchedule build_schedule(std::size_t timesteps, double beta_start = 1e-4,
                             double beta_end = 0.05);

// Term added after the posterior mean for t > 0: sqrt(sigma_t) * x_rec
// (the sampler default) or sigma_t * x_rec.
enum class Residual { SqrtSigma, Sigma };

// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
std::vector<double> q_sample(std::span<const double> x0, std::size_t t,
                             std::span<const double> eps, const NoiseSchedule& schedule);

struct ReverseCoefficients {
  double on_x_t;
  double on_x_rec;
  double residual;  // 0 at t = 0
};

ReverseCoefficients reverse_coefficients(std::size_t t, const NoiseSchedule& schedule,
                                         Residual residual = Residual::SqrtSigma);

std::vector<double> reverse_step(std::span<const double> x_t, std::size_t t,
                                 std::span<const double> x_rec, const NoiseSchedule& schedule,
                                 Residual residual = Residual::SqrtSigma);

// Maps (x_t, t) to the predicted clean sample x_rec of the same length.
using DenoiseFn = std::function<std::vector<double>(std::span<const double>, std::size_t)>;

struct SampleChain {
  std::vector<double> x0;                  // final state
  std::vector<std::vector<double>> trace;  // state after every step, t = T-1 ... 0
};

// Starts from x_T ~ N(0, I) drawn from `seed` and iterates t = T-1 ... 0.
SampleChain sample(const DenoiseFn& denoise, std::size_t values, const NoiseSchedule& schedule,
                   std::uint64_t seed, bool trace = false, Residual residual = Residual::SqrtSigma);

}  // namespace pointdiff
