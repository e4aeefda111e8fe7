#include "pointdiff/diffusion.hpp"

#include <cmath>
#include <random>
#include <string>

#include "pointdiff/errors.hpp"
#include "pointdiff/tensor.hpp"

namespace pointdiff {

NoiseSchedule build_schedule(std::size_t timesteps, double beta_start, double beta_end) {
  if (timesteps == 0) throw InvalidArgument("build_schedule: timesteps must be >= 1");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
    throw InvalidArgument("build_schedule: need 0 < beta_start < beta_end < 1");
  NoiseSchedule s;
  s.timesteps = timesteps;
  s.beta.resize(timesteps);
  s.alpha.resize(timesteps);
  s.alpha_bar.resize(timesteps);
  s.alpha_bar_prev.resize(timesteps);
  s.sigma.resize(timesteps);
  const double step = timesteps > 1 ? (beta_end - beta_start) / static_cast<double>(timesteps - 1) : 0.0;
  double running = 1.0;
  for (std::size_t t = 0; t < timesteps; ++t) {
    s.beta[t] = t + 1 == timesteps && timesteps > 1 ? beta_end
                                                     : beta_start + static_cast<double>(t) * step;
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar_prev[t] = running;
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
    s.sigma[t] = 1.0 - s.alpha_bar[t];
  }
  return s;
}

namespace {

void check_t(std::size_t t, const NoiseSchedule& s, const char* what) {
  if (t >= s.timesteps)
    throw InvalidArgument(std::string(what) + ": t=" + std::to_string(t) + " outside [0, " +
                          std::to_string(s.timesteps) + ")");
}

void check_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": length " + std::to_string(a) + " vs " + std::to_string(b));
}

}  // namespace

std::vector<double> q_sample(std::span<const double> x0, std::size_t t,
                             std::span<const double> eps, const NoiseSchedule& schedule) {
  check_t(t, schedule, "q_sample");
  check_same(x0.size(), eps.size(), "q_sample");
  const double a = std::sqrt(schedule.alpha_bar[t]);
  const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

ReverseCoefficients reverse_coefficients(std::size_t t, const NoiseSchedule& s, Residual residual) {
  check_t(t, s, "reverse_step");
  const double denom = 1.0 - s.alpha_bar[t];
  ReverseCoefficients c;
  c.on_x_t = std::sqrt(s.alpha[t]) * (1.0 - s.alpha_bar_prev[t]) / denom;
  c.on_x_rec = std::sqrt(s.alpha_bar_prev[t]) * s.beta[t] / denom;
  c.residual = t == 0 ? 0.0 : residual == Residual::SqrtSigma ? std::sqrt(s.sigma[t]) : s.sigma[t];
  return c;
}

std::vector<double> reverse_step(std::span<const double> x_t, std::size_t t,
                                 std::span<const double> x_rec, const NoiseSchedule& schedule,
                                 Residual residual) {
  check_same(x_t.size(), x_rec.size(), "reverse_step");
  const auto c = reverse_coefficients(t, schedule, residual);
  std::vector<double> out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    const double mean = c.on_x_t * x_t[i] + c.on_x_rec * x_rec[i];
    out[i] = t == 0 ? mean : mean + c.residual * x_rec[i];
  }
  return out;
}

SampleChain sample(const DenoiseFn& denoise, std::size_t values, const NoiseSchedule& schedule,
                   std::uint64_t seed, bool trace, Residual residual) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> x(values);
  for (auto& v : x) v = normal(rng);

  SampleChain chain;
  if (trace) chain.trace.reserve(schedule.timesteps);
  for (std::size_t t = schedule.timesteps; t-- > 0;) {
    const auto x_rec = denoise(x, t);
    check_same(x_rec.size(), x.size(), "sample: denoiser output");
    x = reverse_step(x, t, x_rec, schedule, residual);
    tensor::assert_finite<double>(x, "sample chain");
    if (trace) chain.trace.push_back(x);
  }
  chain.x0 = std::move(x);
  return chain;
}

}  // namespace pointdiff
