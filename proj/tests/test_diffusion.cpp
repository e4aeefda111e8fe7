#include <doctest.h>

#include <cmath>
#include <random>

#include "pointdiff/diffusion.hpp"
#include "pointdiff/errors.hpp"

using namespace pointdiff;

TEST_CASE("schedule endpoints and products") {
  const auto s = build_schedule(200, 1e-4, 0.05);
  CHECK(s.beta[0] == 1e-4);
  CHECK(s.beta[199] == 0.05);
  CHECK(s.alpha_bar[0] == doctest::Approx(0.9999).epsilon(1e-15));
  CHECK(s.alpha_bar_prev[0] == 1.0);
  double prod = 1.0;
  for (std::size_t t = 0; t < 200; ++t) {
    const double beta = 1e-4 + static_cast<double>(t) * (0.05 - 1e-4) / 199.0;
    CHECK(s.beta[t] == doctest::Approx(beta).epsilon(1e-14));
    prod *= 1.0 - s.beta[t];
    CHECK(std::abs(s.alpha_bar[t] - prod) < 1e-12);
    CHECK(s.sigma[t] == 1.0 - s.alpha_bar[t]);
    if (t > 0) {
      CHECK(s.beta[t] > s.beta[t - 1]);
      CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
      CHECK(s.sigma[t] > s.sigma[t - 1]);
      CHECK(s.alpha_bar_prev[t] == s.alpha_bar[t - 1]);
    }
  }
  CHECK(build_schedule(1, 1e-4, 0.05).beta.size() == 1);
  CHECK_THROWS_AS(build_schedule(0, 1e-4, 0.05), InvalidArgument);
  CHECK_THROWS_AS(build_schedule(10, 0.05, 1e-4), InvalidArgument);
  CHECK_THROWS_AS(build_schedule(10, 0.0, 0.05), InvalidArgument);
  CHECK_THROWS_AS(build_schedule(10, 1e-4, 1.0), InvalidArgument);
}

TEST_CASE("q_sample") {
  const auto s = build_schedule(200, 1e-4, 0.05);
  const std::vector<double> x0{0.3, -0.2, 0.1}, zero(3, 0.0);
  const auto a = q_sample(x0, 199, zero, s);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a[i] == std::sqrt(s.alpha_bar[199]) * x0[i]);
  CHECK_THROWS_AS(q_sample(x0, 0, std::vector<double>(2, 0.0), s), ShapeError);
  CHECK_THROWS_AS(q_sample(x0, 200, zero, s), InvalidArgument);

  // Monte-Carlo moments at a few timesteps.
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  const std::vector<double> one{0.4};
  for (std::size_t t : {0u, 99u, 199u}) {
    double m = 0, m2 = 0;
    const int draws = 20000;
    for (int k = 0; k < draws; ++k) {
      const double e = n(rng);
      const double x = q_sample(one, t, std::span<const double>(&e, 1), s)[0];
      m += x;
      m2 += x * x;
    }
    m /= draws;
    const double sd = std::sqrt(m2 / draws - m * m);
    const double want_m = std::sqrt(s.alpha_bar[t]) * 0.4, want_sd = std::sqrt(1 - s.alpha_bar[t]);
    CHECK(std::abs(m - want_m) < 0.03 * std::max(want_m, want_sd));
    CHECK(std::abs(sd - want_sd) < 0.03 * want_sd);
  }
}

TEST_CASE("reverse step coefficients") {
  const auto s = build_schedule(50, 1e-4, 0.05);
  const std::vector<double> xt{0.7, -1.1}, xr{0.2, 0.5};
  const auto z = reverse_step(xt, 0, xr, s);
  for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(z[i] - xr[i]) < 1e-12 * std::abs(xr[i]));
  CHECK(reverse_coefficients(0, s).residual == 0.0);

  for (auto r : {Residual::SqrtSigma, Residual::Sigma}) {
    for (std::size_t t : {1u, 17u, 49u}) {
      const double ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1], beta = s.beta[t];
      const double c1 = std::sqrt(1 - beta) * (1 - abp) / (1 - ab);
      const double c2 = std::sqrt(abp) * beta / (1 - ab);
      const double res = r == Residual::SqrtSigma ? std::sqrt(1 - ab) : 1 - ab;
      const std::vector<double> x{0.37};
      const auto out = reverse_step(x, t, x, s, r);
      CHECK(out[0] == doctest::Approx((c1 + c2 + res) * 0.37).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(reverse_step(xt, 0, std::vector<double>(3, 0.0), s), ShapeError);
}

TEST_CASE("sampler") {
  const auto s = build_schedule(200, 1e-4, 0.05);
  const std::vector<double> x0{0.1, 0.2, -0.3, 0.05, 0.0, 0.4};
  const DenoiseFn oracle = [&](std::span<const double>, std::size_t) { return x0; };
  const auto chain = sample(oracle, x0.size(), s, 3, true);
  CHECK(chain.trace.size() == 200);
  for (std::size_t i = 0; i < x0.size(); ++i) CHECK(std::abs(chain.x0[i] - x0[i]) < 1e-6);
  CHECK(sample(oracle, x0.size(), s, 3).x0 == chain.x0);

  // Bounded random denoiser: the chain stays finite.
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-10, 10);
  const DenoiseFn wild = [&](std::span<const double> x, std::size_t) {
    std::vector<double> out(x.size());
    for (auto& v : out) v = u(rng);
    return out;
  };
  for (auto r : {Residual::SqrtSigma, Residual::Sigma}) {
    const auto c = sample(wild, 30, s, 4, true, r);
    for (const auto& step : c.trace)
      for (double v : step) CHECK(std::isfinite(v));
  }

  const DenoiseFn wrong = [](std::span<const double>, std::size_t) { return std::vector<double>(2, 0.0); };
  CHECK_THROWS_AS(sample(wrong, 3, s, 0), ShapeError);
}
