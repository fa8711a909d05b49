#pragma once

#include "bayesrecon/domain.hpp"

#include <cmath>

#include <random>

namespace testing_support {

using bayesrecon::Complex;
using bayesrecon::ComplexImage;

inline ComplexImage random_image(std::size_t h, std::size_t w, std::mt19937_64& g, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  ComplexImage x(h, w);
  for (Eigen::Index k = 0; k < x.data().size(); ++k) x.data()(k) = {n(g), n(g)};
  return x;
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

// Conjugate-Wirtinger derivative 0.5 (d/dRe + i d/dIm) of f at entry k by
// central differences.
template <typename F>
Complex wirtinger_fd(F&& f, ComplexImage x, Eigen::Index k, double h = 1e-6) {
  const Complex x0 = x.data()(k);
  x.data()(k) = x0 + Complex(h, 0.0);
  const double fr_up = f(x);
  x.data()(k) = x0 - Complex(h, 0.0);
  const double fr_dn = f(x);
  x.data()(k) = x0 + Complex(0.0, h);
  const double fi_up = f(x);
  x.data()(k) = x0 - Complex(0.0, h);
  const double fi_dn = f(x);
  return 0.5 * Complex((fr_up - fr_dn) / (2.0 * h), (fi_up - fi_dn) / (2.0 * h));
}

// Two-scale schedule and lambda for which the final-scale Langevin chain on a
// Gaussian prior (variance v) with Gaussian likelihood (variance s2) has the
// exact posterior mean as its stationary mean and as its noise-free fixed point.
struct ConjugateTuning {
  bayesrecon::NoiseSchedule schedule;
  double lambda;
};

inline ConjugateTuning conjugate_tuning(double v, double s2, double sigma1_sq) {
  const double sigma2_sq = sigma1_sq * (v + sigma1_sq) / v;
  bayesrecon::NoiseSchedule sched({std::sqrt(sigma1_sq), std::sqrt(sigma2_sq)});
  const double tau = std::sqrt(bayesrecon::tau_sq(sched, 2));
  return {std::move(sched), tau / s2};
}

// Stationary law of the scalar Langevin recursion at target scale i:
// x' = (1 - a) x + b + sqrt(gamma) z is AR(1) with mean b / a and complex
// variance gamma / (a (2 - a)).
struct Ar1Law {
  Complex mean;
  double variance;
  double a;
};

inline Ar1Law langevin_ar1(const bayesrecon::NoiseSchedule& s, std::size_t i, Complex m, double v, Complex y,
                           double sigma_eta_sq) {
  const double t2 = bayesrecon::tau_sq(s, i + 1);
  const double gamma = 2.0 * t2;
  const double cp = s.sigma_sq(i + 1) - s.sigma_sq(i);
  const double cl = gamma / (2.0 * sigma_eta_sq);
  const double a = cp / (v + s.sigma_sq(i)) + cl;
  const Complex b = cp * m / (v + s.sigma_sq(i)) + cl * y;
  return {b / a, gamma / (a * (2.0 - a)), a};
}

}  // namespace testing_support
