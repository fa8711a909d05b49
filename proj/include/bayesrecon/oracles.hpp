#pragma once

// Brute-force references for verification: grid-normalised 2-D posteriors,
// 1-D grid moments, a direct O(n^4) DFT and Monte Carlo KL estimates.  Nothing here shares
// numerical kernels with the code it checks, and nothing here is meant for
// large inputs.

#include "bayesrecon/domain.hpp"

#include <cmath>
#include <algorithm>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

namespace bayesrecon::oracles {

struct GridSpec {
  double x_min = -1.0;
  double x_max = 1.0;
  double y_min = -1.0;
  double y_max = 1.0;
  std::size_t nx = 100;
  std::size_t ny = 100;

  double dx() const { return (x_max - x_min) / static_cast<double>(nx); }
  double dy() const { return (y_max - y_min) / static_cast<double>(ny); }
  double cell_area() const { return dx() * dy(); }
  /// Centre of cell (ix, iy); x is the real part, y the imaginary part.
  Complex center(std::size_t ix, std::size_t iy) const {
    return {x_min + (static_cast<double>(ix) + 0.5) * dx(), y_min + (static_cast<double>(iy) + 0.5) * dy()};
  }
  std::optional<std::size_t> cell_of(Complex p) const {
    const double fx = (p.real() - x_min) / dx();
    const double fy = (p.imag() - y_min) / dy();
    if (!(fx >= 0.0) || !(fy >= 0.0) || fx >= static_cast<double>(nx) || fy >= static_cast<double>(ny)) {
      return std::nullopt;
    }
    return static_cast<std::size_t>(fy) * nx + static_cast<std::size_t>(fx);
  }
};

/// Density on a regular grid with sum(density) * cell_area == 1.
struct GridDensity {
  GridSpec grid;
  std::vector<double> log_density;  // normalised
  std::vector<double> density;      // normalised

  double probability(std::size_t cell) const { return density[cell] * grid.cell_area(); }

  Complex mean() const {
    Complex m = 0.0;
    for (std::size_t iy = 0; iy < grid.ny; ++iy) {
      for (std::size_t ix = 0; ix < grid.nx; ++ix) m += probability(iy * grid.nx + ix) * grid.center(ix, iy);
    }
    return m;
  }

  /// E|x - mean|^2 under the grid density.
  double complex_variance() const {
    const Complex m = mean();
    double v = 0.0;
    for (std::size_t iy = 0; iy < grid.ny; ++iy) {
      for (std::size_t ix = 0; ix < grid.nx; ++ix) v += probability(iy * grid.nx + ix) * std::norm(grid.center(ix, iy) - m);
    }
    return v;
  }
};

using LogDensity2d = std::function<double(Complex)>;

/// Pointwise prior x likelihood on the grid, normalised numerically.
inline GridDensity grid_posterior_2d(const LogDensity2d& log_prior, const LogDensity2d& log_likelihood,
                                     const GridSpec& grid) {
  if (grid.nx == 0 || grid.ny == 0 || !(grid.x_max > grid.x_min) || !(grid.y_max > grid.y_min)) {
    throw InvalidArgument("grid_posterior_2d: empty grid");
  }
  if (grid.nx * grid.ny > 4'000'000) throw InvalidArgument("grid_posterior_2d: grid too large for an oracle");
  GridDensity out;
  out.grid = grid;
  out.log_density.resize(grid.nx * grid.ny);
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t iy = 0; iy < grid.ny; ++iy) {
    for (std::size_t ix = 0; ix < grid.nx; ++ix) {
      const Complex p = grid.center(ix, iy);
      const double v = log_prior(p) + log_likelihood(p);
      out.log_density[iy * grid.nx + ix] = v;
      if (v > peak) peak = v;
    }
  }
  if (!std::isfinite(peak)) throw InvalidArgument("grid_posterior_2d: product vanishes on the whole grid");
  double total = 0.0;
  out.density.resize(out.log_density.size());
  for (std::size_t k = 0; k < out.log_density.size(); ++k) total += (out.density[k] = std::exp(out.log_density[k] - peak));
  if (!(total > 0.0)) throw InvalidArgument("grid_posterior_2d: product vanishes on the whole grid");
  const double norm = total * grid.cell_area();
  const double log_norm = peak + std::log(norm);
  for (std::size_t k = 0; k < out.density.size(); ++k) {
    out.density[k] /= norm;
    out.log_density[k] -= log_norm;
  }
  return out;
}

/// Total variation between the histogram of points and the grid
/// probabilities; points outside the grid count fully against the match.
inline double histogram_tv(const std::vector<Complex>& points, const GridDensity& density) {
  if (points.empty()) throw InvalidArgument("histogram_tv: no points");
  std::vector<double> hist(density.density.size(), 0.0);
  double outside = 0.0;
  const double w = 1.0 / static_cast<double>(points.size());
  for (const auto& p : points) {
    if (auto cell = density.grid.cell_of(p)) hist[*cell] += w; else outside += w;
  }
  double tv = outside;
  for (std::size_t k = 0; k < hist.size(); ++k) tv += std::abs(hist[k] - density.probability(k));
  return 0.5 * tv;
}

struct Moments1d {
  double mean;
  double variance;
};

/// Mean and variance of an unnormalised 1-D log density by midpoint sums.
inline Moments1d grid_moments_1d(const std::function<double(double)>& log_density, double lo, double hi,
                                 std::size_t n) {
  if (!(hi > lo) || n < 2 || n > (1u << 24)) throw InvalidArgument("grid_moments_1d: bad grid");
  const double h = (hi - lo) / static_cast<double>(n);
  std::vector<double> lp(n);
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    lp[k] = log_density(lo + (static_cast<double>(k) + 0.5) * h);
    peak = std::max(peak, lp[k]);
  }
  if (!std::isfinite(peak)) throw InvalidArgument("grid_moments_1d: density vanishes on the grid");
  double z = 0.0, m1 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double w = std::exp(lp[k] - peak);
    z += w;
    m1 += w * (lo + (static_cast<double>(k) + 0.5) * h);
  }
  const double mean = m1 / z;
  double m2 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double d = lo + (static_cast<double>(k) + 0.5) * h - mean;
    m2 += std::exp(lp[k] - peak) * d * d;
  }
  return {mean, m2 / z};
}

inline constexpr std::size_t kMaxNaiveDftSide = 16;

/// Direct unitary DFT: X[k, l] = (HW)^{-1/2} sum_{r,c} x[r, c] exp(-2 pi i (k r / H + l c / W)).
inline ComplexImage naive_dft(const ComplexImage& x) {
  if (x.height() > kMaxNaiveDftSide || x.width() > kMaxNaiveDftSide) {
    throw InvalidArgument("naive_dft: refusing images larger than 16x16");
  }
  const std::size_t h = x.height();
  const std::size_t w = x.width();
  ComplexImage out(h, w);
  const double scale = 1.0 / std::sqrt(static_cast<double>(h * w));
  for (std::size_t k = 0; k < h; ++k) {
    for (std::size_t l = 0; l < w; ++l) {
      Complex acc = 0.0;
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
          const double phase = -2.0 * std::numbers::pi *
                               (static_cast<double>((k * r) % h) / static_cast<double>(h) +
                                static_cast<double>((l * c) % w) / static_cast<double>(w));
          acc += x(r, c) * Complex(std::cos(phase), std::sin(phase));
        }
      }
      out(k, l) = scale * acc;
    }
  }
  return out;
}

struct McEstimate {
  double estimate;
  double stderr_;
};

/// Monte Carlo mean of log p(x) - log q(x) over x ~ p, with standard error.
template <typename Draw, typename LogP, typename LogQ>
McEstimate mc_kl(Draw&& draw, LogP&& log_p, LogQ&& log_q, std::size_t n) {
  if (n < 10'000) throw InvalidArgument("mc_kl: need at least 1e4 draws");
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const auto x = draw();
    const double v = log_p(x) - log_q(x);
    const double delta = v - mean;
    mean += delta / static_cast<double>(k + 1);
    m2 += delta * (v - mean);
  }
  const double var = m2 / static_cast<double>(n - 1);
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

}  // namespace bayesrecon::oracles
