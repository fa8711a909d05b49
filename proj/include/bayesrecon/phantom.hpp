#pragma once

// Deterministic synthetic test images: sums of ellipses with a smooth phase.

#include "bayesrecon/domain.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace bayesrecon {

struct Ellipse {
  double intensity;
  double a, b;    // semi-axes in [-1, 1] image coordinates
  double x0, y0;  // centre
  double angle_deg;
};

inline const std::vector<Ellipse>& shepp_logan_ellipses() {
  static const std::vector<Ellipse> e = {
      {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},        {-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0},
      {-0.2, 0.11, 0.31, 0.22, 0.0, -18.0},    {-0.2, 0.16, 0.41, -0.22, 0.0, 18.0},
      {0.1, 0.21, 0.25, 0.0, 0.35, 0.0},       {0.1, 0.046, 0.046, 0.0, 0.1, 0.0},
      {0.1, 0.046, 0.046, 0.0, -0.1, 0.0},     {0.1, 0.046, 0.023, -0.08, -0.605, 0.0},
      {0.1, 0.023, 0.023, 0.0, -0.606, 0.0},   {0.1, 0.023, 0.046, 0.06, -0.605, 0.0},
  };
  return e;
}

inline const std::vector<Ellipse>& blob_ellipses() {
  static const std::vector<Ellipse> e = {
      {0.6, 0.55, 0.7, 0.0, 0.0, 10.0},   {0.4, 0.2, 0.3, -0.25, 0.2, -30.0},
      {-0.3, 0.15, 0.1, 0.25, -0.2, 45.0}, {0.3, 0.08, 0.08, 0.1, 0.4, 0.0},
      {0.25, 0.12, 0.05, -0.1, -0.45, 60.0},
  };
  return e;
}

inline std::vector<std::string> phantom_kinds() { return {"shepp-logan", "blobs"}; }

/// size x size phantom, magnitude normalised so that the largest is exactly 1,
/// phase a smooth ramp-plus-bump in (-pi/2, pi/2).
inline ComplexImage make_phantom(const std::string& kind, std::size_t size) {
  if (size < 16) throw InvalidArgument("make_phantom: size must be at least 16");
  const std::vector<Ellipse>* ellipses = nullptr;
  if (kind == "shepp-logan") ellipses = &shepp_logan_ellipses();
  else if (kind == "blobs") ellipses = &blob_ellipses();
  else throw InvalidArgument("make_phantom: unknown kind '" + kind + "'");

  ComplexImage img(size, size);
  const double n = static_cast<double>(size);
  double peak = 0.0;
  std::size_t peak_idx = 0;
  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const double x = (2.0 * static_cast<double>(c) + 1.0) / n - 1.0;
      const double y = 1.0 - (2.0 * static_cast<double>(r) + 1.0) / n;
      double mag = 0.0;
      for (const auto& e : *ellipses) {
        const double t = e.angle_deg * std::numbers::pi / 180.0;
        const double dx = x - e.x0, dy = y - e.y0;
        const double u = (dx * std::cos(t) + dy * std::sin(t)) / e.a;
        const double v = (-dx * std::sin(t) + dy * std::cos(t)) / e.b;
        if (u * u + v * v <= 1.0) mag += e.intensity;
      }
      mag = std::max(mag, 0.0);
      const double phase = 0.6 * x + 0.3 * y + 0.4 * std::exp(-4.0 * (x * x + y * y));
      img(r, c) = std::polar(mag, phase);
      if (mag > peak) {
        peak = mag;
        peak_idx = r * size + c;
      }
    }
  }
  if (!(peak > 0.0)) throw InvalidArgument("make_phantom: empty phantom");
  img *= Complex(1.0 / peak, 0.0);
  const Complex& p = img.data()(static_cast<Eigen::Index>(peak_idx));
  img.data()(static_cast<Eigen::Index>(peak_idx)) = std::polar(1.0, std::arg(p));
  for (Eigen::Index k = 0; k < img.data().size(); ++k) {
    if (std::abs(img.data()(k)) > 1.0) img.data()(k) = std::polar(1.0, std::arg(img.data()(k)));
  }
  return img;
}

}  // namespace bayesrecon
