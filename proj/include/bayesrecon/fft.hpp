#pragma once

// Unitary 2-D discrete Fourier transform (1/sqrt(HW) in both directions),
// DC at index (0, 0).  Backed by Eigen's FFT module.

#include "bayesrecon/domain.hpp"

#include <unsupported/Eigen/FFT>

#include <vector>

namespace bayesrecon::fft {

namespace detail {

inline Eigen::FFT<double>& engine() {
  thread_local Eigen::FFT<double> instance = [] {
    Eigen::FFT<double> f;
    f.SetFlag(Eigen::FFT<double>::Unscaled);
    return f;
  }();
  return instance;
}

inline void transform(ComplexImage& img, bool inverse) {
  const std::size_t h = img.height();
  const std::size_t w = img.width();
  auto& f = engine();
  std::vector<Complex> in;
  std::vector<Complex> out;

  // kissfft faults on length-1 transforms, which are the identity anyway
  in.resize(w);
  for (std::size_t r = 0; r < h && w > 1; ++r) {
    for (std::size_t c = 0; c < w; ++c) in[c] = img(r, c);
    if (inverse) f.inv(out, in); else f.fwd(out, in);
    for (std::size_t c = 0; c < w; ++c) img(r, c) = out[c];
  }
  in.resize(h);
  for (std::size_t c = 0; c < w && h > 1; ++c) {
    for (std::size_t r = 0; r < h; ++r) in[r] = img(r, c);
    if (inverse) f.inv(out, in); else f.fwd(out, in);
    for (std::size_t r = 0; r < h; ++r) img(r, c) = out[r];
  }
  img.data() *= 1.0 / std::sqrt(static_cast<double>(h * w));
}

}  // namespace detail

inline ComplexImage forward(ComplexImage img) {
  detail::transform(img, false);
  return img;
}

inline ComplexImage inverse(ComplexImage img) {
  detail::transform(img, true);
  return img;
}

/// Move DC from (0, 0) to (H/2, W/2) for display.
inline ComplexImage shift(const ComplexImage& img) {
  ComplexImage out(img.height(), img.width());
  for (std::size_t r = 0; r < img.height(); ++r) {
    for (std::size_t c = 0; c < img.width(); ++c) {
      out((r + img.height() / 2) % img.height(), (c + img.width() / 2) % img.width()) = img(r, c);
    }
  }
  return out;
}

}  // namespace bayesrecon::fft
