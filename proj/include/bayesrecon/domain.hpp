#pragma once

// Core value types: complex images, noise schedules, sampler configuration
// and the per-chain random stream contract.

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bayesrecon {

using Complex = std::complex<double>;
using ComplexVector = Eigen::VectorXcd;
using RealVector = Eigen::VectorXd;

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexOutOfRange : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Complex-valued 2-D array stored row-major (pixel (r, c) at r * width + c).
class ComplexImage {
 public:
  ComplexImage() = default;

  ComplexImage(std::size_t height, std::size_t width)
      : height_(height), width_(width), data_(ComplexVector::Zero(static_cast<Eigen::Index>(height * width))) {}

  ComplexImage(std::size_t height, std::size_t width, ComplexVector data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (static_cast<std::size_t>(data_.size()) != height_ * width_) {
      throw ShapeMismatch("ComplexImage: data length " + std::to_string(data_.size()) + " != " +
                          std::to_string(height_) + "x" + std::to_string(width_));
    }
  }

  /// A single complex value viewed as a 1x1 image; used for 2-D point toys.
  static ComplexImage point(Complex value) {
    ComplexImage img(1, 1);
    img.data_(0) = value;
    return img;
  }

  static ComplexImage filled(std::size_t height, std::size_t width, Complex value) {
    ComplexImage img(height, width);
    img.data_.setConstant(value);
    return img;
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return height_ * width_; }

  const ComplexVector& data() const { return data_; }
  ComplexVector& data() { return data_; }

  Complex& operator()(std::size_t r, std::size_t c) { return data_(static_cast<Eigen::Index>(r * width_ + c)); }
  const Complex& operator()(std::size_t r, std::size_t c) const {
    return data_(static_cast<Eigen::Index>(r * width_ + c));
  }

  bool same_shape(const ComplexImage& other) const { return height_ == other.height_ && width_ == other.width_; }

  bool all_finite() const {
    for (Eigen::Index k = 0; k < data_.size(); ++k) {
      if (!std::isfinite(data_(k).real()) || !std::isfinite(data_(k).imag())) return false;
    }
    return true;
  }

  double norm() const { return data_.norm(); }

  RealVector magnitude() const { return data_.cwiseAbs(); }

  ComplexImage& operator+=(const ComplexImage& o) {
    require_same_shape(o);
    data_ += o.data_;
    return *this;
  }
  ComplexImage& operator-=(const ComplexImage& o) {
    require_same_shape(o);
    data_ -= o.data_;
    return *this;
  }
  ComplexImage& operator*=(Complex s) {
    data_ *= s;
    return *this;
  }

  friend ComplexImage operator+(ComplexImage a, const ComplexImage& b) { return a += b; }
  friend ComplexImage operator-(ComplexImage a, const ComplexImage& b) { return a -= b; }
  friend ComplexImage operator*(Complex s, ComplexImage a) { return a *= s; }
  friend ComplexImage operator*(double s, ComplexImage a) { return a *= Complex(s, 0.0); }

  bool operator==(const ComplexImage& o) const { return same_shape(o) && data_ == o.data_; }

  void require_same_shape(const ComplexImage& o) const {
    if (!same_shape(o)) {
      throw ShapeMismatch("image shape " + std::to_string(height_) + "x" + std::to_string(width_) + " vs " +
                          std::to_string(o.height_) + "x" + std::to_string(o.width_));
    }
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  ComplexVector data_;
};

/// Noise scales 0 = sigma_0 < sigma_1 < ... < sigma_N.  Index 0 is the
/// virtual zero scale; indices 1..N are the generated ones.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::vector<double> sigmas) : sigmas_(std::move(sigmas)) {
    if (sigmas_.empty()) throw InvalidArgument("NoiseSchedule: need at least one scale");
    double prev = 0.0;
    for (double s : sigmas_) {
      if (!std::isfinite(s) || !(s > prev)) {
        throw InvalidArgument("NoiseSchedule: scales must be finite and strictly increasing from 0");
      }
      prev = s;
    }
  }

  std::size_t size() const { return sigmas_.size(); }

  /// sigma_i for i in [0, N]; sigma(0) == 0.
  double sigma(std::size_t i) const {
    if (i > sigmas_.size()) {
      throw IndexOutOfRange("noise index " + std::to_string(i) + " outside [0, " + std::to_string(sigmas_.size()) +
                            "]");
    }
    return i == 0 ? 0.0 : sigmas_[i - 1];
  }

  double sigma_sq(std::size_t i) const {
    const double s = sigma(i);
    return s * s;
  }

  const std::vector<double>& sigmas() const { return sigmas_; }

  /// FNV-1a over the little-endian bytes of sigma_1..sigma_N.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (double s : sigmas_) {
      std::uint64_t bits = 0;
      static_assert(sizeof(bits) == sizeof(s));
      std::memcpy(&bits, &s, sizeof(bits));
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffU;
        h *= 1099511628211ULL;
      }
    }
    return h;
  }

 private:
  std::vector<double> sigmas_;
};

/// sigma_i = sigma_min * (sigma_max / sigma_min)^((i - 1) / (N - 1)), i = 1..N.
inline NoiseSchedule geometric_schedule(double sigma_min, double sigma_max, std::size_t n) {
  if (!(sigma_min > 0.0) || !(sigma_max > sigma_min) || !std::isfinite(sigma_max) || n < 2) {
    throw InvalidArgument("geometric_schedule: need 0 < sigma_min < sigma_max and N >= 2");
  }
  std::vector<double> sigmas(n);
  const double ratio = sigma_max / sigma_min;
  for (std::size_t i = 0; i < n; ++i) {
    sigmas[i] = sigma_min * std::pow(ratio, static_cast<double>(i) / static_cast<double>(n - 1));
  }
  sigmas.front() = sigma_min;
  sigmas.back() = sigma_max;
  return NoiseSchedule(std::move(sigmas));
}

/// Variance of the single-step forward posterior q(x_{i-1} | x_i, x_0):
/// (sigma_i^2 - sigma_{i-1}^2) * sigma_{i-1}^2 / sigma_i^2.  Zero at i = 1.
inline double tau_sq(const NoiseSchedule& schedule, std::size_t i) {
  if (i < 1 || i > schedule.size()) {
    throw IndexOutOfRange("tau_sq: index " + std::to_string(i) + " outside [1, " + std::to_string(schedule.size()) +
                          "]");
  }
  const double cur = schedule.sigma_sq(i);
  const double prev = schedule.sigma_sq(i - 1);
  return (cur - prev) * prev / cur;
}

enum class LikelihoodVariance {
  TauOverLambda,    // sigma_eta^2 = tau_{i+1} / lambda
  TauSqOverLambda,  // sigma_eta^2 = tau_{i+1}^2 / lambda
};

struct SamplerConfig {
  std::size_t steps_per_scale = 5;  // K
  std::size_t start_index = 0;      // N_start; 0 means "use N"
  double lambda = 1.0;
  std::size_t n_chains = 1;
  std::optional<std::size_t> split_index;  // unset or == N_start: no burn-in phase
  bool deterministic = false;
  std::uint64_t seed = 0;
  LikelihoodVariance likelihood_variance = LikelihoodVariance::TauOverLambda;
  double divergence_norm = 1e6;

  std::size_t resolved_start(const NoiseSchedule& schedule) const {
    return start_index == 0 ? schedule.size() : start_index;
  }

  void validate(const NoiseSchedule& schedule) const {
    const std::size_t n_start = resolved_start(schedule);
    if (steps_per_scale < 1) throw InvalidArgument("SamplerConfig: K must be >= 1");
    if (n_start < 1 || n_start > schedule.size()) {
      throw InvalidArgument("SamplerConfig: N_start must lie in [1, N]");
    }
    if (split_index && *split_index > n_start) {
      throw InvalidArgument("SamplerConfig: split index must lie in [0, N_start]");
    }
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw InvalidArgument("SamplerConfig: lambda must be > 0");
    if (n_chains < 1) throw InvalidArgument("SamplerConfig: need at least one chain");
  }
};

/// Independent random stream for one chain, derived from (seed, stream id).
/// Equal (seed, stream) pairs produce bit-identical draws.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      0x5eedu};
    engine_.seed(seq);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  std::mt19937_64& engine() { return engine_; }

  double normal() { return normal_(engine_); }

  double uniform() { return uniform_(engine_); }

  /// Draw from CN(0, variance): real and imaginary parts each carry variance / 2.
  Complex complex_normal(double variance = 1.0) {
    const double sd = std::sqrt(variance / 2.0);
    const double re = normal_(engine_);
    const double im = normal_(engine_);
    return {sd * re, sd * im};
  }

  ComplexImage complex_normal_image(std::size_t height, std::size_t width, double variance = 1.0) {
    ComplexImage img(height, width);
    for (Eigen::Index k = 0; k < img.data().size(); ++k) img.data()(k) = complex_normal(variance);
    return img;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Complex inner product <a, b> = sum conj(a_k) b_k.
inline Complex inner(const ComplexVector& a, const ComplexVector& b) { return a.dot(b); }

}  // namespace bayesrecon
