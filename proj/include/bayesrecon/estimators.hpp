#pragma once

// Sample-set statistics (MMSE, variance and confidence maps), image quality
// metrics, and closed forms for Gaussian KL and the forward-process
// posterior.

#include "bayesrecon/domain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace bayesrecon {

class SampleSet {
 public:
  explicit SampleSet(std::vector<ComplexImage> samples, std::uint64_t seed = 0, std::uint64_t config_hash = 0)
      : samples_(std::move(samples)), seed_(seed), config_hash_(config_hash) {
    if (samples_.empty()) throw InvalidArgument("SampleSet: need at least one sample");
    for (const auto& s : samples_) samples_.front().require_same_shape(s);
  }

  std::size_t count() const { return samples_.size(); }
  std::size_t height() const { return samples_.front().height(); }
  std::size_t width() const { return samples_.front().width(); }
  const std::vector<ComplexImage>& samples() const { return samples_; }
  const ComplexImage& operator[](std::size_t k) const { return samples_[k]; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t config_hash() const { return config_hash_; }

 private:
  std::vector<ComplexImage> samples_;
  std::uint64_t seed_;
  std::uint64_t config_hash_;
};

/// Elementwise complex mean of the samples.
inline ComplexImage mmse(const SampleSet& set) {
  ComplexImage acc(set.height(), set.width());
  for (const auto& s : set.samples()) acc += s;
  acc *= Complex(1.0 / static_cast<double>(set.count()), 0.0);
  return acc;
}

struct UncertaintyMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t count = 0;
  RealVector mean_magnitude;
  RealVector variance;         // unbiased sample variance of |x|
  RealVector ci_half_width;    // 1.96 sqrt(variance / count)
};

/// Per-pixel statistics of sample magnitudes.  Needs at least two samples.
inline UncertaintyMap variance_map(const SampleSet& set) {
  if (set.count() < 2) throw InvalidArgument("variance_map: need at least two samples");
  const auto n = static_cast<Eigen::Index>(set.height() * set.width());
  const double count = static_cast<double>(set.count());
  UncertaintyMap out;
  out.height = set.height();
  out.width = set.width();
  out.count = set.count();
  out.mean_magnitude = RealVector::Zero(n);
  for (const auto& s : set.samples()) out.mean_magnitude += s.magnitude();
  out.mean_magnitude /= count;
  out.variance = RealVector::Zero(n);
  for (const auto& s : set.samples()) out.variance += (s.magnitude() - out.mean_magnitude).cwiseAbs2();
  out.variance /= count - 1.0;
  out.ci_half_width = (1.96 * (out.variance / count).cwiseSqrt());
  return out;
}

/// Unbiased per-pixel complex variance E|x - mean|^2.
inline RealVector complex_variance(const SampleSet& set) {
  if (set.count() < 2) throw InvalidArgument("complex_variance: need at least two samples");
  const ComplexImage mean = mmse(set);
  RealVector acc = RealVector::Zero(mean.data().size());
  for (const auto& s : set.samples()) acc += (s.data() - mean.data()).cwiseAbs2();
  return acc / (static_cast<double>(set.count()) - 1.0);
}

/// 8-bit overlay: 255 where the CI half-width reaches the given percentile
/// of all half-widths, 0 elsewhere.
inline std::vector<std::uint8_t> ci_overlay(const UncertaintyMap& map, double percentile) {
  if (!(percentile >= 0.0 && percentile <= 100.0)) throw InvalidArgument("ci_overlay: percentile must lie in [0, 100]");
  std::vector<double> sorted(map.ci_half_width.data(), map.ci_half_width.data() + map.ci_half_width.size());
  std::sort(sorted.begin(), sorted.end());
  const auto rank = static_cast<std::size_t>(
      std::floor(percentile / 100.0 * static_cast<double>(sorted.size() - 1)));
  const double threshold = sorted[rank];
  std::vector<std::uint8_t> out(sorted.size());
  for (Eigen::Index k = 0; k < map.ci_half_width.size(); ++k) {
    out[static_cast<std::size_t>(k)] = map.ci_half_width(k) >= threshold && map.ci_half_width(k) > 0.0 ? 255 : 0;
  }
  return out;
}

enum class RangePolicy { PerSliceMax, Fixed };

struct MetricOptions {
  bool normalize_l2 = true;
  RangePolicy range = RangePolicy::PerSliceMax;
  double fixed_range = 1.0;
};

namespace detail {

inline std::pair<RealVector, RealVector> prepare(const RealVector& x, const RealVector& ref, const MetricOptions& opt) {
  if (x.size() != ref.size() || x.size() == 0) throw ShapeMismatch("metric: images must share a nonzero shape");
  if (!opt.normalize_l2) return {x, ref};
  const double nx = x.norm();
  const double nr = ref.norm();
  return {nx > 0.0 ? RealVector(x / nx) : x, nr > 0.0 ? RealVector(ref / nr) : ref};
}

inline double data_range(const RealVector& ref, const MetricOptions& opt) {
  return opt.range == RangePolicy::Fixed ? opt.fixed_range : ref.maxCoeff();
}

}  // namespace detail

inline double psnr_from_mse(double range, double mse) {
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(range * range / mse);
}

/// PSNR in dB of magnitude images; +inf when the images are identical.
inline double psnr(const RealVector& x, const RealVector& ref, const MetricOptions& opt = {}) {
  const auto [a, b] = detail::prepare(x, ref, opt);
  const double mse = (a - b).squaredNorm() / static_cast<double>(a.size());
  return psnr_from_mse(detail::data_range(b, opt), mse);
}

inline double psnr(const ComplexImage& x, const ComplexImage& ref, const MetricOptions& opt = {}) {
  ref.require_same_shape(x);
  return psnr(x.magnitude(), ref.magnitude(), opt);
}

inline constexpr std::size_t kSsimWindow = 7;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Mean SSIM over all 7x7 uniform windows fully inside the image
/// (population statistics per window).
inline double ssim(const RealVector& x, const RealVector& ref, std::size_t height, std::size_t width,
                   const MetricOptions& opt = {}) {
  if (static_cast<std::size_t>(x.size()) != height * width) throw ShapeMismatch("ssim: shape mismatch");
  if (height < kSsimWindow || width < kSsimWindow) throw InvalidArgument("ssim: image smaller than the 7x7 window");
  const auto [a, b] = detail::prepare(x, ref, opt);
  const double range = detail::data_range(b, opt);
  const double c1 = (kSsimK1 * range) * (kSsimK1 * range);
  const double c2 = (kSsimK2 * range) * (kSsimK2 * range);

  // Summed-area tables of a, b, a^2, b^2, ab with a zero border.
  const std::size_t w1 = width + 1;
  std::vector<double> sa((height + 1) * w1, 0.0), sb(sa), saa(sa), sbb(sa), sab(sa);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double va = a(static_cast<Eigen::Index>(r * width + c));
      const double vb = b(static_cast<Eigen::Index>(r * width + c));
      const std::size_t k = (r + 1) * w1 + (c + 1);
      const std::size_t up = r * w1 + (c + 1), left = (r + 1) * w1 + c, diag = r * w1 + c;
      sa[k] = va + sa[up] + sa[left] - sa[diag];
      sb[k] = vb + sb[up] + sb[left] - sb[diag];
      saa[k] = va * va + saa[up] + saa[left] - saa[diag];
      sbb[k] = vb * vb + sbb[up] + sbb[left] - sbb[diag];
      sab[k] = va * vb + sab[up] + sab[left] - sab[diag];
    }
  }
  auto box = [&](const std::vector<double>& s, std::size_t r, std::size_t c) {
    const std::size_t r2 = r + kSsimWindow, c2w = c + kSsimWindow;
    return s[r2 * w1 + c2w] - s[r * w1 + c2w] - s[r2 * w1 + c] + s[r * w1 + c];
  };
  const double n = static_cast<double>(kSsimWindow * kSsimWindow);
  double total = 0.0;
  std::size_t windows = 0;
  for (std::size_t r = 0; r + kSsimWindow <= height; ++r) {
    for (std::size_t c = 0; c + kSsimWindow <= width; ++c) {
      const double mx = box(sa, r, c) / n;
      const double my = box(sb, r, c) / n;
      const double vx = std::max(0.0, box(saa, r, c) / n - mx * mx);
      const double vy = std::max(0.0, box(sbb, r, c) / n - my * my);
      const double cxy = box(sab, r, c) / n - mx * my;
      total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

inline double ssim(const ComplexImage& x, const ComplexImage& ref, const MetricOptions& opt = {}) {
  ref.require_same_shape(x);
  return ssim(x.magnitude(), ref.magnitude(), x.height(), x.width(), opt);
}

/// KL(CN(mu1, s1^2 I) || CN(mu2, s2^2 I)) with np real dimensions
/// (np / 2 complex entries):
///   np log(s2 / s1) + (np / 2) (s1^2 / s2^2 - 1) + |mu1 - mu2|^2 / s2^2.
/// For a single complex entry (np = 2) this is
///   np log(s2 / s1) + (s1^2 + |mu1 - mu2|^2) / s2^2 - 1.
inline double kl_gaussians(const ComplexVector& mu1, double sigma1, const ComplexVector& mu2, double sigma2,
                           std::size_t np) {
  if (!(sigma1 > 0.0) || !(sigma2 > 0.0)) throw InvalidArgument("kl_gaussians: sigmas must be positive");
  if (mu1.size() != mu2.size()) throw ShapeMismatch("kl_gaussians: mean dimension mismatch");
  if (np != 2 * static_cast<std::size_t>(mu1.size())) {
    throw ShapeMismatch("kl_gaussians: np must equal twice the complex dimension");
  }
  const double d = static_cast<double>(np);
  const double ratio = (sigma1 * sigma1) / (sigma2 * sigma2);
  const double kl = d * std::log(sigma2 / sigma1) + 0.5 * d * (ratio - 1.0) + (mu1 - mu2).squaredNorm() / (sigma2 * sigma2);
  return std::max(kl, 0.0);
}

struct ForwardPosterior {
  ComplexImage mean;
  double variance;
};

/// q(x_{i-1} | x_i, x_0) = CN(c x_i + (1 - c) x_0, tau_i^2 I), c = sigma_{i-1}^2 / sigma_i^2.
inline ForwardPosterior forward_posterior_params(const NoiseSchedule& schedule, std::size_t i, const ComplexImage& x_i,
                                                 const ComplexImage& x_0) {
  if (i < 1 || i > schedule.size()) throw IndexOutOfRange("forward_posterior_params: index outside [1, N]");
  x_i.require_same_shape(x_0);
  const double c = schedule.sigma_sq(i - 1) / schedule.sigma_sq(i);
  ComplexImage mean(x_i.height(), x_i.width(), c * x_i.data() + (1.0 - c) * x_0.data());
  return {std::move(mean), tau_sq(schedule, i)};
}

/// x_i = x_0 + CN(0, sigma_i^2 I) in one draw.
inline ComplexImage perturb_single_shot(const NoiseSchedule& schedule, std::size_t i, const ComplexImage& x_0,
                                        RngStream& rng) {
  if (i > schedule.size()) throw IndexOutOfRange("perturb_single_shot: index outside [0, N]");
  ComplexImage out = x_0;
  for (Eigen::Index k = 0; k < out.data().size(); ++k) out.data()(k) += rng.complex_normal(schedule.sigma_sq(i));
  return out;
}

/// x_i from x_0 through the chain x_j = x_{j-1} + CN(0, (sigma_j^2 - sigma_{j-1}^2) I), j = 1..i.
inline ComplexImage perturb_stepwise(const NoiseSchedule& schedule, std::size_t i, const ComplexImage& x_0,
                                     RngStream& rng) {
  if (i > schedule.size()) throw IndexOutOfRange("perturb_stepwise: index outside [0, N]");
  ComplexImage out = x_0;
  for (std::size_t j = 1; j <= i; ++j) {
    const double v = schedule.sigma_sq(j) - schedule.sigma_sq(j - 1);
    for (Eigen::Index k = 0; k < out.data().size(); ++k) out.data()(k) += rng.complex_normal(v);
  }
  return out;
}

}  // namespace bayesrecon
