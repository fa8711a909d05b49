#pragma once

// Measurement model A = P F S: coil weighting, unitary 2-D FFT and k-space
// sampling, its adjoint, the normal operator A^H A, and the Gaussian
// likelihood gradient used by the Langevin update.

#include "bayesrecon/domain.hpp"
#include "bayesrecon/fft.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <memory>
#include <numbers>
#include <optional>
#include <variant>
#include <vector>

namespace bayesrecon {

/// Acquired k-space samples.  samples(c * |locations| + j) is coil c at
/// flat grid location locations[j] (row-major, DC at 0).
struct KSpaceData {
  std::size_t grid_height = 0;
  std::size_t grid_width = 0;
  std::size_t coils = 0;
  std::vector<std::size_t> locations;
  ComplexVector samples;

  std::size_t count() const { return locations.size(); }

  void validate() const {
    if (static_cast<std::size_t>(samples.size()) != locations.size() * coils) {
      throw ShapeMismatch("KSpaceData: samples length != |locations| * coils");
    }
    for (std::size_t j = 0; j < locations.size(); ++j) {
      if (locations[j] >= grid_height * grid_width) throw ShapeMismatch("KSpaceData: location outside grid");
      if (j > 0 && locations[j] <= locations[j - 1]) {
        throw ShapeMismatch("KSpaceData: locations must be sorted and duplicate-free");
      }
    }
  }
};

class SamplingMask {
 public:
  /// grid is row-major in FFT order (DC at (0, 0)).  center_block, when
  /// set, asserts that the centred c x c low-frequency block is acquired.
  SamplingMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> grid,
               std::optional<std::size_t> center_block = std::nullopt)
      : height_(height), width_(width), grid_(std::move(grid)), center_block_(center_block) {
    if (grid_.size() != height_ * width_) throw ShapeMismatch("SamplingMask: grid size mismatch");
    for (auto& g : grid_) g = g ? 1 : 0;
    if (std::none_of(grid_.begin(), grid_.end(), [](std::uint8_t g) { return g != 0; })) {
      throw InvalidArgument("SamplingMask: at least one location must be acquired");
    }
    if (center_block_) {
      const std::size_t c = *center_block_;
      if (c > height_ || c > width_) throw InvalidArgument("SamplingMask: center block larger than grid");
      for_each_center_cell(height_, width_, c, [&](std::size_t r, std::size_t col) {
        if (!grid_[r * width_ + col]) throw InvalidArgument("SamplingMask: center block flag set but block not acquired");
      });
    }
  }

  static SamplingMask full(std::size_t height, std::size_t width) {
    return SamplingMask(height, width, std::vector<std::uint8_t>(height * width, 1));
  }

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  const std::vector<std::uint8_t>& grid() const { return grid_; }
  std::optional<std::size_t> center_block() const { return center_block_; }

  bool acquired(std::size_t r, std::size_t c) const { return grid_[r * width_ + c] != 0; }

  std::vector<std::size_t> locations() const {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < grid_.size(); ++k) {
      if (grid_[k]) out.push_back(k);
    }
    return out;
  }

  double acquired_fraction() const {
    const auto n = std::count(grid_.begin(), grid_.end(), std::uint8_t{1});
    return static_cast<double>(n) / static_cast<double>(grid_.size());
  }

  /// Calls fn(row, col) in FFT order for every cell of the centred c x c block.
  template <typename Fn>
  static void for_each_center_cell(std::size_t height, std::size_t width, std::size_t c, Fn&& fn) {
    for (std::size_t u = height / 2 - c / 2; u < height / 2 - c / 2 + c; ++u) {
      for (std::size_t v = width / 2 - c / 2; v < width / 2 - c / 2 + c; ++v) {
        fn((u + height - height / 2) % height, (v + width - width / 2) % width);
      }
    }
  }

 private:
  std::size_t height_;
  std::size_t width_;
  std::vector<std::uint8_t> grid_;
  std::optional<std::size_t> center_block_;
};

namespace masks {

/// Every second phase-encode line (rows 0, 2, 4, ...).
struct SkipOddEven {};

/// Fully sampled centre block plus radially weighted random outer samples
/// drawn without replacement, with a dart-throwing minimum-distance pass.
struct VariableDensity {
  std::size_t center = 20;
  double target_fraction = 0.118;
  double density_exponent = 2.0;  // weight (1 - rho)^exponent, rho = normalised radius
  double min_distance = 1.5;      // in grid cells; <= 1 disables the pass
  std::uint64_t seed = 0;
};

/// Each phase-encode line kept independently with the given probability.
/// The DC line is always kept so the mask is never empty.
struct UniformRandom {
  double probability = 0.5;
  std::uint64_t seed = 0;
};

}  // namespace masks

using MaskSpec = std::variant<masks::SkipOddEven, masks::VariableDensity, masks::UniformRandom>;

namespace detail {

inline SamplingMask make_mask(std::size_t h, std::size_t w, const masks::SkipOddEven&) {
  std::vector<std::uint8_t> grid(h * w, 0);
  for (std::size_t r = 0; r < h; r += 2) std::fill_n(grid.begin() + static_cast<std::ptrdiff_t>(r * w), w, 1);
  return SamplingMask(h, w, std::move(grid));
}

inline SamplingMask make_mask(std::size_t h, std::size_t w, const masks::UniformRandom& p) {
  if (!(p.probability > 0.0) || p.probability > 1.0) throw InvalidArgument("uniform-random: probability must lie in (0, 1]");
  RngStream rng(p.seed, 0x6d61736bULL);
  std::vector<std::uint8_t> grid(h * w, 0);
  for (std::size_t r = 0; r < h; ++r) {
    const bool keep = r == 0 || rng.uniform() < p.probability;
    if (keep) std::fill_n(grid.begin() + static_cast<std::ptrdiff_t>(r * w), w, 1);
  }
  return SamplingMask(h, w, std::move(grid));
}

inline SamplingMask make_mask(std::size_t h, std::size_t w, const masks::VariableDensity& p) {
  if (!(p.target_fraction > 0.0) || p.target_fraction > 1.0) {
    throw InvalidArgument("variable-density: target fraction must lie in (0, 1]");
  }
  if (p.center > h || p.center > w) throw InvalidArgument("variable-density: center block larger than grid");
  if (p.density_exponent < 0.0) throw InvalidArgument("variable-density: density exponent must be >= 0");

  std::vector<std::uint8_t> grid(h * w, 0);
  SamplingMask::for_each_center_cell(h, w, p.center, [&](std::size_t r, std::size_t c) { grid[r * w + c] = 1; });
  const auto center_count = static_cast<std::size_t>(std::count(grid.begin(), grid.end(), std::uint8_t{1}));
  const auto target = static_cast<std::size_t>(std::llround(p.target_fraction * static_cast<double>(h * w)));
  if (target < center_count) throw InvalidArgument("variable-density: target fraction below the centre block");
  if (target == 0) throw InvalidArgument("variable-density: target fraction too small for the grid");

  // Weighted sampling without replacement: key = log(u) / weight, largest first.
  RngStream rng(p.seed, 0x6d61736bULL);
  struct Candidate {
    double key;
    std::size_t r, c;
  };
  std::vector<Candidate> candidates;
  candidates.reserve(h * w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double u = rng.uniform();
      if (grid[r * w + c]) continue;
      const double dr = (static_cast<double>((r + h / 2) % h) - static_cast<double>(h / 2)) / (static_cast<double>(h) / 2.0);
      const double dc = (static_cast<double>((c + w / 2) % w) - static_cast<double>(w / 2)) / (static_cast<double>(w) / 2.0);
      const double rho = std::min(1.0, std::sqrt(dr * dr + dc * dc) / std::numbers::sqrt2);
      const double weight = std::pow(1.0 - rho, p.density_exponent) + 1e-3;
      candidates.push_back({std::log(std::max(u, 1e-300)) / weight, r, c});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return a.key > b.key; });

  std::size_t count = center_count;
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(p.min_distance));
  const double min_sq = p.min_distance * p.min_distance;
  auto far_enough = [&](std::size_t r, std::size_t c) {
    if (p.min_distance <= 1.0) return true;
    for (std::ptrdiff_t dr = -radius; dr <= radius; ++dr) {
      for (std::ptrdiff_t dc = -radius; dc <= radius; ++dc) {
        if (dr == 0 && dc == 0) continue;
        if (static_cast<double>(dr * dr + dc * dc) >= min_sq) continue;
        const auto rr = (static_cast<std::ptrdiff_t>(r) + dr + static_cast<std::ptrdiff_t>(h)) % static_cast<std::ptrdiff_t>(h);
        const auto cc = (static_cast<std::ptrdiff_t>(c) + dc + static_cast<std::ptrdiff_t>(w)) % static_cast<std::ptrdiff_t>(w);
        if (grid[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)]) return false;
      }
    }
    return true;
  };
  for (int pass = 0; pass < 2 && count < target; ++pass) {
    for (const auto& cand : candidates) {
      if (count >= target) break;
      auto& cell = grid[cand.r * w + cand.c];
      if (cell) continue;
      if (pass == 0 && !far_enough(cand.r, cand.c)) continue;
      cell = 1;
      ++count;
    }
  }
  std::optional<std::size_t> block;
  if (p.center > 0) block = p.center;
  return SamplingMask(h, w, std::move(grid), block);
}

}  // namespace detail

inline SamplingMask make_mask(std::size_t height, std::size_t width, const MaskSpec& spec) {
  if (height == 0 || width == 0) throw InvalidArgument("make_mask: empty grid");
  return std::visit([&](const auto& p) { return detail::make_mask(height, width, p); }, spec);
}

/// Per-coil sensitivity maps S_c with unit sum of squares on the support.
class CoilMaps {
 public:
  explicit CoilMaps(std::vector<ComplexImage> maps) : maps_(std::move(maps)) {
    if (maps_.empty()) throw InvalidArgument("CoilMaps: need at least one coil");
    for (const auto& m : maps_) maps_.front().require_same_shape(m);
    if (!sum_of_squares_ok(1e-6)) throw InvalidArgument("CoilMaps: sum of squares must be 1 on the support");
  }

  static CoilMaps unit(std::size_t height, std::size_t width) {
    return CoilMaps({ComplexImage::filled(height, width, Complex(1.0, 0.0))});
  }

  /// Scales maps to unit sum of squares wherever the sum is nonzero.
  static CoilMaps normalized(std::vector<ComplexImage> maps) {
    if (maps.empty()) throw InvalidArgument("CoilMaps: need at least one coil");
    const auto n = maps.front().data().size();
    for (Eigen::Index p = 0; p < n; ++p) {
      double sos = 0.0;
      for (const auto& m : maps) sos += std::norm(m.data()(p));
      if (sos > 0.0) {
        const double inv = 1.0 / std::sqrt(sos);
        for (auto& m : maps) m.data()(p) *= inv;
      }
    }
    return CoilMaps(std::move(maps));
  }

  std::size_t coils() const { return maps_.size(); }
  std::size_t height() const { return maps_.front().height(); }
  std::size_t width() const { return maps_.front().width(); }
  const ComplexImage& operator[](std::size_t c) const { return maps_[c]; }
  const std::vector<ComplexImage>& maps() const { return maps_; }

  bool sum_of_squares_ok(double tol) const {
    const auto n = maps_.front().data().size();
    for (Eigen::Index p = 0; p < n; ++p) {
      double sos = 0.0;
      for (const auto& m : maps_) sos += std::norm(m.data()(p));
      if (sos > 0.0 && std::abs(sos - 1.0) > tol) return false;
    }
    return true;
  }

 private:
  std::vector<ComplexImage> maps_;
};

/// Raised-cosine lobes centred at equispaced points on a circle around the
/// field of view, each with its own smooth phase, normalised to unit sum of
/// squares.
inline CoilMaps synthetic_coil_maps(std::size_t coils, std::size_t height, std::size_t width) {
  if (coils == 0 || height == 0 || width == 0) throw InvalidArgument("synthetic_coil_maps: empty request");
  if (coils == 1) return CoilMaps::unit(height, width);
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double ring = 0.6 * static_cast<double>(std::max(height, width));
  const double reach = 2.5 * ring;
  std::vector<ComplexImage> maps;
  for (std::size_t c = 0; c < coils; ++c) {
    const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(coils);
    const double py = cy + ring * std::sin(angle);
    const double px = cx + ring * std::cos(angle);
    ComplexImage m(height, width);
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t col = 0; col < width; ++col) {
        const double dy = static_cast<double>(r) - py;
        const double dx = static_cast<double>(col) - px;
        const double d = std::sqrt(dx * dx + dy * dy);
        const double lobe = 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(d / reach, 1.0))) + 1e-3;
        const double phase = angle + 0.5 * std::numbers::pi * (dx * std::cos(angle) + dy * std::sin(angle)) /
                                         static_cast<double>(std::max(height, width));
        m(r, col) = std::polar(lobe, phase);
      }
    }
    maps.push_back(std::move(m));
  }
  return CoilMaps::normalized(std::move(maps));
}

/// A linear measurement model usable by the sampler.
template <typename Op>
concept MeasurementModel = requires(const Op& op, const ComplexImage& x, const KSpaceData& y) {
  { op.apply(x) } -> std::same_as<KSpaceData>;
  { op.adjoint(y) } -> std::same_as<ComplexImage>;
  { op.normal(x) } -> std::same_as<ComplexImage>;
  { op.image_height() } -> std::convertible_to<std::size_t>;
  { op.image_width() } -> std::convertible_to<std::size_t>;
};

class ForwardOperator {
 public:
  ForwardOperator(SamplingMask mask, CoilMaps coils)
      : mask_(std::move(mask)), coils_(std::move(coils)), locations_(mask_.locations()) {
    if (mask_.height() != coils_.height() || mask_.width() != coils_.width()) {
      throw ShapeMismatch("ForwardOperator: mask and coil maps differ in shape");
    }
  }

  /// Fully sampled single unit coil: A is the unitary FFT.
  static ForwardOperator fourier(std::size_t height, std::size_t width) {
    return ForwardOperator(SamplingMask::full(height, width), CoilMaps::unit(height, width));
  }

  const SamplingMask& mask() const { return mask_; }
  const CoilMaps& coils() const { return coils_; }
  const std::vector<std::size_t>& locations() const { return locations_; }
  std::size_t image_height() const { return mask_.height(); }
  std::size_t image_width() const { return mask_.width(); }
  std::size_t measurement_size() const { return locations_.size() * coils_.coils(); }

  KSpaceData apply(const ComplexImage& x) const {
    check_image(x);
    KSpaceData y;
    y.grid_height = image_height();
    y.grid_width = image_width();
    y.coils = coils_.coils();
    y.locations = locations_;
    y.samples.resize(static_cast<Eigen::Index>(measurement_size()));
    const auto n_loc = static_cast<Eigen::Index>(locations_.size());
    for (std::size_t c = 0; c < coils_.coils(); ++c) {
      ComplexImage weighted(x.height(), x.width(), coils_[c].data().cwiseProduct(x.data()));
      const ComplexImage k = fft::forward(std::move(weighted));
      for (Eigen::Index j = 0; j < n_loc; ++j) {
        y.samples(static_cast<Eigen::Index>(c) * n_loc + j) = k.data()(static_cast<Eigen::Index>(locations_[static_cast<std::size_t>(j)]));
      }
    }
    return y;
  }

  ComplexImage adjoint(const KSpaceData& y) const {
    check_kspace(y);
    ComplexImage out(image_height(), image_width());
    const auto n_loc = static_cast<Eigen::Index>(locations_.size());
    for (std::size_t c = 0; c < coils_.coils(); ++c) {
      ComplexImage k(image_height(), image_width());
      for (Eigen::Index j = 0; j < n_loc; ++j) {
        k.data()(static_cast<Eigen::Index>(locations_[static_cast<std::size_t>(j)])) =
            y.samples(static_cast<Eigen::Index>(c) * n_loc + j);
      }
      const ComplexImage img = fft::inverse(std::move(k));
      out.data() += coils_[c].data().conjugate().cwiseProduct(img.data());
    }
    return out;
  }

  /// A^H A x without materialising the gathered samples.
  ComplexImage normal(const ComplexImage& x) const {
    check_image(x);
    ComplexImage out(image_height(), image_width());
    for (std::size_t c = 0; c < coils_.coils(); ++c) {
      ComplexImage k = fft::forward(ComplexImage(x.height(), x.width(), coils_[c].data().cwiseProduct(x.data())));
      for (std::size_t p = 0; p < mask_.grid().size(); ++p) {
        if (!mask_.grid()[p]) k.data()(static_cast<Eigen::Index>(p)) = 0.0;
      }
      const ComplexImage img = fft::inverse(std::move(k));
      out.data() += coils_[c].data().conjugate().cwiseProduct(img.data());
    }
    return out;
  }

 private:
  void check_image(const ComplexImage& x) const {
    if (x.height() != image_height() || x.width() != image_width()) {
      throw ShapeMismatch("ForwardOperator: image shape does not match coil maps");
    }
  }
  void check_kspace(const KSpaceData& y) const {
    if (y.coils != coils_.coils() || y.locations != locations_ ||
        static_cast<std::size_t>(y.samples.size()) != measurement_size()) {
      throw ShapeMismatch("ForwardOperator: k-space data does not conform to mask and coils");
    }
  }

  SamplingMask mask_;
  CoilMaps coils_;
  std::vector<std::size_t> locations_;
};

/// Explicit matrix measurement model for toys (e.g. the scalar identity).
class DenseOperator {
 public:
  DenseOperator(Eigen::MatrixXcd matrix, std::size_t height, std::size_t width)
      : matrix_(std::move(matrix)), height_(height), width_(width) {
    if (static_cast<std::size_t>(matrix_.cols()) != height_ * width_) {
      throw ShapeMismatch("DenseOperator: column count must equal image size");
    }
    if (matrix_.rows() == 0) throw InvalidArgument("DenseOperator: need at least one measurement");
    for (Eigen::Index j = 0; j < matrix_.rows(); ++j) locations_.push_back(static_cast<std::size_t>(j));
  }

  static DenseOperator identity(std::size_t height, std::size_t width) {
    const auto n = static_cast<Eigen::Index>(height * width);
    return DenseOperator(Eigen::MatrixXcd::Identity(n, n), height, width);
  }

  const Eigen::MatrixXcd& matrix() const { return matrix_; }
  std::size_t image_height() const { return height_; }
  std::size_t image_width() const { return width_; }

  KSpaceData apply(const ComplexImage& x) const {
    check_image(x);
    KSpaceData y;
    y.grid_height = static_cast<std::size_t>(matrix_.rows());
    y.grid_width = 1;
    y.coils = 1;
    y.locations = locations_;
    y.samples = matrix_ * x.data();
    return y;
  }

  ComplexImage adjoint(const KSpaceData& y) const {
    if (static_cast<Eigen::Index>(y.samples.size()) != matrix_.rows() || y.coils != 1) {
      throw ShapeMismatch("DenseOperator: measurement size mismatch");
    }
    return ComplexImage(height_, width_, matrix_.adjoint() * y.samples);
  }

  ComplexImage normal(const ComplexImage& x) const {
    check_image(x);
    return ComplexImage(height_, width_, matrix_.adjoint() * (matrix_ * x.data()));
  }

 private:
  void check_image(const ComplexImage& x) const {
    if (x.height() != height_ || x.width() != width_) throw ShapeMismatch("DenseOperator: image shape mismatch");
  }

  Eigen::MatrixXcd matrix_;
  std::size_t height_;
  std::size_t width_;
  std::vector<std::size_t> locations_;
};

/// Materialise A as a matrix by applying it to the standard basis.
template <MeasurementModel Op>
Eigen::MatrixXcd dense_matrix(const Op& op) {
  const std::size_t h = op.image_height();
  const std::size_t w = op.image_width();
  ComplexImage e(h, w);
  Eigen::MatrixXcd out;
  for (std::size_t k = 0; k < h * w; ++k) {
    e.data().setZero();
    e.data()(static_cast<Eigen::Index>(k)) = 1.0;
    const KSpaceData col = op.apply(e);
    if (k == 0) out.resize(col.samples.size(), static_cast<Eigen::Index>(h * w));
    out.col(static_cast<Eigen::Index>(k)) = col.samples;
  }
  return out;
}

/// log CN(y; A x, var I) = -||y - A x||^2 / var - M log(pi var).
template <MeasurementModel Op>
double log_likelihood(const Op& op, const ComplexImage& x, const KSpaceData& y, double noise_var) {
  if (!(noise_var > 0.0)) throw InvalidArgument("log_likelihood: variance must be positive");
  const KSpaceData ax = op.apply(x);
  const auto m = static_cast<double>(y.samples.size());
  return -(y.samples - ax.samples).squaredNorm() / noise_var - m * std::log(std::numbers::pi * noise_var);
}

/// grad log p(y | x) = -(A^H A x - A^H y) / var, in the conjugate-Wirtinger
/// convention (half the gradient with respect to (Re x, Im x)).
template <MeasurementModel Op>
ComplexImage likelihood_gradient(const Op& op, const ComplexImage& x, const KSpaceData& y, double noise_var) {
  if (!(noise_var > 0.0) || !std::isfinite(noise_var)) {
    throw InvalidArgument("likelihood_gradient: variance must be positive");
  }
  ComplexImage g = op.normal(x);
  g -= op.adjoint(y);
  g *= Complex(-1.0 / noise_var, 0.0);
  return g;
}

/// A x plus CN(0, noise_sd^2) noise per complex sample.
template <MeasurementModel Op>
KSpaceData simulate_measurement(const Op& op, const ComplexImage& x, double noise_sd, std::uint64_t seed) {
  if (noise_sd < 0.0 || !std::isfinite(noise_sd)) throw InvalidArgument("simulate_measurement: noise_sd must be >= 0");
  KSpaceData y = op.apply(x);
  if (noise_sd > 0.0) {
    RngStream rng(seed, 0x6e6f697365ULL);
    const double var = noise_sd * noise_sd;
    for (Eigen::Index k = 0; k < y.samples.size(); ++k) y.samples(k) += rng.complex_normal(var);
  }
  return y;
}

}  // namespace bayesrecon
