#pragma once

// Noise-conditioned score networks trained by denoising score matching.
//
// Two small networks with hand-written backpropagation:
//   MlpScoreNet   fully connected, 3 hidden layers, for few-pixel toys
//   ConvScoreNet  3x3 convolutions with conditional instance normalisation,
//                 for small patches
// Inputs are packed planar: all real parts, then all imaginary parts.  The
// score is the raw network output divided by sigma_i.

#include "bayesrecon/domain.hpp"
#include "bayesrecon/io.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace bayesrecon::training {

// ---------------------------------------------------------------- packing --

inline RealVector pack(const ComplexImage& x) {
  const auto n = x.data().size();
  RealVector out(2 * n);
  out.head(n) = x.data().real();
  out.tail(n) = x.data().imag();
  return out;
}

inline ComplexImage unpack(const RealVector& v, std::size_t height, std::size_t width) {
  const auto n = static_cast<Eigen::Index>(height * width);
  if (v.size() != 2 * n) throw ShapeMismatch("unpack: packed size does not match the image shape");
  ComplexImage out(height, width);
  out.data().real() = v.head(n);
  out.data().imag() = v.tail(n);
  return out;
}

// ----------------------------------------------------------- conditioning --

enum class ConditioningMode : std::uint32_t { Discrete = 0, Fourier = 1 };

/// Discrete mode keeps learned per-scale scale/shift tables inside each
/// network; Fourier mode embeds i as [sin(2 pi i w), cos(2 pi i w)] with a
/// frozen Gaussian vector w.
class NoiseConditioning {
 public:
  static NoiseConditioning discrete(std::size_t num_scales) {
    if (num_scales < 1) throw InvalidArgument("NoiseConditioning: need at least one scale");
    NoiseConditioning c;
    c.mode_ = ConditioningMode::Discrete;
    c.num_scales_ = num_scales;
    return c;
  }

  static NoiseConditioning fourier(std::size_t num_scales, std::size_t m, double stddev, std::uint64_t seed) {
    if (m < 1) throw InvalidArgument("NoiseConditioning: embedding size must be positive");
    if (!(stddev > 0.0)) throw InvalidArgument("NoiseConditioning: standard deviation must be positive");
    RngStream rng(seed, 0xf0f0);
    RealVector w(static_cast<Eigen::Index>(m));
    for (Eigen::Index k = 0; k < w.size(); ++k) w(k) = stddev * rng.normal();
    return with_frequencies(num_scales, std::move(w));
  }

  static NoiseConditioning with_frequencies(std::size_t num_scales, RealVector w) {
    if (num_scales < 1) throw InvalidArgument("NoiseConditioning: need at least one scale");
    if (w.size() < 1) throw InvalidArgument("NoiseConditioning: embedding size must be positive");
    NoiseConditioning c;
    c.mode_ = ConditioningMode::Fourier;
    c.num_scales_ = num_scales;
    c.w_ = std::move(w);
    return c;
  }

  ConditioningMode mode() const { return mode_; }
  std::size_t num_scales() const { return num_scales_; }
  const RealVector& frequencies() const { return w_; }
  std::size_t embedding_size() const { return static_cast<std::size_t>(2 * w_.size()); }

  void check_index(std::size_t i) const {
    if (i < 1 || i > num_scales_) {
      throw IndexOutOfRange("noise conditioning: index " + std::to_string(i) + " outside [1, " +
                            std::to_string(num_scales_) + "]");
    }
  }

  RealVector embedding(std::size_t i) const {
    check_index(i);
    if (mode_ != ConditioningMode::Fourier) throw InvalidArgument("embedding: discrete conditioning has none");
    const auto m = w_.size();
    RealVector e(2 * m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(i) * w_(k);
      e(k) = std::sin(a);
      e(m + k) = std::cos(a);
    }
    return e;
  }

 private:
  NoiseConditioning() = default;
  ConditioningMode mode_ = ConditioningMode::Discrete;
  std::size_t num_scales_ = 0;
  RealVector w_;
};

// ------------------------------------------------------------- activation --

enum class Activation : std::uint32_t { Silu = 0, Identity = 1 };

namespace detail {

inline double act(Activation a, double x) {
  if (a == Activation::Identity) return x;
  return x / (1.0 + std::exp(-x));
}

inline double act_grad(Activation a, double x) {
  if (a == Activation::Identity) return 1.0;
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

inline void fill_normal(Eigen::Ref<RealVector> v, RngStream& rng, double sd) {
  for (Eigen::Index k = 0; k < v.size(); ++k) v(k) = sd * rng.normal();
}

using MatMap = Eigen::Map<Eigen::MatrixXd>;
using CMatMap = Eigen::Map<const Eigen::MatrixXd>;
using VecMap = Eigen::Map<RealVector>;
using CVecMap = Eigen::Map<const RealVector>;

}  // namespace detail

// -------------------------------------------------------------------- MLP --

class MlpScoreNet {
 public:
  MlpScoreNet(std::size_t input_size, std::vector<std::size_t> hidden, NoiseConditioning conditioning,
              NoiseSchedule schedule, Activation activation = Activation::Silu, std::uint64_t seed = 0)
      : input_(input_size), hidden_(std::move(hidden)), cond_(std::move(conditioning)),
        schedule_(std::move(schedule)), act_(activation) {
    if (input_ == 0 || input_ % 2 != 0) throw InvalidArgument("MlpScoreNet: input size must be even and positive");
    if (hidden_.empty()) throw InvalidArgument("MlpScoreNet: need at least one hidden layer");
    for (auto h : hidden_) {
      if (h == 0) throw InvalidArgument("MlpScoreNet: hidden widths must be positive");
    }
    if (cond_.num_scales() != schedule_.size()) {
      throw InvalidArgument("MlpScoreNet: conditioning and schedule disagree on N");
    }
    layout();
    initialize(seed);
  }

  std::size_t input_size() const { return input_; }
  std::size_t output_size() const { return input_; }
  const std::vector<std::size_t>& hidden() const { return hidden_; }
  const NoiseConditioning& conditioning() const { return cond_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  Activation activation() const { return act_; }
  std::size_t parameter_count() const { return static_cast<std::size_t>(params_.size()); }
  RealVector& parameters() { return params_; }
  const RealVector& parameters() const { return params_; }

  RealVector forward(const RealVector& in, std::size_t i) const {
    Cache c;
    return run(in, i, c);
  }

  /// Accumulates d(out . dout)/dparams into grad.
  void backward(const RealVector& in, std::size_t i, const RealVector& dout, RealVector& grad) const {
    Cache c;
    run(in, i, c);
    if (dout.size() != static_cast<Eigen::Index>(input_)) throw ShapeMismatch("MlpScoreNet: output gradient size");
    if (grad.size() != params_.size()) throw ShapeMismatch("MlpScoreNet: gradient size");
    const std::size_t L = hidden_.size();
    const double* p = params_.data();
    double* g = grad.data();

    detail::CMatMap wo(p + out_.w, static_cast<Eigen::Index>(input_), static_cast<Eigen::Index>(hidden_.back()));
    detail::MatMap(g + out_.w, wo.rows(), wo.cols()) += dout * c.h[L].transpose();
    detail::VecMap(g + out_.b, wo.rows()) += dout;
    RealVector dh = wo.transpose() * dout;

    for (std::size_t l = L; l-- > 0;) {
      const auto& ly = layers_[l];
      const auto rows = static_cast<Eigen::Index>(hidden_[l]);
      const auto cols = static_cast<Eigen::Index>(l == 0 ? input_ : hidden_[l - 1]);
      RealVector da(rows);
      for (Eigen::Index k = 0; k < rows; ++k) da(k) = dh(k) * detail::act_grad(act_, c.a[l](k));
      RealVector du = da;
      if (cond_.mode() == ConditioningMode::Fourier) {
        const RealVector e = cond_.embedding(i);
        detail::MatMap(g + ly.cond_a, rows, static_cast<Eigen::Index>(e.size())) += da * e.transpose();
      } else {
        const auto col = static_cast<Eigen::Index>(i - 1);
        detail::CMatMap phi(p + ly.cond_a, rows, static_cast<Eigen::Index>(cond_.num_scales()));
        detail::MatMap gphi(g + ly.cond_a, rows, phi.cols());
        detail::MatMap gomega(g + ly.cond_b, rows, phi.cols());
        gphi.col(col) += da.cwiseProduct(c.u[l]);
        gomega.col(col) += da;
        du = da.cwiseProduct(phi.col(col));
      }
      detail::CMatMap w(p + ly.w, rows, cols);
      detail::MatMap(g + ly.w, rows, cols) += du * c.h[l].transpose();
      detail::VecMap(g + ly.b, rows) += du;
      if (l > 0) dh = w.transpose() * du;
    }
  }

  /// [input, hidden...], used by checkpoints.
  std::vector<std::uint64_t> shape() const {
    std::vector<std::uint64_t> s{input_};
    for (auto h : hidden_) s.push_back(h);
    return s;
  }

 private:
  struct Layer {
    std::size_t w = 0, b = 0, cond_a = 0, cond_b = 0;
  };
  struct Cache {
    std::vector<RealVector> h;  // h[0] = input, h[l + 1] = activation of layer l
    std::vector<RealVector> u;  // affine output before conditioning
    std::vector<RealVector> a;  // pre-activation after conditioning
  };

  void layout() {
    std::size_t off = 0;
    std::size_t prev = input_;
    for (auto h : hidden_) {
      Layer ly;
      ly.w = off;
      off += h * prev;
      ly.b = off;
      off += h;
      ly.cond_a = off;
      if (cond_.mode() == ConditioningMode::Fourier) {
        off += h * cond_.embedding_size();
      } else {
        off += h * cond_.num_scales();
        ly.cond_b = off;
        off += h * cond_.num_scales();
      }
      layers_.push_back(ly);
      prev = h;
    }
    out_.w = off;
    off += input_ * prev;
    out_.b = off;
    off += input_;
    params_ = RealVector::Zero(static_cast<Eigen::Index>(off));
  }

  void initialize(std::uint64_t seed) {
    RngStream rng(seed, 0x1417);
    std::size_t prev = input_;
    for (std::size_t l = 0; l < hidden_.size(); ++l) {
      const auto& ly = layers_[l];
      const auto h = hidden_[l];
      detail::fill_normal(params_.segment(ly.w, h * prev), rng, 1.0 / std::sqrt(static_cast<double>(prev)));
      if (cond_.mode() == ConditioningMode::Fourier) {
        const auto m = cond_.embedding_size();
        detail::fill_normal(params_.segment(ly.cond_a, h * m), rng, 1.0 / std::sqrt(static_cast<double>(m)));
      } else {
        params_.segment(ly.cond_a, h * cond_.num_scales()).setOnes();
      }
      prev = h;
    }
    detail::fill_normal(params_.segment(out_.w, input_ * prev), rng, 1.0 / std::sqrt(static_cast<double>(prev)));
  }

  RealVector run(const RealVector& in, std::size_t i, Cache& c) const {
    if (in.size() != static_cast<Eigen::Index>(input_)) throw ShapeMismatch("MlpScoreNet: input size");
    cond_.check_index(i);
    const double* p = params_.data();
    c.h.push_back(in);
    for (std::size_t l = 0; l < hidden_.size(); ++l) {
      const auto& ly = layers_[l];
      const auto rows = static_cast<Eigen::Index>(hidden_[l]);
      const auto cols = static_cast<Eigen::Index>(l == 0 ? input_ : hidden_[l - 1]);
      RealVector u = detail::CMatMap(p + ly.w, rows, cols) * c.h.back() + detail::CVecMap(p + ly.b, rows);
      RealVector a;
      if (cond_.mode() == ConditioningMode::Fourier) {
        const RealVector e = cond_.embedding(i);
        a = u + detail::CMatMap(p + ly.cond_a, rows, static_cast<Eigen::Index>(e.size())) * e;
      } else {
        const auto n = static_cast<Eigen::Index>(cond_.num_scales());
        const auto col = static_cast<Eigen::Index>(i - 1);
        a = u.cwiseProduct(detail::CMatMap(p + ly.cond_a, rows, n).col(col)) +
            detail::CMatMap(p + ly.cond_b, rows, n).col(col);
      }
      RealVector h(rows);
      for (Eigen::Index k = 0; k < rows; ++k) h(k) = detail::act(act_, a(k));
      c.u.push_back(std::move(u));
      c.a.push_back(std::move(a));
      c.h.push_back(std::move(h));
    }
    const auto rows = static_cast<Eigen::Index>(input_);
    const auto cols = static_cast<Eigen::Index>(hidden_.back());
    return detail::CMatMap(p + out_.w, rows, cols) * c.h.back() + detail::CVecMap(p + out_.b, rows);
  }

  std::size_t input_;
  std::vector<std::size_t> hidden_;
  NoiseConditioning cond_;
  NoiseSchedule schedule_;
  Activation act_;
  std::vector<Layer> layers_;
  Layer out_;
  RealVector params_;
};

// ------------------------------------------------------------------- conv --

namespace detail {

// 3x3 convolution with zero padding, planar [channel][row][col] layout.
inline void conv3x3(const double* x, std::size_t cin, const double* k, const double* bias, std::size_t cout,
                    std::size_t h, std::size_t w, double* y) {
  const std::size_t hw = h * w;
  for (std::size_t o = 0; o < cout; ++o) {
    double* yo = y + o * hw;
    const double b = bias ? bias[o] : 0.0;
    for (std::size_t q = 0; q < hw; ++q) yo[q] = b;
    for (std::size_t c = 0; c < cin; ++c) {
      const double* xc = x + c * hw;
      const double* kk = k + (o * cin + c) * 9;
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t s = 0; s < w; ++s) {
          double acc = 0.0;
          for (int dr = -1; dr <= 1; ++dr) {
            const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
            if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(h)) continue;
            for (int ds = -1; ds <= 1; ++ds) {
              const auto ss = static_cast<std::ptrdiff_t>(s) + ds;
              if (ss < 0 || ss >= static_cast<std::ptrdiff_t>(w)) continue;
              acc += kk[(dr + 1) * 3 + (ds + 1)] * xc[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(ss)];
            }
          }
          yo[r * w + s] += acc;
        }
      }
    }
  }
}

// Gradients of conv3x3 given dy; dx may be null.
inline void conv3x3_backward(const double* x, std::size_t cin, const double* k, std::size_t cout, std::size_t h,
                             std::size_t w, const double* dy, double* dk, double* dbias, double* dx) {
  const std::size_t hw = h * w;
  for (std::size_t o = 0; o < cout; ++o) {
    const double* dyo = dy + o * hw;
    if (dbias) {
      for (std::size_t q = 0; q < hw; ++q) dbias[o] += dyo[q];
    }
    for (std::size_t c = 0; c < cin; ++c) {
      const double* xc = x + c * hw;
      const double* kk = k + (o * cin + c) * 9;
      double* dkk = dk + (o * cin + c) * 9;
      double* dxc = dx ? dx + c * hw : nullptr;
      for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t s = 0; s < w; ++s) {
          const double g = dyo[r * w + s];
          for (int dr = -1; dr <= 1; ++dr) {
            const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
            if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(h)) continue;
            for (int ds = -1; ds <= 1; ++ds) {
              const auto ss = static_cast<std::ptrdiff_t>(s) + ds;
              if (ss < 0 || ss >= static_cast<std::ptrdiff_t>(w)) continue;
              const std::size_t q = static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(ss);
              const int t = (dr + 1) * 3 + (ds + 1);
              dkk[t] += g * xc[q];
              if (dxc) dxc[q] += g * kk[t];
            }
          }
        }
      }
    }
  }
}

inline constexpr double kInstanceNormEps = 1e-5;

}  // namespace detail

/// Conv stack: [conv3x3 -> conditional instance norm -> activation] x layers,
/// then a final conv3x3 (with bias) back to the two input channels.  The
/// norm is gamma_k (u - mu_k) / s_k + beta_k per channel k, with (gamma, beta)
/// read from per-scale tables (discrete) or 1 + P_g e(i), P_b e(i) (Fourier).
class ConvScoreNet {
 public:
  ConvScoreNet(std::size_t height, std::size_t width, std::size_t channels, std::size_t layers,
               NoiseConditioning conditioning, NoiseSchedule schedule, Activation activation = Activation::Silu,
               std::uint64_t seed = 0)
      : h_(height), w_(width), ch_(channels), depth_(layers), cond_(std::move(conditioning)),
        schedule_(std::move(schedule)), act_(activation) {
    if (h_ < 1 || w_ < 1) throw InvalidArgument("ConvScoreNet: empty patch");
    if (ch_ < 1 || depth_ < 1) throw InvalidArgument("ConvScoreNet: need at least one channel and one layer");
    if (cond_.num_scales() != schedule_.size()) {
      throw InvalidArgument("ConvScoreNet: conditioning and schedule disagree on N");
    }
    layout();
    initialize(seed);
  }

  std::size_t height() const { return h_; }
  std::size_t width() const { return w_; }
  std::size_t channels() const { return ch_; }
  std::size_t depth() const { return depth_; }
  std::size_t input_size() const { return 2 * h_ * w_; }
  std::size_t output_size() const { return input_size(); }
  const NoiseConditioning& conditioning() const { return cond_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  Activation activation() const { return act_; }
  std::size_t parameter_count() const { return static_cast<std::size_t>(params_.size()); }
  RealVector& parameters() { return params_; }
  const RealVector& parameters() const { return params_; }

  RealVector forward(const RealVector& in, std::size_t i) const {
    Cache c;
    return run(in, i, c);
  }

  void backward(const RealVector& in, std::size_t i, const RealVector& dout, RealVector& grad) const {
    Cache c;
    run(in, i, c);
    if (dout.size() != static_cast<Eigen::Index>(input_size())) throw ShapeMismatch("ConvScoreNet: output gradient");
    if (grad.size() != params_.size()) throw ShapeMismatch("ConvScoreNet: gradient size");
    const double* p = params_.data();
    double* g = grad.data();
    const std::size_t hw = h_ * w_;

    RealVector dx = RealVector::Zero(static_cast<Eigen::Index>(ch_ * hw));
    detail::conv3x3_backward(c.h[depth_].data(), ch_, p + final_.k, 2, h_, w_, dout.data(), g + final_.k,
                             g + final_.b, dx.data());

    for (std::size_t l = depth_; l-- > 0;) {
      const auto& ly = layers_[l];
      const auto [gamma, beta] = norm_params(i, l);
      RealVector dgamma = RealVector::Zero(static_cast<Eigen::Index>(ch_));
      RealVector dbeta = RealVector::Zero(static_cast<Eigen::Index>(ch_));
      RealVector du(static_cast<Eigen::Index>(ch_ * hw));
      for (std::size_t k = 0; k < ch_; ++k) {
        const double s = c.inv_std[l](static_cast<Eigen::Index>(k));
        double mean_dn = 0.0, mean_dn_n = 0.0;
        std::vector<double> dn(hw);
        for (std::size_t q = 0; q < hw; ++q) {
          const std::size_t idx = k * hw + q;
          const double da = dx(static_cast<Eigen::Index>(idx)) * detail::act_grad(act_, c.a[l](static_cast<Eigen::Index>(idx)));
          const double nhat = c.nhat[l](static_cast<Eigen::Index>(idx));
          dgamma(static_cast<Eigen::Index>(k)) += da * nhat;
          dbeta(static_cast<Eigen::Index>(k)) += da;
          dn[q] = da * gamma(static_cast<Eigen::Index>(k));
          mean_dn += dn[q];
          mean_dn_n += dn[q] * nhat;
        }
        mean_dn /= static_cast<double>(hw);
        mean_dn_n /= static_cast<double>(hw);
        for (std::size_t q = 0; q < hw; ++q) {
          const std::size_t idx = k * hw + q;
          du(static_cast<Eigen::Index>(idx)) = s * (dn[q] - mean_dn - c.nhat[l](static_cast<Eigen::Index>(idx)) * mean_dn_n);
        }
      }
      accumulate_norm_grad(i, l, dgamma, dbeta, g);
      const std::size_t cin = l == 0 ? 2 : ch_;
      RealVector dprev = RealVector::Zero(static_cast<Eigen::Index>(cin * hw));
      detail::conv3x3_backward(c.h[l].data(), cin, p + ly.k, ch_, h_, w_, du.data(), g + ly.k, nullptr,
                               l > 0 ? dprev.data() : nullptr);
      dx = std::move(dprev);
    }
  }

  /// [height, width, channels, layers], used by checkpoints.
  std::vector<std::uint64_t> shape() const { return {h_, w_, ch_, depth_}; }

 private:
  struct Layer {
    std::size_t k = 0, cond_a = 0, cond_b = 0;
  };
  struct Cache {
    std::vector<RealVector> h;        // h[0] = input, h[l + 1] = output of block l
    std::vector<RealVector> nhat;     // normalised conv output
    std::vector<RealVector> a;        // pre-activation
    std::vector<RealVector> inv_std;  // 1 / s_k per channel
  };

  void layout() {
    std::size_t off = 0;
    for (std::size_t l = 0; l < depth_; ++l) {
      Layer ly;
      const std::size_t cin = l == 0 ? 2 : ch_;
      ly.k = off;
      off += ch_ * cin * 9;
      const std::size_t table = cond_.mode() == ConditioningMode::Fourier ? cond_.embedding_size() : cond_.num_scales();
      ly.cond_a = off;
      off += ch_ * table;
      ly.cond_b = off;
      off += ch_ * table;
      layers_.push_back(ly);
    }
    final_.k = off;
    off += 2 * ch_ * 9;
    final_.b = off;
    off += 2;
    params_ = RealVector::Zero(static_cast<Eigen::Index>(off));
  }

  void initialize(std::uint64_t seed) {
    RngStream rng(seed, 0xc0de);
    for (std::size_t l = 0; l < depth_; ++l) {
      const auto& ly = layers_[l];
      const std::size_t cin = l == 0 ? 2 : ch_;
      detail::fill_normal(params_.segment(ly.k, ch_ * cin * 9), rng, 1.0 / std::sqrt(9.0 * static_cast<double>(cin)));
      if (cond_.mode() == ConditioningMode::Fourier) {
        const std::size_t m = cond_.embedding_size();
        const double sd = 0.1 / std::sqrt(static_cast<double>(m));
        detail::fill_normal(params_.segment(ly.cond_a, ch_ * m), rng, sd);
        detail::fill_normal(params_.segment(ly.cond_b, ch_ * m), rng, sd);
      } else {
        params_.segment(ly.cond_a, ch_ * cond_.num_scales()).setOnes();
      }
    }
    detail::fill_normal(params_.segment(final_.k, 2 * ch_ * 9), rng, 1.0 / std::sqrt(9.0 * static_cast<double>(ch_)));
  }

  std::pair<RealVector, RealVector> norm_params(std::size_t i, std::size_t l) const {
    const auto& ly = layers_[l];
    const double* p = params_.data();
    const auto c = static_cast<Eigen::Index>(ch_);
    if (cond_.mode() == ConditioningMode::Fourier) {
      const RealVector e = cond_.embedding(i);
      const auto m = static_cast<Eigen::Index>(e.size());
      RealVector gamma = RealVector::Ones(c) + detail::CMatMap(p + ly.cond_a, c, m) * e;
      RealVector beta = detail::CMatMap(p + ly.cond_b, c, m) * e;
      return {std::move(gamma), std::move(beta)};
    }
    const auto n = static_cast<Eigen::Index>(cond_.num_scales());
    const auto col = static_cast<Eigen::Index>(i - 1);
    return {detail::CMatMap(p + ly.cond_a, c, n).col(col), detail::CMatMap(p + ly.cond_b, c, n).col(col)};
  }

  void accumulate_norm_grad(std::size_t i, std::size_t l, const RealVector& dgamma, const RealVector& dbeta,
                            double* g) const {
    const auto& ly = layers_[l];
    const auto c = static_cast<Eigen::Index>(ch_);
    if (cond_.mode() == ConditioningMode::Fourier) {
      const RealVector e = cond_.embedding(i);
      const auto m = static_cast<Eigen::Index>(e.size());
      detail::MatMap(g + ly.cond_a, c, m) += dgamma * e.transpose();
      detail::MatMap(g + ly.cond_b, c, m) += dbeta * e.transpose();
      return;
    }
    const auto n = static_cast<Eigen::Index>(cond_.num_scales());
    const auto col = static_cast<Eigen::Index>(i - 1);
    detail::MatMap(g + ly.cond_a, c, n).col(col) += dgamma;
    detail::MatMap(g + ly.cond_b, c, n).col(col) += dbeta;
  }

  RealVector run(const RealVector& in, std::size_t i, Cache& c) const {
    if (in.size() != static_cast<Eigen::Index>(input_size())) throw ShapeMismatch("ConvScoreNet: input size");
    cond_.check_index(i);
    const double* p = params_.data();
    const std::size_t hw = h_ * w_;
    c.h.push_back(in);
    for (std::size_t l = 0; l < depth_; ++l) {
      const std::size_t cin = l == 0 ? 2 : ch_;
      RealVector u(static_cast<Eigen::Index>(ch_ * hw));
      detail::conv3x3(c.h.back().data(), cin, p + layers_[l].k, nullptr, ch_, h_, w_, u.data());
      const auto [gamma, beta] = norm_params(i, l);
      RealVector nhat(u.size()), a(u.size()), out(u.size()), inv_std(static_cast<Eigen::Index>(ch_));
      for (std::size_t k = 0; k < ch_; ++k) {
        const auto seg = u.segment(static_cast<Eigen::Index>(k * hw), static_cast<Eigen::Index>(hw));
        const double mu = seg.mean();
        const double var = (seg.array() - mu).square().mean();
        const double is = 1.0 / std::sqrt(var + detail::kInstanceNormEps);
        inv_std(static_cast<Eigen::Index>(k)) = is;
        for (std::size_t q = 0; q < hw; ++q) {
          const auto idx = static_cast<Eigen::Index>(k * hw + q);
          nhat(idx) = (u(idx) - mu) * is;
          a(idx) = gamma(static_cast<Eigen::Index>(k)) * nhat(idx) + beta(static_cast<Eigen::Index>(k));
          out(idx) = detail::act(act_, a(idx));
        }
      }
      c.nhat.push_back(std::move(nhat));
      c.a.push_back(std::move(a));
      c.inv_std.push_back(std::move(inv_std));
      c.h.push_back(std::move(out));
    }
    RealVector y(static_cast<Eigen::Index>(input_size()));
    detail::conv3x3(c.h.back().data(), ch_, p + final_.k, p + final_.b, 2, h_, w_, y.data());
    return y;
  }

  std::size_t h_, w_, ch_, depth_;
  NoiseConditioning cond_;
  NoiseSchedule schedule_;
  Activation act_;
  std::vector<Layer> layers_;
  struct {
    std::size_t k = 0, b = 0;
  } final_;
  RealVector params_;
};

template <typename N>
concept ScoreNetwork = requires(N& net, const N& cnet, const RealVector& v, std::size_t i, RealVector& g) {
  { cnet.forward(v, i) } -> std::convertible_to<RealVector>;
  cnet.backward(v, i, v, g);
  { net.parameters() } -> std::same_as<RealVector&>;
  { cnet.schedule() } -> std::convertible_to<const NoiseSchedule&>;
  { cnet.input_size() } -> std::convertible_to<std::size_t>;
};

/// s_theta(x, i) = net(x, i) / sigma_i on packed inputs.
template <ScoreNetwork Net>
RealVector network_score(const Net& net, const RealVector& x, std::size_t i) {
  return net.forward(x, i) / net.schedule().sigma(i);
}

/// Adapts a trained network to the sampler's score interface.
template <ScoreNetwork Net>
class LearnedScore {
 public:
  LearnedScore(const Net& net, std::size_t height, std::size_t width) : net_(net), h_(height), w_(width) {
    if (2 * h_ * w_ != net_.input_size()) throw ShapeMismatch("LearnedScore: image shape does not fit the network");
  }
  ComplexImage score(const ComplexImage& x, std::size_t i) const {
    return unpack(network_score(net_, pack(x), i), h_, w_);
  }

 private:
  const Net& net_;
  std::size_t h_, w_;
};

// -------------------------------------------------------------------- DSM --

/// One drawn perturbation: scale index i and packed z ~ CN(0, sigma_i^2 I).
/// The perturbed input is x_0 - z, so z / sigma_i^2 is the conditional score.
struct Perturbation {
  std::size_t index;
  RealVector noise;
};

inline std::vector<Perturbation> draw_perturbations(std::size_t batch_size, std::size_t input_size,
                                                    const NoiseSchedule& schedule, RngStream& rng) {
  if (schedule.size() < 2) throw InvalidArgument("draw_perturbations: schedule needs N >= 2");
  std::vector<Perturbation> out;
  out.reserve(batch_size);
  const std::size_t span = schedule.size() - 1;
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto pick = std::min<std::size_t>(static_cast<std::size_t>(rng.uniform() * static_cast<double>(span)), span - 1);
    const std::size_t i = 2 + pick;
    const double sd = schedule.sigma(i) / std::numbers::sqrt2;
    RealVector z(static_cast<Eigen::Index>(input_size));
    for (Eigen::Index k = 0; k < z.size(); ++k) z(k) = sd * rng.normal();
    out.push_back({i, std::move(z)});
  }
  return out;
}

/// Per-sample weight sigma_{i-1}^2 / tau_i^2.
inline double dsm_weight(const NoiseSchedule& schedule, std::size_t i) {
  return schedule.sigma_sq(i - 1) / tau_sq(schedule, i);
}

/// Batch mean of w_i |z / sigma_i^2 - s_theta(x_0 - z, i)|^2; also
/// accumulates the parameter gradient when grad is non-null.
template <ScoreNetwork Net>
double dsm_loss(const Net& net, const std::vector<RealVector>& batch, const std::vector<Perturbation>& draws,
                RealVector* grad = nullptr) {
  if (batch.empty()) throw InvalidArgument("dsm_loss: empty batch");
  if (draws.size() != batch.size()) throw ShapeMismatch("dsm_loss: one perturbation per sample required");
  const auto& sched = net.schedule();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& d = draws[b];
    if (batch[b].size() != static_cast<Eigen::Index>(net.input_size())) throw ShapeMismatch("dsm_loss: sample size");
    const RealVector xi = batch[b] - d.noise;
    const double sigma = sched.sigma(d.index);
    const double w = dsm_weight(sched, d.index);
    const RealVector out = net.forward(xi, d.index);
    const RealVector r = d.noise / sched.sigma_sq(d.index) - out / sigma;
    total += w * r.squaredNorm();
    if (grad) {
      const RealVector dout = (-2.0 * w * inv_b / sigma) * r;
      net.backward(xi, d.index, dout, *grad);
    }
  }
  return total * inv_b;
}

template <ScoreNetwork Net>
double dsm_loss(const Net& net, const std::vector<RealVector>& batch, RngStream& rng) {
  return dsm_loss(net, batch, draw_perturbations(batch.size(), net.input_size(), net.schedule(), rng));
}

// --------------------------------------------------------------- training --

enum class Optimizer { Sgd, Adam };

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  Optimizer optimizer = Optimizer::Sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw InvalidArgument("TrainConfig: batch size must be positive");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw InvalidArgument("TrainConfig: learning rate must be > 0");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("TrainConfig: momentum must lie in [0, 1)");
  }
};

class TrainingDivergence : public std::runtime_error {
 public:
  TrainingDivergence(std::size_t epoch, std::size_t step, double loss)
      : std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                           " (loss = " + std::to_string(loss) + ")"),
        epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

template <ScoreNetwork Net>
struct TrainResult {
  Net net;
  std::vector<double> loss_trace;  // mean minibatch loss per epoch
};

/// Minibatch training; the data order and perturbations come from one
/// stream seeded by config.seed, so equal seeds give identical parameters.
template <ScoreNetwork Net>
TrainResult<Net> train(Net net, const std::vector<RealVector>& data, const TrainConfig& config) {
  config.validate();
  if (data.empty()) throw InvalidArgument("train: empty dataset");
  for (const auto& d : data) {
    if (d.size() != static_cast<Eigen::Index>(net.input_size())) throw ShapeMismatch("train: sample size");
  }
  RngStream rng(config.seed, 0x7a1);
  const auto n_params = net.parameters().size();
  RealVector m1 = RealVector::Zero(n_params);
  RealVector m2 = RealVector::Zero(n_params);
  std::vector<std::size_t> order(data.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  TrainResult<Net> result{net, {}};
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t k = order.size(); k-- > 1;) {
      const auto j = std::min<std::size_t>(static_cast<std::size_t>(rng.uniform() * static_cast<double>(k + 1)), k);
      std::swap(order[k], order[j]);
    }
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<RealVector> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(data[order[k]]);
      const auto draws = draw_perturbations(batch.size(), net.input_size(), net.schedule(), rng);
      RealVector grad = RealVector::Zero(n_params);
      const double loss = dsm_loss(net, batch, draws, &grad);
      if (!std::isfinite(loss) || !grad.allFinite()) throw TrainingDivergence(epoch, batches, loss);
      ++t;
      if (config.optimizer == Optimizer::Sgd) {
        m1 = config.momentum * m1 + grad;
        net.parameters() -= config.learning_rate * m1;
      } else {
        m1 = config.adam_beta1 * m1 + (1.0 - config.adam_beta1) * grad;
        m2 = config.adam_beta2 * m2 + (1.0 - config.adam_beta2) * grad.cwiseAbs2();
        const double c1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(t));
        net.parameters().array() -=
            config.learning_rate * (m1.array() / c1) / ((m2.array() / c2).sqrt() + config.adam_eps);
      }
      epoch_loss += loss;
      ++batches;
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(batches));
  }
  result.net = std::move(net);
  return result;
}

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t worst_parameter = 0;
};

/// Analytic dsm_loss gradient against central differences on fixed draws.
/// Relative error |a - f| / max(|a|, |f|, floor) with floor = 1e-5 max|a|
/// so that near-zero entries do not amplify rounding.
template <ScoreNetwork Net>
GradientCheck param_gradient_check(Net net, const std::vector<RealVector>& batch,
                                   const std::vector<Perturbation>& draws, double step = 1e-5) {
  const auto n = net.parameters().size();
  if (n > 5000) throw InvalidArgument("param_gradient_check: network too large for finite differences");
  RealVector grad = RealVector::Zero(n);
  dsm_loss(net, batch, draws, &grad);
  const double floor = std::max(1e-5 * grad.cwiseAbs().maxCoeff(), 1e-12);
  GradientCheck out;
  for (Eigen::Index k = 0; k < n; ++k) {
    const double saved = net.parameters()(k);
    net.parameters()(k) = saved + step;
    const double up = dsm_loss(net, batch, draws);
    net.parameters()(k) = saved - step;
    const double down = dsm_loss(net, batch, draws);
    net.parameters()(k) = saved;
    const double fd = (up - down) / (2.0 * step);
    const double rel = std::abs(grad(k) - fd) / std::max({std::abs(grad(k)), std::abs(fd), floor});
    if (rel > out.max_relative_error) {
      out.max_relative_error = rel;
      out.worst_parameter = static_cast<std::size_t>(k);
    }
  }
  return out;
}

// ------------------------------------------------------------- checkpoint --
//
//   8 bytes  magic "BRCKPT01"
//   u32      version (1)
//   u32      network kind (0 = mlp, 1 = conv)
//   u32      activation
//   u32      conditioning mode
//   u64      schedule hash
//   u64      number of scales
//   u32      rank of the shape vector, then u64 entries
//   u64      Fourier embedding size m, then m f64 frequencies
//   u64      parameter count, then f64 parameters

inline constexpr std::array<char, 8> kCheckpointMagic = {'B', 'R', 'C', 'K', 'P', 'T', '0', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

struct CheckpointHeader {
  std::uint32_t kind;
  Activation activation;
  NoiseConditioning conditioning;
  std::vector<std::uint64_t> shape;
};

template <ScoreNetwork Net>
void save_checkpoint(const std::string& path, const Net& net, std::uint32_t kind, const std::vector<std::uint64_t>& shape) {
  auto os = io::open_out(path);
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_le<std::uint32_t>(os, kind);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.activation()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.conditioning().mode()));
  io::write_le<std::uint64_t>(os, net.schedule().hash());
  io::write_le<std::uint64_t>(os, net.schedule().size());
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (auto s : shape) io::write_le<std::uint64_t>(os, s);
  const RealVector& w = net.conditioning().frequencies();
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(w.size()));
  for (Eigen::Index k = 0; k < w.size(); ++k) io::write_le(os, w(k));
  const RealVector& p = net.parameters();
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(p.size()));
  for (Eigen::Index k = 0; k < p.size(); ++k) io::write_le(os, p(k));
  if (!os) throw io::IoError("write failed for '" + path + "'");
}

inline std::pair<CheckpointHeader, std::ifstream> read_checkpoint_header(const std::string& path,
                                                                         const NoiseSchedule& schedule) {
  auto is = io::open_in(path);
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw io::FormatError("'" + path + "' is not a checkpoint");
  }
  if (io::read_le<std::uint32_t>(is) != kCheckpointVersion) throw io::FormatError("unsupported checkpoint version");
  const auto kind = io::read_le<std::uint32_t>(is);
  const auto activation = io::read_le<std::uint32_t>(is);
  const auto mode = io::read_le<std::uint32_t>(is);
  if (activation > 1 || mode > 1) throw io::FormatError("corrupt checkpoint header");
  if (io::read_le<std::uint64_t>(is) != schedule.hash()) {
    throw io::FormatError("checkpoint was trained with a different noise schedule");
  }
  const auto n_scales = io::read_le<std::uint64_t>(is);
  if (n_scales != schedule.size()) throw io::FormatError("checkpoint scale count mismatch");
  const auto rank = io::read_le<std::uint32_t>(is);
  if (rank > 64) throw io::FormatError("corrupt checkpoint shape");
  std::vector<std::uint64_t> shape(rank);
  for (auto& s : shape) s = io::read_le<std::uint64_t>(is);
  const auto m = io::read_le<std::uint64_t>(is);
  if (m > (1u << 20)) throw io::FormatError("corrupt checkpoint embedding");
  RealVector w(static_cast<Eigen::Index>(m));
  for (Eigen::Index k = 0; k < w.size(); ++k) w(k) = io::read_le<double>(is);
  auto cond = static_cast<ConditioningMode>(mode) == ConditioningMode::Fourier
                  ? NoiseConditioning::with_frequencies(schedule.size(), std::move(w))
                  : NoiseConditioning::discrete(schedule.size());
  return {CheckpointHeader{kind, static_cast<Activation>(activation), std::move(cond), std::move(shape)},
          std::move(is)};
}

inline void read_parameters(std::istream& is, RealVector& params) {
  const auto n = io::read_le<std::uint64_t>(is);
  if (n != static_cast<std::uint64_t>(params.size())) throw io::FormatError("checkpoint parameter count mismatch");
  for (Eigen::Index k = 0; k < params.size(); ++k) params(k) = io::read_le<double>(is);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const MlpScoreNet& net) {
  detail::save_checkpoint(path, net, 0, net.shape());
}

inline void save_checkpoint(const std::string& path, const ConvScoreNet& net) {
  detail::save_checkpoint(path, net, 1, net.shape());
}

inline MlpScoreNet load_mlp_checkpoint(const std::string& path, const NoiseSchedule& schedule) {
  auto [h, is] = detail::read_checkpoint_header(path, schedule);
  if (h.kind != 0 || h.shape.size() < 2) throw io::FormatError("'" + path + "' is not an MLP checkpoint");
  std::vector<std::size_t> hidden(h.shape.begin() + 1, h.shape.end());
  MlpScoreNet net(h.shape[0], hidden, h.conditioning, schedule, h.activation);
  detail::read_parameters(is, net.parameters());
  return net;
}

inline ConvScoreNet load_conv_checkpoint(const std::string& path, const NoiseSchedule& schedule) {
  auto [h, is] = detail::read_checkpoint_header(path, schedule);
  if (h.kind != 1 || h.shape.size() != 4) throw io::FormatError("'" + path + "' is not a conv checkpoint");
  ConvScoreNet net(h.shape[0], h.shape[1], h.shape[2], h.shape[3], h.conditioning, schedule, h.activation);
  detail::read_parameters(is, net.parameters());
  return net;
}

/// Network kind stored in a checkpoint (0 = mlp, 1 = conv).
inline std::uint32_t checkpoint_kind(const std::string& path) {
  auto is = io::open_in(path);
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw io::FormatError("'" + path + "' is not a checkpoint");
  }
  io::read_le<std::uint32_t>(is);
  return io::read_le<std::uint32_t>(is);
}

}  // namespace bayesrecon::training
