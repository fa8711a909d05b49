#pragma once

// Score fields s(x, i) ~ grad log p_i(x) and analytic priors whose noised
// marginals are known in closed form.  Scores use the conjugate-Wirtinger
// convention: for CN(m, v I) the score is (m - x) / v.

#include "bayesrecon/domain.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace bayesrecon {

/// Anything that evaluates a noise-conditioned score at scale index i.
template <typename P>
concept ScoreField = requires(const P& p, const ComplexImage& x, std::size_t i) {
  { p.score(x, i) } -> std::same_as<ComplexImage>;
};

class SingularSystem : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// CN(mean, diag(variance)); the isotropic case stores a constant vector.
class GaussianPrior {
 public:
  GaussianPrior(ComplexImage mean, double variance)
      : GaussianPrior(mean, RealVector::Constant(mean.data().size(), variance)) {}

  GaussianPrior(ComplexImage mean, RealVector variance) : mean_(std::move(mean)), variance_(std::move(variance)) {
    if (variance_.size() != mean_.data().size()) throw ShapeMismatch("GaussianPrior: variance length != image size");
    if (!(variance_.minCoeff() > 0.0) || !variance_.allFinite()) {
      throw InvalidArgument("GaussianPrior: variance must be positive");
    }
  }

  const ComplexImage& mean() const { return mean_; }
  const RealVector& variance() const { return variance_; }

  bool isotropic() const { return variance_.maxCoeff() == variance_.minCoeff(); }

  /// Score of the noised marginal CN(mean, (variance + sigma_sq) I).
  ComplexImage score(const ComplexImage& x, double sigma_sq) const {
    mean_.require_same_shape(x);
    ComplexImage s(x.height(), x.width());
    for (Eigen::Index k = 0; k < s.data().size(); ++k) {
      s.data()(k) = (mean_.data()(k) - x.data()(k)) / (variance_(k) + sigma_sq);
    }
    return s;
  }

  double log_density(const ComplexImage& x, double sigma_sq) const {
    mean_.require_same_shape(x);
    double acc = 0.0;
    for (Eigen::Index k = 0; k < x.data().size(); ++k) {
      const double v = variance_(k) + sigma_sq;
      acc += -std::norm(x.data()(k) - mean_.data()(k)) / v - std::log(std::numbers::pi * v);
    }
    return acc;
  }

 private:
  ComplexImage mean_;
  RealVector variance_;
};

struct GmmComponent {
  double weight = 1.0;
  ComplexVector mean;
  double variance = 1.0;
};

/// Mixture of isotropic complex Gaussians sum_k w_k CN(mu_k, v_k I) over
/// flattened complex vectors.
class GmmPrior {
 public:
  explicit GmmPrior(std::vector<GmmComponent> components) : components_(std::move(components)) {
    if (components_.empty()) throw InvalidArgument("GmmPrior: need at least one component");
    double total = 0.0;
    for (const auto& c : components_) {
      if (!(c.weight > 0.0)) throw InvalidArgument("GmmPrior: weights must be positive");
      if (!(c.variance > 0.0) || !std::isfinite(c.variance)) throw InvalidArgument("GmmPrior: variances must be positive");
      if (c.mean.size() != components_.front().mean.size() || c.mean.size() == 0) {
        throw ShapeMismatch("GmmPrior: component means must share a nonzero dimension");
      }
      total += c.weight;
    }
    if (std::abs(total - 1.0) > 1e-12) throw InvalidArgument("GmmPrior: weights must sum to 1");
  }

  const std::vector<GmmComponent>& components() const { return components_; }
  std::size_t dimension() const { return static_cast<std::size_t>(components_.front().mean.size()); }

  /// Log responsibilities (unnormalised log w_k CN(x; mu_k, (v_k + s) I)).
  std::vector<double> log_terms(const ComplexVector& x, double sigma_sq) const {
    check(x);
    const auto d = static_cast<double>(x.size());
    std::vector<double> out;
    out.reserve(components_.size());
    for (const auto& c : components_) {
      const double v = c.variance + sigma_sq;
      out.push_back(std::log(c.weight) - (x - c.mean).squaredNorm() / v - d * std::log(std::numbers::pi * v));
    }
    return out;
  }

  ComplexImage score(const ComplexImage& x, double sigma_sq) const {
    const auto terms = log_terms(x.data(), sigma_sq);
    const double peak = *std::max_element(terms.begin(), terms.end());
    double norm = 0.0;
    std::vector<double> resp(terms.size());
    for (std::size_t k = 0; k < terms.size(); ++k) {
      resp[k] = std::exp(terms[k] - peak);
      norm += resp[k];
    }
    ComplexImage s(x.height(), x.width());
    for (std::size_t k = 0; k < components_.size(); ++k) {
      const double v = components_[k].variance + sigma_sq;
      const double r = resp[k] / norm;
      for (Eigen::Index j = 0; j < s.data().size(); ++j) {
        s.data()(j) += ((components_[k].mean(j) - x.data()(j)) / v) * r;
      }
    }
    return s;
  }

  double log_density(const ComplexImage& x, double sigma_sq) const {
    const auto terms = log_terms(x.data(), sigma_sq);
    const double peak = *std::max_element(terms.begin(), terms.end());
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - peak);
    return peak + std::log(acc);
  }

  /// Draw one point from the (noised) mixture.
  ComplexVector sample(RngStream& rng, double sigma_sq = 0.0) const {
    double u = rng.uniform();
    std::size_t k = 0;
    for (; k + 1 < components_.size(); ++k) {
      if (u < components_[k].weight) break;
      u -= components_[k].weight;
    }
    const auto& c = components_[k];
    ComplexVector x = c.mean;
    for (Eigen::Index j = 0; j < x.size(); ++j) x(j) += rng.complex_normal(c.variance + sigma_sq);
    return x;
  }

 private:
  void check(const ComplexVector& x) const {
    if (static_cast<std::size_t>(x.size()) != dimension()) throw ShapeMismatch("GmmPrior: dimension mismatch");
  }

  std::vector<GmmComponent> components_;
};

inline ComplexImage gaussian_score(const GaussianPrior& prior, const ComplexImage& x, std::size_t i,
                                   const NoiseSchedule& schedule) {
  return prior.score(x, schedule.sigma_sq(i));
}

inline ComplexImage gmm_score(const GmmPrior& prior, const ComplexImage& x, std::size_t i,
                              const NoiseSchedule& schedule) {
  return prior.score(x, schedule.sigma_sq(i));
}

/// Binds an analytic prior to a schedule so that score(x, i) evaluates the
/// score of the prior convolved with CN(0, sigma_i^2 I).
template <typename Prior>
class NoisedPrior {
 public:
  NoisedPrior(Prior prior, NoiseSchedule schedule) : prior_(std::move(prior)), schedule_(std::move(schedule)) {}

  ComplexImage score(const ComplexImage& x, std::size_t i) const { return prior_.score(x, schedule_.sigma_sq(i)); }
  double log_density(const ComplexImage& x, std::size_t i) const {
    return prior_.log_density(x, schedule_.sigma_sq(i));
  }

  const Prior& prior() const { return prior_; }
  const NoiseSchedule& schedule() const { return schedule_; }

 private:
  Prior prior_;
  NoiseSchedule schedule_;
};

/// Mixture of full-covariance complex Gaussians; the conjugate posterior of
/// a GmmPrior under a linear Gaussian likelihood.
struct GaussianMixture {
  struct Component {
    double weight;
    ComplexVector mean;
    Eigen::MatrixXcd covariance;
  };
  std::vector<Component> components;

  ComplexVector mean() const {
    ComplexVector m = ComplexVector::Zero(components.front().mean.size());
    for (const auto& c : components) m += c.weight * c.mean;
    return m;
  }

  double log_density(const ComplexVector& x) const {
    std::vector<double> terms;
    for (const auto& c : components) {
      Eigen::LLT<Eigen::MatrixXcd> llt(c.covariance);
      const ComplexVector r = x - c.mean;
      const double quad = r.dot(llt.solve(r)).real();
      double logdet = 0.0;
      for (Eigen::Index j = 0; j < c.covariance.rows(); ++j) logdet += 2.0 * std::log(llt.matrixL()(j, j).real());
      terms.push_back(std::log(c.weight) - quad - logdet - static_cast<double>(x.size()) * std::log(std::numbers::pi));
    }
    const double peak = *std::max_element(terms.begin(), terms.end());
    double acc = 0.0;
    for (double t : terms) acc += std::exp(t - peak);
    return peak + std::log(acc);
  }
};

namespace detail {

/// log CN(r; 0, cov) via Cholesky; throws when cov is not positive definite.
inline double log_cn_density(const ComplexVector& r, const Eigen::MatrixXcd& cov) {
  Eigen::LLT<Eigen::MatrixXcd> llt(cov);
  if (llt.info() != Eigen::Success) throw SingularSystem("predictive covariance is not positive definite");
  double logdet = 0.0;
  for (Eigen::Index j = 0; j < cov.rows(); ++j) {
    const double d = llt.matrixL()(j, j).real();
    if (!(d > 0.0)) throw SingularSystem("predictive covariance is singular");
    logdet += 2.0 * std::log(d);
  }
  return -r.dot(llt.solve(r)).real() - logdet - static_cast<double>(r.size()) * std::log(std::numbers::pi);
}

inline std::pair<ComplexVector, Eigen::MatrixXcd> conjugate_update(const ComplexVector& prior_mean,
                                                                   const RealVector& prior_var,
                                                                   const Eigen::MatrixXcd& a, const ComplexVector& y,
                                                                   double noise_var) {
  Eigen::MatrixXcd precision = a.adjoint() * a / noise_var;
  precision.diagonal() += prior_var.cwiseInverse().cast<Complex>();
  Eigen::LLT<Eigen::MatrixXcd> llt(precision);
  if (llt.info() != Eigen::Success) throw SingularSystem("posterior normal equations are singular");
  const auto n = precision.rows();
  Eigen::MatrixXcd cov = llt.solve(Eigen::MatrixXcd::Identity(n, n));
  cov = 0.5 * (cov + cov.adjoint()).eval();
  const ComplexVector rhs = prior_mean.cwiseQuotient(prior_var.cast<Complex>()) + a.adjoint() * y / noise_var;
  return {llt.solve(rhs), cov};
}

}  // namespace detail

/// Exact posterior of a GMM prior under y = A x + CN(0, noise_var I):
/// each component updates conjugately and is reweighted by its evidence
/// CN(y; A mu_k, v_k A A^H + noise_var I).
inline GaussianMixture gmm_exact_posterior(const GmmPrior& prior, const Eigen::MatrixXcd& a, const ComplexVector& y,
                                           double noise_var) {
  if (!(noise_var > 0.0)) throw InvalidArgument("gmm_exact_posterior: noise variance must be positive");
  if (static_cast<std::size_t>(a.cols()) != prior.dimension() || a.rows() != y.size()) {
    throw ShapeMismatch("gmm_exact_posterior: operator shape does not match prior and data");
  }
  GaussianMixture post;
  std::vector<double> log_w;
  const Eigen::MatrixXcd aah = a * a.adjoint();
  for (const auto& c : prior.components()) {
    Eigen::MatrixXcd pred = c.variance * aah;
    pred.diagonal().array() += noise_var;
    log_w.push_back(std::log(c.weight) + detail::log_cn_density(y - a * c.mean, pred));
    auto [mean, cov] =
        detail::conjugate_update(c.mean, RealVector::Constant(c.mean.size(), c.variance), a, y, noise_var);
    post.components.push_back({0.0, std::move(mean), std::move(cov)});
  }
  const double peak = *std::max_element(log_w.begin(), log_w.end());
  double total = 0.0;
  for (double& lw : log_w) total += (lw = std::exp(lw - peak));
  for (std::size_t k = 0; k < log_w.size(); ++k) post.components[k].weight = log_w[k] / total;
  return post;
}

/// Conjugate posterior of a (diagonal) Gaussian prior: mean and covariance.
struct GaussianPosterior {
  ComplexVector mean;
  Eigen::MatrixXcd covariance;
};

inline GaussianPosterior gaussian_exact_posterior(const GaussianPrior& prior, const Eigen::MatrixXcd& a,
                                                  const ComplexVector& y, double noise_var) {
  if (!(noise_var > 0.0)) throw InvalidArgument("gaussian_exact_posterior: noise variance must be positive");
  if (a.cols() != prior.mean().data().size() || a.rows() != y.size()) {
    throw ShapeMismatch("gaussian_exact_posterior: operator shape does not match prior and data");
  }
  auto [mean, cov] = detail::conjugate_update(prior.mean().data(), prior.variance(), a, y, noise_var);
  return {std::move(mean), std::move(cov)};
}

}  // namespace bayesrecon
