#pragma once

// Annealed Langevin sampling of the posterior-modified reverse process.
//
// At target scale i (running from N_start - 1 down to 1) every step is
//
//   x <- x + (gamma / (2 tau^2)) (sigma_{i+1}^2 - sigma_i^2) s(x, i)
//          - (gamma / (2 sigma_eta^2)) (A^H A x - A^H y) + sqrt(gamma) z
//
// with tau^2 = tau_sq(i + 1), gamma = 2 tau^2, sigma_eta^2 = tau / lambda
// (or tau^2 / lambda) and z ~ CN(0, I).  Chains start from CN(0, I) and each
// scale continues from the last sample of the previous one.

#include "bayesrecon/domain.hpp"
#include "bayesrecon/forward_model.hpp"
#include "bayesrecon/prior_scores.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace bayesrecon {

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t scale, std::size_t step, double norm)
      : std::runtime_error("sampler diverged at scale " + std::to_string(scale) + ", step " + std::to_string(step) +
                           " (|x| = " + std::to_string(norm) + ")"),
        scale_(scale),
        step_(step) {}

  std::size_t scale() const { return scale_; }
  std::size_t step() const { return step_; }

 private:
  std::size_t scale_;
  std::size_t step_;
};

struct ChainState {
  ComplexImage x;
  std::size_t scale = 0;  // target scale i of the next step
  std::size_t step = 0;   // steps taken at the current scale
  RngStream rng;
  double last_update_norm = 0.0;
};

/// Called after every Langevin step with (chain, scale, step, x, update norm).
/// Invoked from the thread that owns the chain.
using StepObserver = std::function<void(std::size_t, std::size_t, std::size_t, const ComplexImage&, double)>;

/// Everything chains share: read-only after construction.
template <ScoreField Prior, MeasurementModel Op>
class PosteriorRun {
 public:
  PosteriorRun(SamplerConfig config, NoiseSchedule schedule, const Prior& prior, const Op& op, KSpaceData y)
      : config_(config), schedule_(std::move(schedule)), prior_(prior), op_(op), y_(std::move(y)),
        adjoint_y_(op_.adjoint(y_)) {
    if (schedule_.size() < 2) throw InvalidArgument("PosteriorRun: schedule needs at least two scales");
    const std::size_t n_start = config_.resolved_start(schedule_);
    if (n_start < 1 || n_start > schedule_.size()) throw InvalidArgument("PosteriorRun: N_start must lie in [1, N]");
    if (config_.split_index && *config_.split_index > n_start) {
      throw InvalidArgument("PosteriorRun: split index must lie in [0, N_start]");
    }
    if (!(config_.lambda > 0.0) || !std::isfinite(config_.lambda)) {
      throw InvalidArgument("PosteriorRun: lambda must be > 0");
    }
    if (config_.n_chains < 1) throw InvalidArgument("PosteriorRun: need at least one chain");
  }

  const SamplerConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const Prior& prior() const { return prior_; }
  const Op& op() const { return op_; }
  const KSpaceData& y() const { return y_; }
  const ComplexImage& adjoint_y() const { return adjoint_y_; }
  std::size_t start_index() const { return config_.resolved_start(schedule_); }

  StepObserver observer;

  /// Likelihood variance sigma_eta^2 used when targeting scale i.
  double likelihood_variance(std::size_t i) const {
    const double t2 = tau_sq(schedule_, i + 1);
    return config_.likelihood_variance == LikelihoodVariance::TauOverLambda ? std::sqrt(t2) / config_.lambda
                                                                             : t2 / config_.lambda;
  }

  ChainState initial_state(std::uint64_t stream) const {
    RngStream rng(config_.seed, stream);
    ComplexImage x = rng.complex_normal_image(op_.image_height(), op_.image_width());
    return ChainState{std::move(x), start_index() == 0 ? 0 : start_index() - 1, 0, std::move(rng), 0.0};
  }

 private:
  SamplerConfig config_;
  NoiseSchedule schedule_;
  const Prior& prior_;
  const Op& op_;
  KSpaceData y_;
  ComplexImage adjoint_y_;
};

namespace detail {

template <ScoreField Prior, MeasurementModel Op>
void langevin_update(ChainState& state, const PosteriorRun<Prior, Op>& run, bool noisy) {
  const std::size_t i = state.scale;
  const auto& sched = run.schedule();
  if (i < 1 || i + 1 > sched.size()) {
    throw IndexOutOfRange("langevin_step: target scale " + std::to_string(i) + " outside [1, N - 1]");
  }
  const double t2 = tau_sq(sched, i + 1);
  const double gamma = 2.0 * t2;
  const double prior_coef = gamma / (2.0 * t2) * (sched.sigma_sq(i + 1) - sched.sigma_sq(i));
  const double lik_coef = gamma / (2.0 * run.likelihood_variance(i));

  ComplexImage delta = run.prior().score(state.x, i);
  delta *= Complex(prior_coef, 0.0);
  ComplexImage residual = run.op().normal(state.x);
  residual -= run.adjoint_y();
  delta.data() -= lik_coef * residual.data();
  if (noisy) {
    const double sd = std::sqrt(gamma);
    for (Eigen::Index k = 0; k < delta.data().size(); ++k) delta.data()(k) += sd * state.rng.complex_normal();
  }
  state.x += delta;
  state.last_update_norm = delta.norm();
  ++state.step;

  const double norm = state.x.norm();
  if (!std::isfinite(norm) || norm > run.config().divergence_norm) throw DivergenceError(i, state.step, norm);
}

template <ScoreField Prior, MeasurementModel Op>
void run_scales(ChainState& state, const PosteriorRun<Prior, Op>& run, std::size_t from, std::size_t down_to,
                std::size_t chain, bool noisy) {
  for (std::size_t i = from; i >= down_to && i >= 1; --i) {
    state.scale = i;
    state.step = 0;
    for (std::size_t k = 0; k < run.config().steps_per_scale; ++k) {
      langevin_update(state, run, noisy);
      if (run.observer) run.observer(chain, i, state.step, state.x, state.last_update_norm);
    }
    if (i == 1) break;
  }
}

/// Runs fn(0..n-1) on up to hardware_concurrency threads.  Each index is
/// processed by exactly one thread; results must not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
  if (workers <= 1) {
    for (std::size_t k = 0; k < n; ++k) fn(k);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < n; k += workers) fn(k);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline constexpr std::uint64_t kBurnInStream = 0x4000000000000000ULL;

}  // namespace detail

/// One Langevin step at the state's target scale; z = 0 in deterministic mode.
template <ScoreField Prior, MeasurementModel Op>
ChainState langevin_step(ChainState state, const PosteriorRun<Prior, Op>& run) {
  detail::langevin_update(state, run, !run.config().deterministic);
  return state;
}

/// Independent chains from CN(0, I) through scales N_start - 1 .. 1.
/// Chain c uses random stream c.  Returns one final sample per chain.
template <ScoreField Prior, MeasurementModel Op>
std::vector<ComplexImage> run_posterior_sampling(const PosteriorRun<Prior, Op>& run) {
  const auto& cfg = run.config();
  std::vector<ComplexImage> out(cfg.n_chains);
  detail::parallel_for(cfg.n_chains, [&](std::size_t c) {
    ChainState state = run.initial_state(c);
    if (run.start_index() >= 2) detail::run_scales(state, run, run.start_index() - 1, 1, c, !cfg.deterministic);
    out[c] = std::move(state.x);
  });
  return out;
}

/// One chain runs the scales above split_index, then its state seeds
/// n_chains chains that finish independently.  Post-split chain c draws its
/// noise from stream c after skipping that stream's initial draw, so with
/// split_index = N_start - 1 the chains differ from run_posterior_sampling
/// only in their shared starting point.
template <ScoreField Prior, MeasurementModel Op>
std::vector<ComplexImage> run_with_burn_in(const PosteriorRun<Prior, Op>& run, std::size_t split_index) {
  const auto& cfg = run.config();
  const std::size_t n_start = run.start_index();
  if (split_index >= n_start) throw InvalidArgument("run_with_burn_in: split index must be below N_start");
  const bool noisy = !cfg.deterministic;

  ChainState burn = run.initial_state(detail::kBurnInStream);
  if (n_start >= 2 && n_start - 1 > split_index) {
    detail::run_scales(burn, run, n_start - 1, std::max<std::size_t>(split_index + 1, 1), 0, noisy);
  }

  std::vector<ComplexImage> out(cfg.n_chains);
  detail::parallel_for(cfg.n_chains, [&](std::size_t c) {
    ChainState state = run.initial_state(c);
    state.x = burn.x;
    if (split_index >= 1) detail::run_scales(state, run, split_index, 1, c, noisy);
    out[c] = std::move(state.x);
  });
  return out;
}

/// Dispatches to run_with_burn_in when the configured split index lies
/// below N_start, otherwise to independent chains.
template <ScoreField Prior, MeasurementModel Op>
std::vector<ComplexImage> run_sampler(const PosteriorRun<Prior, Op>& run) {
  const auto& split = run.config().split_index;
  if (split && *split < run.start_index()) return run_with_burn_in(run, *split);
  return run_posterior_sampling(run);
}

struct MapResult {
  ComplexImage x;
  std::vector<double> update_norms;  // annealing steps followed by extended steps
  std::size_t annealing_steps = 0;
};

/// Single chain (stream 0) through the schedule, noise-free when the run is
/// deterministic, followed by extended_iters noise-free steps at the final
/// scale.
template <ScoreField Prior, MeasurementModel Op>
MapResult run_map(const PosteriorRun<Prior, Op>& run, std::size_t extended_iters) {
  const auto& cfg = run.config();
  MapResult result;
  ChainState state = run.initial_state(0);
  const bool noisy = !cfg.deterministic;
  if (run.start_index() >= 2) {
    for (std::size_t i = run.start_index() - 1; i >= 1; --i) {
      state.scale = i;
      state.step = 0;
      for (std::size_t k = 0; k < cfg.steps_per_scale; ++k) {
        detail::langevin_update(state, run, noisy);
        result.update_norms.push_back(state.last_update_norm);
        if (run.observer) run.observer(0, i, state.step, state.x, state.last_update_norm);
      }
      if (i == 1) break;
    }
  }
  result.annealing_steps = result.update_norms.size();
  state.scale = 1;
  for (std::size_t k = 0; k < extended_iters; ++k) {
    detail::langevin_update(state, run, false);
    result.update_norms.push_back(state.last_update_norm);
    if (run.observer) run.observer(0, 1, state.step, state.x, state.last_update_norm);
  }
  result.x = std::move(state.x);
  return result;
}

}  // namespace bayesrecon
