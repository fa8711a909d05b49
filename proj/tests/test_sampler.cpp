#include "bayesrecon/sampler.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <mutex>

using namespace bayesrecon;
using testing_support::random_image;

namespace {

struct ZeroScore {
  ComplexImage score(const ComplexImage& x, std::size_t) const { return ComplexImage(x.height(), x.width()); }
};

struct Repulsive {
  ComplexImage score(const ComplexImage& x, std::size_t) const {
    ComplexImage s = x;
    s *= Complex(1e4, 0.0);
    return s;
  }
};

KSpaceData scalar_y(const DenseOperator& op, Complex y) { return op.apply(ComplexImage::point(y)); }

Eigen::MatrixXcd random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> n;
  Eigen::MatrixXcd a(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) a(r, c) = {n(g), n(g)};
  }
  // unit spectral norm keeps the explicit steps stable
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(a);
  return a / svd.singularValues()(0);
}

}  // namespace

TEST(LangevinStep, VanishingLambdaLeavesOnlyThePriorDrift) {
  const auto sched = geometric_schedule(0.1, 2.0, 6);
  std::mt19937_64 g(1);
  const GaussianPrior gp(random_image(2, 2, g), 0.5);
  const NoisedPrior<GaussianPrior> prior(gp, sched);
  const auto op = DenseOperator(random_matrix(3, 4, 2), 2, 2);
  const auto y = op.apply(random_image(2, 2, g, 5.0));
  SamplerConfig cfg;
  cfg.lambda = 1e-12;
  cfg.deterministic = true;
  const PosteriorRun run(cfg, sched, prior, op, y);
  for (std::size_t i = 1; i < sched.size(); ++i) {
    ChainState st = run.initial_state(0);
    st.scale = i;
    const ComplexImage x0 = st.x;
    const ChainState next = langevin_step(st, run);
    ComplexImage expect = prior.score(x0, i);
    expect *= Complex(sched.sigma_sq(i + 1) - sched.sigma_sq(i), 0.0);
    expect += x0;
    EXPECT_LT((next.x - expect).norm(), 1e-10) << i;
    EXPECT_EQ(next.step, 1u);
  }
}

TEST(LangevinStep, DeterministicFixedPointWithZeroScoreAndConsistentData) {
  const auto sched = geometric_schedule(0.1, 2.0, 6);
  const ZeroScore prior;
  ForwardOperator op(make_mask(8, 8, masks::SkipOddEven{}), synthetic_coil_maps(2, 8, 8));
  std::mt19937_64 g(3);
  const ComplexImage x = random_image(8, 8, g);
  SamplerConfig cfg;
  cfg.deterministic = true;
  cfg.lambda = 5.0;
  const PosteriorRun run(cfg, sched, prior, op, op.apply(x));
  ChainState st = run.initial_state(0);
  st.x = x;
  for (std::size_t i = sched.size() - 1; i >= 1; --i) {
    st.scale = i;
    st = langevin_step(st, run);
    EXPECT_LT((st.x - x).norm(), 1e-13 * x.norm()) << i;
  }
}

TEST(LangevinStep, RejectsScaleOutsideRange) {
  const auto sched = geometric_schedule(0.1, 2.0, 4);
  const ZeroScore prior;
  const auto op = DenseOperator::identity(1, 1);
  const PosteriorRun run(SamplerConfig{}, sched, prior, op, scalar_y(op, 1.0));
  ChainState st = run.initial_state(0);
  st.scale = 4;
  EXPECT_THROW(langevin_step(st, run), IndexOutOfRange);
  st.scale = 0;
  EXPECT_THROW(langevin_step(st, run), IndexOutOfRange);
}

TEST(LangevinStep, DivergenceGuardReportsScaleAndStep) {
  const auto sched = geometric_schedule(0.1, 2.0, 4);
  const Repulsive prior;
  const auto op = DenseOperator::identity(1, 1);
  SamplerConfig cfg;
  cfg.steps_per_scale = 50;
  const PosteriorRun run(cfg, sched, prior, op, scalar_y(op, 1.0));
  try {
    run_posterior_sampling(run);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.scale(), 3u);
    EXPECT_GE(e.step(), 1u);
    EXPECT_LE(e.step(), 50u);
  }
}

TEST(PosteriorRun, ValidatesArguments) {
  const auto sched = geometric_schedule(0.1, 2.0, 4);
  const ZeroScore prior;
  const auto op = DenseOperator::identity(1, 1);
  const auto y = scalar_y(op, 1.0);
  SamplerConfig cfg;
  cfg.lambda = 0.0;
  EXPECT_THROW(PosteriorRun(cfg, sched, prior, op, y), InvalidArgument);
  cfg = {};
  cfg.start_index = 5;
  EXPECT_THROW(PosteriorRun(cfg, sched, prior, op, y), InvalidArgument);
  cfg = {};
  cfg.n_chains = 0;
  EXPECT_THROW(PosteriorRun(cfg, sched, prior, op, y), InvalidArgument);
  cfg = {};
  cfg.split_index = 5;
  EXPECT_THROW(PosteriorRun(cfg, sched, prior, op, y), InvalidArgument);
  EXPECT_THROW(PosteriorRun(SamplerConfig{}, NoiseSchedule({1.0}), prior, op, y), InvalidArgument);
  const PosteriorRun ok(SamplerConfig{}, sched, prior, op, y);
  EXPECT_THROW(run_with_burn_in(ok, 4), InvalidArgument);
}

TEST(RunPosteriorSampling, ZeroStepsReturnsInitialDraws) {
  const auto sched = geometric_schedule(0.1, 2.0, 5);
  const ZeroScore prior;
  const auto op = DenseOperator::identity(2, 3);
  SamplerConfig cfg;
  cfg.steps_per_scale = 0;
  cfg.n_chains = 4;
  cfg.seed = 11;
  const PosteriorRun run(cfg, sched, prior, op, op.apply(ComplexImage(2, 3)));
  const auto out = run_posterior_sampling(run);
  ASSERT_EQ(out.size(), 4u);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_TRUE(out[c] == run.initial_state(c).x);
  EXPECT_THROW(cfg.validate(sched), InvalidArgument);
}

TEST(RunPosteriorSampling, ReproducibleAndSeedSensitive) {
  const auto sched = geometric_schedule(0.05, 3.0, 8);
  std::mt19937_64 g(5);
  const GaussianPrior gp(random_image(4, 4, g), 0.3);
  const NoisedPrior<GaussianPrior> prior(gp, sched);
  ForwardOperator op(make_mask(4, 4, masks::SkipOddEven{}), CoilMaps::unit(4, 4));
  const auto y = simulate_measurement(op, random_image(4, 4, g), 0.1, 3);
  SamplerConfig cfg;
  cfg.n_chains = 3;
  cfg.seed = 99;
  cfg.lambda = 0.3;
  const auto a = run_posterior_sampling(PosteriorRun(cfg, sched, prior, op, y));
  const auto b = run_posterior_sampling(PosteriorRun(cfg, sched, prior, op, y));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_TRUE(a[c] == b[c]);
  EXPECT_FALSE(a[0] == a[1]);
  cfg.seed = 100;
  const auto d = run_posterior_sampling(PosteriorRun(cfg, sched, prior, op, y));
  EXPECT_FALSE(a[0] == d[0]);
}

TEST(RunPosteriorSampling, VisitsScalesFromStartDownToOne) {
  const auto sched = geometric_schedule(0.1, 2.0, 6);
  const ZeroScore prior;
  const auto op = DenseOperator::identity(1, 1);
  SamplerConfig cfg;
  cfg.steps_per_scale = 3;
  cfg.start_index = 4;
  cfg.n_chains = 2;
  PosteriorRun run(cfg, sched, prior, op, scalar_y(op, 0.5));
  std::mutex mu;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> seen(2);
  run.observer = [&](std::size_t c, std::size_t i, std::size_t k, const ComplexImage&, double norm) {
    std::lock_guard lock(mu);
    EXPECT_GE(norm, 0.0);
    seen[c].emplace_back(i, k);
  };
  run_posterior_sampling(run);
  const std::vector<std::pair<std::size_t, std::size_t>> expect = {{3, 1}, {3, 2}, {3, 3}, {2, 1}, {2, 2},
                                                                   {2, 3}, {1, 1}, {1, 2}, {1, 3}};
  EXPECT_EQ(seen[0], expect);
  EXPECT_EQ(seen[1], expect);
}

TEST(RunPosteriorSampling, StationaryLawAtFixedScale) {
  // Untuned schedule and lambda: the chain held at one scale settles on the
  // closed-form AR(1) law of the recursion.
  const auto sched = geometric_schedule(0.2, 1.5, 4);
  const Complex m(0.3, 0.1), yv(1.0, -0.5);
  const double v = 0.7;
  const GaussianPrior gp(ComplexImage::point(m), v);
  const NoisedPrior<GaussianPrior> prior(gp, sched);
  const auto op = DenseOperator::identity(1, 1);
  SamplerConfig cfg;
  cfg.lambda = 3.0;
  cfg.seed = 21;
  const PosteriorRun run(cfg, sched, prior, op, scalar_y(op, yv));
  for (std::size_t i : {1u, 2u}) {
    const auto law = testing_support::langevin_ar1(sched, i, m, v, yv, run.likelihood_variance(i));
    ASSERT_GT(law.a, 0.0);
    ASSERT_LT(law.a, 2.0);
    const auto thin = static_cast<std::size_t>(std::ceil(std::log(0.01) / std::log(std::abs(1.0 - law.a))));
    ChainState st = run.initial_state(i);
    st.scale = i;
    for (std::size_t k = 0; k < 20 * thin; ++k) st = langevin_step(st, run);
    const std::size_t n = 10000;
    Complex sum = 0.0;
    double sq = 0.0;
    std::vector<Complex> xs;
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t k = 0; k < thin; ++k) st = langevin_step(st, run);
      xs.push_back(st.x(0, 0));
      sum += st.x(0, 0);
    }
    const Complex mean = sum / double(n);
    for (auto x : xs) sq += std::norm(x - mean);
    const double var = sq / double(n - 1);
    const double se = std::sqrt(law.variance / (2.0 * n));  // per component
    EXPECT_LT(std::abs(mean.real() - law.mean.real()), 4.0 * se) << i;
    EXPECT_LT(std::abs(mean.imag() - law.mean.imag()), 4.0 * se) << i;
    EXPECT_NEAR(var / law.variance, 1.0, 4.0 / std::sqrt(double(n))) << i;
  }
}

TEST(RunPosteriorSampling, ConjugateScalarPosterior) {
  const auto t = testing_support::conjugate_tuning(1.0, 1.0, 0.1);
  const GaussianPrior gp(ComplexImage::point(0.0), 1.0);
  const NoisedPrior<GaussianPrior> prior(gp, t.schedule);
  const auto op = DenseOperator::identity(1, 1);
  SamplerConfig cfg;
  cfg.lambda = t.lambda;
  cfg.steps_per_scale = 700;
  cfg.n_chains = 4000;
  cfg.seed = 4;
  const auto out = run_posterior_sampling(PosteriorRun(cfg, t.schedule, prior, op, scalar_y(op, 2.0)));
  Complex sum = 0.0;
  for (const auto& x : out) sum += x(0, 0);
  const Complex mean = sum / double(out.size());
  double sq = 0.0;
  for (const auto& x : out) sq += std::norm(x(0, 0) - mean);
  const double var = sq / double(out.size() - 1);
  const double se = std::sqrt(var / (2.0 * double(out.size())));
  EXPECT_LT(std::abs(mean.real() - 1.0), 3.0 * se);
  EXPECT_LT(std::abs(mean.imag()), 3.0 * se);
  EXPECT_NEAR(var, 0.5, 0.15 * 0.5);
}

TEST(BurnIn, SplitAtTopDiffersOnlyByTheSharedInitialDraw) {
  const auto sched = geometric_schedule(0.1, 1.0, 5);
  std::mt19937_64 g(7);
  const double v = 0.5;
  const GaussianPrior gp(random_image(2, 2, g), v);
  const NoisedPrior<GaussianPrior> prior(gp, sched);
  const Eigen::MatrixXcd a = random_matrix(3, 4, 8);
  const DenseOperator op(a, 2, 2);
  const auto y = op.apply(random_image(2, 2, g));
  SamplerConfig cfg;
  cfg.steps_per_scale = 3;
  cfg.n_chains = 3;
  cfg.seed = 12;
  cfg.lambda = 2.0;

  auto record = [&](bool split) {
    PosteriorRun run(cfg, sched, prior, op, y);
    std::vector<std::vector<ComplexVector>> tr(cfg.n_chains);
    run.observer = [&](std::size_t c, std::size_t, std::size_t, const ComplexImage& x, double) {
      tr[c].push_back(x.data());
    };
    const auto out = split ? run_with_burn_in(run, sched.size() - 1) : run_posterior_sampling(run);
    return std::make_pair(tr, out);
  };
  const auto [ta, outa] = record(false);
  const auto [tb, outb] = record(true);

  const PosteriorRun probe(cfg, sched, prior, op, y);
  const ComplexVector shared = probe.initial_state(detail::kBurnInStream).x.data();
  const Eigen::MatrixXcd aha = a.adjoint() * a;
  for (std::size_t c = 0; c < cfg.n_chains; ++c) {
    ASSERT_EQ(ta[c].size(), tb[c].size());
    ComplexVector d = shared - probe.initial_state(c).x.data();
    std::size_t t = 0;
    for (std::size_t i = sched.size() - 1; i >= 1; --i) {
      const double cp = sched.sigma_sq(i + 1) - sched.sigma_sq(i);
      const double cl = 2.0 * tau_sq(sched, i + 1) / (2.0 * probe.likelihood_variance(i));
      for (std::size_t k = 0; k < cfg.steps_per_scale; ++k, ++t) {
        d = d - (cp / (v + sched.sigma_sq(i))) * d - cl * (aha * d);
        EXPECT_LT(((tb[c][t] - ta[c][t]) - d).norm(), 1e-10 * (1.0 + d.norm())) << c << " " << t;
      }
    }
    EXPECT_LT(((outb[c].data() - outa[c].data()) - d).norm(), 1e-10 * (1.0 + d.norm()));
  }
}

TEST(BurnIn, ChainsShareStateAtSplitThenDiverge) {
  const auto sched = geometric_schedule(0.1, 1.0, 6);
  const ZeroScore prior;
  const auto op = DenseOperator::identity(1, 2);
  SamplerConfig cfg;
  cfg.steps_per_scale = 2;
  cfg.n_chains = 3;
  cfg.seed = 3;
  PosteriorRun run(cfg, sched, prior, op, op.apply(ComplexImage(1, 2)));
  std::vector<std::vector<std::size_t>> scales(4);
  std::mutex mu;
  run.observer = [&](std::size_t c, std::size_t i, std::size_t, const ComplexImage&, double) {
    std::lock_guard lock(mu);
    scales[c].push_back(i);
  };
  const auto out = run_with_burn_in(run, 2);
  // burn-in chain reports as chain 0 for scales 5..3, then chains finish 2..1
  EXPECT_EQ(std::count(scales[0].begin(), scales[0].end(), 5u), 2);
  EXPECT_EQ(std::count(scales[0].begin(), scales[0].end(), 3u), 2);
  for (std::size_t c = 1; c < 3; ++c) EXPECT_EQ(scales[c], (std::vector<std::size_t>{2, 2, 1, 1}));
  EXPECT_FALSE(out[0] == out[1]);

  // split 0: chains are exact copies of the burn-in chain
  const auto copies = run_with_burn_in(run, 0);
  EXPECT_TRUE(copies[0] == copies[1]);
  EXPECT_TRUE(copies[1] == copies[2]);
}

TEST(RunSampler, DispatchesOnSplitIndex) {
  const auto sched = geometric_schedule(0.1, 1.0, 5);
  std::mt19937_64 g(9);
  const GaussianPrior gp(random_image(1, 2, g), 0.5);
  const NoisedPrior<GaussianPrior> prior(gp, sched);
  const auto op = DenseOperator::identity(1, 2);
  const auto y = op.apply(random_image(1, 2, g));
  SamplerConfig cfg;
  cfg.n_chains = 2;
  const PosteriorRun plain(cfg, sched, prior, op, y);
  cfg.split_index = 5;
  const PosteriorRun at_top(cfg, sched, prior, op, y);
  cfg.split_index = 2;
  const PosteriorRun split(cfg, sched, prior, op, y);
  EXPECT_TRUE(run_sampler(plain)[1] == run_posterior_sampling(plain)[1]);
  EXPECT_TRUE(run_sampler(at_top)[1] == run_posterior_sampling(at_top)[1]);
  EXPECT_TRUE(run_sampler(split)[1] == run_with_burn_in(split, 2)[1]);
}

TEST(RunMap, ZeroExtensionEqualsDeterministicSampling) {
  const auto sched = geometric_schedule(0.05, 2.0, 7);
  std::mt19937_64 g(10);
  const GaussianPrior gp(random_image(3, 3, g), 0.4);
  const NoisedPrior<GaussianPrior> prior(gp, sched);
  ForwardOperator op(make_mask(3, 3, masks::UniformRandom{0.6, 2}), CoilMaps::unit(3, 3));
  const auto y = op.apply(random_image(3, 3, g));
  SamplerConfig cfg;
  cfg.deterministic = true;
  cfg.steps_per_scale = 4;
  const PosteriorRun run(cfg, sched, prior, op, y);
  const auto map = run_map(run, 0);
  EXPECT_TRUE(map.x == run_posterior_sampling(run)[0]);
  EXPECT_EQ(map.annealing_steps, 4u * 6u);
  EXPECT_EQ(map.update_norms.size(), 24u);
}

TEST(RunMap, ConvergesToConjugateModeWithShrinkingUpdates) {
  const double v = 0.4, s2 = 0.3;
  const auto t = testing_support::conjugate_tuning(v, s2, 0.2);
  std::mt19937_64 g(11);
  const GaussianPrior gp(random_image(2, 2, g), v);
  const NoisedPrior<GaussianPrior> prior(gp, t.schedule);
  const Eigen::MatrixXcd a = random_matrix(3, 4, 12);
  const DenseOperator op(a, 2, 2);
  const auto y = op.apply(random_image(2, 2, g));
  SamplerConfig cfg;
  cfg.deterministic = true;
  cfg.lambda = t.lambda;
  cfg.steps_per_scale = 10;
  const auto res = run_map(PosteriorRun(cfg, t.schedule, prior, op, y), 100);
  const auto post = gaussian_exact_posterior(gp, a, y.samples, s2);
  EXPECT_LT((res.x.data() - post.mean).norm(), 1e-4 * post.mean.norm());
  ASSERT_EQ(res.update_norms.size(), 110u);
  for (std::size_t k = res.update_norms.size() - 49; k < res.update_norms.size(); ++k) {
    EXPECT_LE(res.update_norms[k], res.update_norms[k - 1]) << k;
  }
}
