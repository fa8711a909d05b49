#include "bayesrecon/domain.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace bayesrecon;

TEST(ComplexImage, ShapeAndData) {
  ComplexImage x(3, 4);
  EXPECT_EQ(x.size(), 12u);
  EXPECT_EQ(x.data().size(), 12);
  x(2, 1) = {1.0, -2.0};
  EXPECT_EQ(x.data()(9), Complex(1.0, -2.0));
  EXPECT_THROW(ComplexImage(2, 2, ComplexVector::Zero(3)), ShapeMismatch);
  EXPECT_THROW(x += ComplexImage(4, 3), ShapeMismatch);
  EXPECT_TRUE(x.all_finite());
  x(0, 0) = {std::nan(""), 0.0};
  EXPECT_FALSE(x.all_finite());
}

TEST(GeometricSchedule, MidpointExample) {
  const auto s = geometric_schedule(0.1, 10.0, 3);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_DOUBLE_EQ(s.sigma(0), 0.0);
  EXPECT_NEAR(s.sigma(1), 0.1, 1e-15);
  EXPECT_NEAR(s.sigma(2), 1.0, 1e-15);
  EXPECT_NEAR(s.sigma(3), 10.0, 1e-14);
}

TEST(GeometricSchedule, EndpointsOnly) {
  const auto s = geometric_schedule(0.01, 1.0, 2);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s.sigma(1), 0.01);
  EXPECT_DOUBLE_EQ(s.sigma(2), 1.0);
}

TEST(GeometricSchedule, SeventyScalesAgainstDirectFormula) {
  const auto s = geometric_schedule(0.01, 348.0, 70);
  ASSERT_EQ(s.size(), 70u);
  EXPECT_DOUBLE_EQ(s.sigma(1), 0.01);
  EXPECT_NEAR(s.sigma(70), 348.0, 1e-12);
  for (std::size_t i = 1; i <= 70; ++i) {
    // Independent evaluation in log space.
    const double expect = std::exp(std::log(0.01) + (std::log(348.0) - std::log(0.01)) * double(i - 1) / 69.0);
    EXPECT_NEAR(s.sigma(i), expect, 1e-12 * expect) << i;
    if (i > 1) {
      EXPECT_GT(s.sigma(i), s.sigma(i - 1));
    }
  }
  EXPECT_NEAR(s.sigma(35), 0.01 * std::pow(34800.0, 34.0 / 69.0), 1e-12);
}

TEST(GeometricSchedule, RejectsBadArguments) {
  EXPECT_THROW(geometric_schedule(0.0, 1.0, 5), InvalidArgument);
  EXPECT_THROW(geometric_schedule(-1.0, 1.0, 5), InvalidArgument);
  EXPECT_THROW(geometric_schedule(1.0, 1.0, 5), InvalidArgument);
  EXPECT_THROW(geometric_schedule(2.0, 1.0, 5), InvalidArgument);
  EXPECT_THROW(geometric_schedule(0.1, 1.0, 1), InvalidArgument);
}

TEST(NoiseSchedule, RejectsNonIncreasing) {
  EXPECT_THROW(NoiseSchedule({0.1, 0.1}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule({0.0, 0.1}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule({}), InvalidArgument);
  const NoiseSchedule s({0.5, 1.0});
  EXPECT_THROW(s.sigma(3), IndexOutOfRange);
}

TEST(NoiseSchedule, MonotoneForRandomConstructions) {
  std::mt19937_64 g(7);
  std::uniform_real_distribution<double> lo(1e-4, 1.0), ratio(1.001, 1e4);
  std::uniform_int_distribution<std::size_t> count(2, 200);
  for (int t = 0; t < 200; ++t) {
    const double a = lo(g);
    const auto s = geometric_schedule(a, a * ratio(g), count(g));
    for (std::size_t i = 1; i <= s.size(); ++i) {
      ASSERT_GT(s.sigma(i), s.sigma(i - 1));
      const double t2 = tau_sq(s, i);
      ASSERT_GE(t2, 0.0);
      ASSERT_LE(t2, s.sigma_sq(i) - s.sigma_sq(i - 1) + 1e-15);
    }
    ASSERT_EQ(tau_sq(s, 1), 0.0);
  }
}

TEST(TauSq, Examples) {
  const NoiseSchedule s({1.0, 2.0});
  EXPECT_DOUBLE_EQ(tau_sq(s, 2), 0.75);
  EXPECT_DOUBLE_EQ(tau_sq(s, 1), 0.0);
  EXPECT_THROW(tau_sq(s, 0), IndexOutOfRange);
  EXPECT_THROW(tau_sq(s, 3), IndexOutOfRange);
}

TEST(TauSq, VanishesAsScalesMerge) {
  for (double eps : {1e-2, 1e-4, 1e-6}) {
    const double si = 1.5;
    const NoiseSchedule s({si - eps, si});
    EXPECT_LT(tau_sq(s, 2), eps * 2.0 * si);
  }
}

TEST(SamplerConfig, Validation) {
  const auto s = geometric_schedule(0.1, 1.0, 5);
  SamplerConfig c;
  EXPECT_NO_THROW(c.validate(s));
  EXPECT_EQ(c.resolved_start(s), 5u);
  auto bad = c;
  bad.steps_per_scale = 0;
  EXPECT_THROW(bad.validate(s), InvalidArgument);
  bad = c;
  bad.start_index = 6;
  EXPECT_THROW(bad.validate(s), InvalidArgument);
  bad = c;
  bad.lambda = 0.0;
  EXPECT_THROW(bad.validate(s), InvalidArgument);
  bad = c;
  bad.n_chains = 0;
  EXPECT_THROW(bad.validate(s), InvalidArgument);
  bad = c;
  bad.split_index = 6;
  EXPECT_THROW(bad.validate(s), InvalidArgument);
  bad.split_index = 5;
  EXPECT_NO_THROW(bad.validate(s));
}

TEST(RngStream, Reproducible) {
  RngStream a(42, 3), b(42, 3), c(42, 4), d(43, 3);
  for (int k = 0; k < 100; ++k) {
    const double x = a.normal();
    EXPECT_EQ(x, b.normal());
    EXPECT_NE(x, c.normal());
    EXPECT_NE(x, d.normal());
  }
}

TEST(RngStream, ComplexNormalConvention) {
  RngStream r(1, 0);
  const int n = 200000;
  double sre = 0.0, sim = 0.0, cross = 0.0;
  for (int k = 0; k < n; ++k) {
    const Complex z = r.complex_normal(2.0);
    sre += z.real() * z.real();
    sim += z.imag() * z.imag();
    cross += z.real() * z.imag();
  }
  // each part carries variance 1; standard error of the variance estimate is sqrt(2/n)
  const double se = std::sqrt(2.0 / n);
  EXPECT_NEAR(sre / n, 1.0, 4 * se);
  EXPECT_NEAR(sim / n, 1.0, 4 * se);
  EXPECT_NEAR(cross / n, 0.0, 4 * std::sqrt(1.0 / n));
}
