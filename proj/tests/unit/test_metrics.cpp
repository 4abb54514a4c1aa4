#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "metast/metrics.hpp"

using namespace metast;

// Reference values below come from scipy.stats and scipy.special.

TEST(Rmse, HandValues) {
  const std::vector<double> p{1.0, 2.0, 3.0}, y{1.0, 2.0, 3.0}, z{0.0, 0.0, 0.0};
  EXPECT_EQ(metrics::rmse(p, y), 0.0);
  EXPECT_NEAR(metrics::rmse(p, z), std::sqrt(14.0 / 3.0), 1e-15);
  EXPECT_THROW(metrics::rmse(p, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(IncompleteBeta, MatchesScipyBetainc) {
  EXPECT_NEAR(metrics::incomplete_beta(0.5, 0.5, 0.3), 0.36901011956554536, 1e-12);
  EXPECT_NEAR(metrics::incomplete_beta(2, 3, 0.4), 0.5248, 1e-12);
  EXPECT_NEAR(metrics::incomplete_beta(10, 0.5, 0.9), 0.15164090963470994, 1e-12);
  EXPECT_NEAR(metrics::incomplete_beta(1, 1, 0.25), 0.25, 1e-12);
  EXPECT_EQ(metrics::incomplete_beta(2, 3, 0.0), 0.0);
  EXPECT_EQ(metrics::incomplete_beta(2, 3, 1.0), 1.0);
}

TEST(StudentT, TwoSidedMatchesScipy) {
  EXPECT_NEAR(metrics::student_t_two_sided(0.5, 1), 0.7048327646991336, 1e-12);
  EXPECT_NEAR(metrics::student_t_two_sided(2.0, 4), 0.1161165235168155, 1e-12);
  EXPECT_NEAR(metrics::student_t_two_sided(-3.1, 9), 0.012722455978201952, 1e-12);
  EXPECT_NEAR(metrics::student_t_two_sided(10.0, 2), 0.009852457023325692, 1e-12);
  EXPECT_NEAR(metrics::student_t_two_sided(1.96, 1000), 0.05027318495574871, 1e-10);
}

TEST(PairedTTest, MatchesScipyTtestRel) {
  const std::vector<double> a{0.101, 0.097, 0.105, 0.099, 0.102}, b{0.110, 0.104, 0.108, 0.107, 0.111};
  const auto r = metrics::paired_t_test(a, b);
  EXPECT_NEAR(r.t, -6.465790872963898, 1e-9);
  EXPECT_NEAR(r.p, 0.0029471302410755593, 1e-10);
  EXPECT_EQ(r.n, 5u);

  const std::vector<double> c{1.0, 2.0, 3.0, 4.0}, d{1.5, 1.9, 3.7, 4.2};
  const auto s = metrics::paired_t_test(c, d);
  EXPECT_NEAR(s.t, -1.857142857142857, 1e-12);
  EXPECT_NEAR(s.p, 0.1602837154333001, 1e-12);
}

TEST(PairedTTest, DegenerateDifferences) {
  const std::vector<double> a{1.0, 2.0, 3.0}, b{0.5, 1.5, 2.5};
  const auto r = metrics::paired_t_test(a, b);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.p, 0.0);
  EXPECT_TRUE(std::isinf(r.t));
  const auto same = metrics::paired_t_test(a, a);
  EXPECT_EQ(same.p, 1.0);
}

TEST(PairedTTest, RejectsBadInput) {
  const std::vector<double> a{1.0, 2.0}, b{1.0};
  EXPECT_THROW(metrics::paired_t_test(a, b), std::invalid_argument);
  EXPECT_THROW(metrics::paired_t_test(b, b), std::invalid_argument);
}

TEST(Significance, Stars) {
  EXPECT_EQ(metrics::significance_stars(0.001), "**");
  EXPECT_EQ(metrics::significance_stars(0.03), "*");
  EXPECT_EQ(metrics::significance_stars(0.2), "");
}
