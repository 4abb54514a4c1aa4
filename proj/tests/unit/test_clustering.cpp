#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <sstream>
#include <random>
#include <vector>

#include "fixtures.hpp"
#include "metast/clustering.hpp"
#include "metast/data.hpp"

using namespace metast;

namespace {

data::GridSeries series_from(std::size_t T, std::size_t regions, const std::function<double(std::size_t, std::size_t)>& f) {
  data::GridSeries s;
  s.rows = 1;
  s.cols = regions;
  s.interval = data::Interval::hour;
  s.t0 = 0;
  s.values = Tensor(Shape{T, 1, regions, 1});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t r = 0; r < regions; ++r) s.at(t, r, 0) = f(t, r);
  return s;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST(BuildProfiles, ConstantSeries) {
  const auto s = series_from(72, 3, [](std::size_t, std::size_t) { return 4.25; });
  for (const auto& p : cluster::build_profiles(s, 24)) {
    ASSERT_EQ(p.profile.size(), 24u);
    for (double x : p.profile) EXPECT_EQ(x, 4.25);
    EXPECT_FALSE(p.empty);
  }
}

TEST(BuildProfiles, NoiselessRepetition) {
  const auto s = series_from(240, 2, [](std::size_t t, std::size_t) { return static_cast<double>(t % 24 + 1); });
  const auto profiles = cluster::build_profiles(s, 24);
  for (std::size_t k = 0; k < 24; ++k) EXPECT_EQ(profiles[1].profile[k], static_cast<double>(k + 1));
}

TEST(BuildProfiles, NoisySinusoidWithinFiveSigmaOfMean) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> noise(0.0, 0.1);
  auto wave = [](std::size_t k) { return std::sin(2.0 * std::numbers::pi * static_cast<double>(k) / 24.0); };
  const auto s = series_from(24 * 30, 1, [&](std::size_t t, std::size_t) { return wave(t % 24) + noise(rng); });
  const auto p = cluster::build_profiles(s, 24)[0].profile;
  for (std::size_t k = 0; k < 24; ++k) EXPECT_LT(std::abs(p[k] - wave(k)), 0.1);
}

TEST(BuildProfiles, ChannelAverageAndShortSeries) {
  data::GridSeries s = series_from(24, 1, [](std::size_t, std::size_t) { return 0.0; });
  s.values = Tensor(Shape{24, 1, 1, 2});
  for (std::size_t t = 0; t < 24; ++t) {
    s.at(t, 0, 0) = 1.0;
    s.at(t, 0, 1) = 3.0;
  }
  EXPECT_EQ(cluster::build_profiles(s, 24)[0].profile[5], 2.0);
  EXPECT_THROW(cluster::build_profiles(s, 25), DataError);
}

TEST(Kmeans, SingleClusterIsTheMean) {
  std::mt19937_64 rng(2);
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 9; ++i) pts.push_back(random_vector(5, rng));
  const auto r = cluster::kmeans(pts, 1, cluster::Metric::euclidean, 0);
  for (std::size_t k = 0; k < 5; ++k) {
    double m = 0.0;
    for (const auto& p : pts) m += p[k];
    EXPECT_NEAR(r.centroids[0][k], m / 9.0, 1e-12);
  }
}

TEST(Kmeans, SeparatesTwoDistantBlobs) {
  std::mt19937_64 rng(3);
  std::vector<std::vector<double>> pts;
  std::vector<int> truth;
  for (int i = 0; i < 20; ++i) {
    auto p = random_vector(6, rng);
    if (i % 2) for (double& x : p) x += 100.0;
    pts.push_back(p);
    truth.push_back(i % 2);
  }
  for (auto metric : {cluster::Metric::euclidean, cluster::Metric::dtw}) {
    const auto r = cluster::kmeans(pts, 2, metric, 5);
    EXPECT_EQ(cluster::adjusted_rand_index(r.labels, truth), 1.0);
  }
}

TEST(Kmeans, RecoversArchetypesFromSyntheticProfiles) {
  data::SynthCitySpec spec;
  spec.rows = spec.cols = 8;
  spec.noise = 0.01;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto city = data::synth_city(spec, seed);
    std::vector<std::vector<double>> pts;
    for (const auto& p : cluster::build_profiles(city.series, 24)) pts.push_back(p.profile);
    const auto r = cluster::kmeans(pts, 4, cluster::Metric::euclidean, seed);
    EXPECT_EQ(cluster::adjusted_rand_index(r.labels, city.archetype), 1.0);
  }
}

TEST(Kmeans, ObjectiveNeverIncreases) {
  std::mt19937_64 rng(4);
  for (auto metric : {cluster::Metric::euclidean, cluster::Metric::dtw}) {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<std::vector<double>> pts;
      for (int i = 0; i < 30; ++i) pts.push_back(random_vector(8, rng));
      const auto r = cluster::kmeans(pts, 4, metric, static_cast<std::uint64_t>(trial));
      for (std::size_t i = 1; i < r.objective.size(); ++i) EXPECT_LE(r.objective[i], r.objective[i - 1] + 1e-12);
    }
  }
}

TEST(Kmeans, DeterministicAndEveryPointLabelled) {
  std::mt19937_64 rng(5);
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 25; ++i) pts.push_back(random_vector(4, rng));
  const auto a = cluster::kmeans(pts, 3, cluster::Metric::euclidean, 11);
  const auto b = cluster::kmeans(pts, 3, cluster::Metric::euclidean, 11);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.centroids, b.centroids);
  std::size_t total = 0;
  for (std::size_t n : cluster::label_histogram(a.labels, 3)) total += n;
  EXPECT_EQ(total, pts.size());
  for (const auto& asg : cluster::assignments(a.labels, 3)) {
    double ones = 0.0;
    for (double x : asg.one_hot) ones += x;
    EXPECT_EQ(ones, 1.0);
  }
}

TEST(Kmeans, IdenticalProfilesReseedEmptyClusters) {
  std::vector<std::vector<double>> pts(6, std::vector<double>{1.0, 2.0, 3.0});
  const auto r = cluster::kmeans(pts, 3, cluster::Metric::euclidean, 0);
  EXPECT_EQ(r.labels.size(), 6u);
  EXPECT_EQ(r.centroids.size(), 3u);
}

TEST(Kmeans, RejectsTooFewProfiles) {
  std::vector<std::vector<double>> pts(2, std::vector<double>{1.0});
  EXPECT_THROW(cluster::kmeans(pts, 3, cluster::Metric::euclidean, 0), DataError);
}

TEST(Dtw, HandValues) {
  const std::vector<double> z{0, 0, 0}, o{1, 1, 1};
  EXPECT_EQ(cluster::dtw_distance(z, o), 3.0);
  std::mt19937_64 rng(6);
  const auto x = random_vector(7, rng);
  EXPECT_EQ(cluster::dtw_distance(x, x), 0.0);
  EXPECT_THROW(cluster::dtw_distance(std::vector<double>{}, x), std::invalid_argument);
}

TEST(Dtw, MatchesExhaustivePathEnumeration) {
  std::mt19937_64 rng(7);
  for (std::size_t n = 1; n <= 8; ++n)
    for (std::size_t m = 1; m <= 8; ++m) {
      const auto a = random_vector(n, rng), b = random_vector(m, rng);
      EXPECT_NEAR(cluster::dtw_distance(a, b), acceptance::detail::dtw_brute(a, b, 0, 0), 1e-12);
    }
}

TEST(Dtw, SymmetricAndBoundedByDiagonal) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_vector(12, rng), b = random_vector(12, rng);
    EXPECT_EQ(cluster::dtw_distance(a, b), cluster::dtw_distance(b, a));
    EXPECT_LE(cluster::dtw_distance(a, b), cluster::squared_euclidean(a, b) + 1e-12);
  }
}

TEST(AdjustedRandIndex, KnownValues) {
  const std::vector<int> a{0, 0, 1, 1}, b{1, 1, 0, 0}, c{0, 1, 0, 1};
  EXPECT_EQ(cluster::adjusted_rand_index(a, b), 1.0);
  // sklearn.metrics.adjusted_rand_score([0,0,1,1],[0,1,0,1]) = -0.5
  EXPECT_NEAR(cluster::adjusted_rand_index(a, c), -0.5, 1e-12);
}

TEST(ClusterCsv, AssignmentsOneRowPerRegion) {
  std::ostringstream os;
  const std::vector<int> labels{2, 0, 1};
  cluster::write_assignments_csv(os, labels, "x");
  const std::string s = os.str();
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 4);
}
