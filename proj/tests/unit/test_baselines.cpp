#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fixtures.hpp"
#include "metast/baselines.hpp"
#include "metast/experiment.hpp"

using namespace metast;
using fixture::bitwise_equal;

namespace {

data::GridSeries one_region(const std::vector<double>& x, data::Interval iv = data::Interval::hour) {
  data::GridSeries s;
  s.rows = s.cols = 1;
  s.interval = iv;
  s.t0 = 0;
  s.values = Tensor(Shape{x.size(), 1, 1, 1}, x);
  return s;
}

}  // namespace

TEST(HistoricalAverage, MeanOfPhaseValues) {
  std::vector<double> x(48, 0.0);
  x[9] = 2.0;
  x[33] = 4.0;
  const auto m = baseline::ha_fit(one_region(x), 48);
  const auto p = baseline::ha_predict(m, 57, 0, 0);
  EXPECT_EQ(p.value, 3.0);
  EXPECT_FALSE(p.fallback);
}

TEST(HistoricalAverage, NoiselessPeriodicSeriesIsExact) {
  data::SynthCitySpec spec;
  spec.rows = spec.cols = 3;
  spec.noise = 0.0;
  spec.periods = 10;
  const auto city = data::synth_city(spec, 3);
  const std::size_t train_end = 24 * 7;
  const auto m = baseline::ha_fit(city.series, train_end);
  for (std::size_t t = train_end; t < city.series.steps(); ++t)
    for (std::size_t r = 0; r < 9; ++r)
      for (std::size_t ch = 0; ch < 2; ++ch) EXPECT_EQ(baseline::ha_predict(m, t, r, ch).value, city.series.at(t, r, ch));
}

TEST(HistoricalAverage, FallsBackToRegionMeanWhenPhaseUnseen) {
  data::GridSeries s = one_region(std::vector<double>(30, 1.0));
  s.observed = Tensor(Shape{30, 1, 1}, 1.0);
  for (std::size_t t = 0; t < 30; ++t) s.values[t] = static_cast<double>(t % 3);
  (*s.observed)[5] = 0.0;
  const auto m = baseline::ha_fit(s, 24);
  const auto p = baseline::ha_predict(m, 29, 0, 0);
  EXPECT_TRUE(p.fallback);
  double sum = 0.0;
  for (std::size_t t = 0; t < 24; ++t)
    if (t != 5) sum += s.values[t];
  EXPECT_NEAR(p.value, sum / 23.0, 1e-12);
}

TEST(HistoricalAverage, InvariantToShufflingWithinPhase) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> x(24 * 6);
  for (double& v : x) v = n(rng);
  std::vector<double> y = x;
  // Swap day 1 and day 4, which permutes the observations of every phase.
  std::swap_ranges(y.begin() + 24, y.begin() + 48, y.begin() + 96);
  const auto a = baseline::ha_fit(one_region(x), x.size());
  const auto b = baseline::ha_fit(one_region(y), y.size());
  for (std::size_t k = 0; k < 24; ++k) EXPECT_NEAR(a.phase_mean[k], b.phase_mean[k], 1e-15);
}

TEST(HistoricalAverage, MonthlyPhase) {
  std::vector<double> x(36);
  for (std::size_t t = 0; t < 36; ++t) x[t] = static_cast<double>(t % 12) + (t >= 12 ? 1.0 : 0.0);
  const auto m = baseline::ha_fit(one_region(x, data::Interval::month), 24);
  EXPECT_EQ(m.period, 12u);
  EXPECT_DOUBLE_EQ(baseline::ha_predict(m, 26, 0, 0).value, 2.5);
}

TEST(HistoricalAverage, NoiseFloorOnThirtyDays) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    data::SynthCitySpec spec;
    spec.rows = spec.cols = 4;
    spec.noise = 0.1;
    spec.periods = 37;
    const auto city = data::synth_city(spec, seed);
    const std::size_t train_end = 24 * 30;
    const auto m = baseline::ha_fit(city.series, train_end);
    std::vector<double> pred, truth;
    for (std::size_t t = train_end; t < city.series.steps(); ++t)
      for (std::size_t r = 0; r < city.series.regions(); ++r)
        for (std::size_t ch = 0; ch < 2; ++ch) {
          pred.push_back(baseline::ha_predict(m, t, r, ch).value);
          truth.push_back(city.series.at(t, r, ch));
        }
    const double e = metrics::rmse(pred, truth);
    EXPECT_GE(e, 0.09);
    EXPECT_LE(e, 0.13);
  }
}

TEST(ArimaLite, ConstantSeriesPredictsTheConstant) {
  const std::vector<double> x(40, 2.75);
  const auto fit = baseline::ar_fit(x, {1, 0, 1e-6});
  EXPECT_NEAR(baseline::ar_predict_next(fit, x), 2.75, 1e-9);
}

TEST(ArimaLite, RecoversAr1Coefficient) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 0.01);
  std::vector<double> x{1.0};
  for (int t = 1; t < 2000; ++t) x.push_back(0.5 * x.back() + n(rng));
  const auto fit = baseline::ar_fit(x, {1, 0, 1e-6});
  EXPECT_GE(fit.coeffs[0], 0.45);
  EXPECT_LE(fit.coeffs[0], 0.55);
}

TEST(ArimaLite, ResidualsMatchNormalEquationsByCramersRule) {
  std::vector<double> x(50);
  for (std::size_t t = 0; t < 50; ++t) {
    const double s = static_cast<double>(t);
    x[t] = std::sin(0.3 * s) + 0.2 * std::cos(1.7 * s * s) + 0.01 * s;
  }
  const auto fit = baseline::ar_fit(x, {2, 0, 0.0});
  double s11 = 0, s12 = 0, s22 = 0, r1 = 0, r2 = 0;
  for (std::size_t t = 2; t < 50; ++t) {
    const double a = x[t - 1], b = x[t - 2];
    s11 += a * a;
    s12 += a * b;
    s22 += b * b;
    r1 += a * x[t];
    r2 += b * x[t];
  }
  const double det = s11 * s22 - s12 * s12;
  const double c1 = (r1 * s22 - s12 * r2) / det, c2 = (s11 * r2 - s12 * r1) / det;
  const auto res = baseline::ar_residuals(fit, x);
  ASSERT_EQ(res.size(), 48u);
  for (std::size_t t = 2; t < 50; ++t) EXPECT_NEAR(res[t - 2], x[t] - c1 * x[t - 1] - c2 * x[t - 2], 1e-8);
}

TEST(ArimaLite, DifferencedLinearTrendExtrapolates) {
  std::vector<double> x(30);
  for (std::size_t t = 0; t < 30; ++t) x[t] = 3.0 + 0.5 * static_cast<double>(t);
  const auto fit = baseline::ar_fit(x, {1, 1, 1e-6});
  EXPECT_NEAR(baseline::ar_predict_next(fit, x), 3.0 + 0.5 * 30.0, 1e-9);
}

TEST(ArimaLite, RejectsBadOrdersAndShortHistory) {
  const std::vector<double> x(10, 1.0);
  EXPECT_THROW(baseline::ar_fit(x, {0, 0, 1e-6}), ConfigError);
  EXPECT_THROW(baseline::ar_fit(x, {1, 2, 1e-6}), ConfigError);
  const auto fit = baseline::ar_fit(x, {3, 1, 1e-6});
  EXPECT_THROW(baseline::ar_predict_next(fit, std::span<const double>(x).first(3)), DataError);
}

TEST(ArimaLite, ForecastShapeAndRollingHistory) {
  std::vector<double> x(60);
  for (std::size_t t = 0; t < 60; ++t) x[t] = std::pow(0.9, static_cast<double>(t));
  const auto fc = baseline::ar_forecast(one_region(x), 40, {1, 0, 1e-6});
  ASSERT_EQ(fc.predictions.dim(0), 20u);
  for (std::size_t t = 40; t < 60; ++t) EXPECT_NEAR(fc.predictions[t - 40], x[t], 1e-9);
}

class NeuralBaselines : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new experiment::ExperimentConfig(presets::traffic());
    for (auto* list : {&cfg_->sources, &cfg_->targets})
      for (auto& e : *list) e.synth.rows = e.synth.cols = 3;
    cfg_->net.cnn_filters = 4;
    cfg_->net.spatial_dim = 8;
    cfg_->net.lstm_hidden = 8;
    cfg_->finetune.pretrain_steps = 300;
    cfg_->finetune.batch_size = 32;
    data_ = new experiment::PreparedData(experiment::prepare(*cfg_));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete cfg_;
  }
  static experiment::ExperimentConfig* cfg_;
  static experiment::PreparedData* data_;
};
experiment::ExperimentConfig* NeuralBaselines::cfg_ = nullptr;
experiment::PreparedData* NeuralBaselines::data_ = nullptr;

TEST_F(NeuralBaselines, NoTrainingIsTheRandomInit) {
  auto meta_cfg = cfg_->meta;
  meta_cfg.target_steps = 0;
  auto ft = cfg_->finetune;
  ft.pretrain_steps = 0;
  const std::vector<const std::vector<net::TrainingSample>*> pools{&data_->sources[0].train};
  const auto& target = data_->targets[0][0].train;
  const ParamSet tuned = baseline::fine_tune(pools, target, cfg_->net, meta_cfg, ft, 9);
  const ParamSet scratch = baseline::train_scratch(target, cfg_->net, meta_cfg, 9);
  auto plain = meta_cfg;
  plain.use_memory = false;
  EXPECT_TRUE(bitwise_equal(tuned, meta::initial_state(cfg_->net, plain, 9).theta));
  EXPECT_TRUE(bitwise_equal(scratch, tuned));
}

TEST_F(NeuralBaselines, MultiWithOneSourceEqualsSingle) {
  auto ft = cfg_->finetune;
  ft.pretrain_steps = 20;
  auto meta_cfg = cfg_->meta;
  meta_cfg.target_steps = 10;
  const std::vector<const std::vector<net::TrainingSample>*> one{&data_->sources[1].train};
  const auto& target = data_->targets[0][0].train;
  const ParamSet a = baseline::fine_tune(one, target, cfg_->net, meta_cfg, ft, 4);
  const ParamSet b = baseline::fine_tune(one, target, cfg_->net, meta_cfg, ft, 4);
  EXPECT_TRUE(bitwise_equal(a, b));
}

TEST_F(NeuralBaselines, MultiFtBeatsScratchOnOneDayTarget) {
  std::vector<const std::vector<net::TrainingSample>*> pools;
  for (const auto& s : data_->sources) pools.push_back(&s.train);
  const auto& target = data_->targets[0][0];
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const ParamSet ft = baseline::fine_tune(pools, target.train, cfg_->net, cfg_->meta, cfg_->finetune, seed);
    const ParamSet sc = baseline::train_scratch(target.train, cfg_->net, cfg_->meta, seed);
    const double e_ft = experiment::rmse_raw(target, target.test, net::predict(ft, target.test, cfg_->net));
    const double e_sc = experiment::rmse_raw(target, target.test, net::predict(sc, target.test, cfg_->net));
    wins += e_ft < e_sc;
  }
  EXPECT_GE(wins, 4);
}

TEST_F(NeuralBaselines, PretrainingRejectsEmptyPool) {
  std::mt19937_64 rng(1);
  const ParamSet theta = net::init_params(cfg_->net, rng);
  EXPECT_THROW(baseline::pretrain(theta, {}, cfg_->net, cfg_->finetune, 1), DataError);
}
