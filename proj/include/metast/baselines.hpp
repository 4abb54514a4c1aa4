#pragma once

// Reference predictors: historical average, least-squares autoregression on
// an optionally differenced series ("ARIMA-lite"), supervised pretraining
// plus fine-tuning, and an ST-net trained from scratch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "metast/data.hpp"
#include "metast/error.hpp"
#include "metast/meta_learner.hpp"
#include "metast/params.hpp"
#include "metast/st_net.hpp"
#include "metast/tensor.hpp"

namespace metast::baseline {

// ---------------------------------------------------------------------------
// Historical average

struct HaModel {
  std::size_t period = 24;
  std::size_t phase0 = 0;
  std::size_t regions = 0;
  std::size_t channels = 0;
  std::vector<double> phase_mean;   // [period, regions, channels]
  std::vector<std::size_t> phase_count;  // [period, regions]
  std::vector<double> region_mean;  // [regions, channels]
};

struct HaPrediction {
  double value = 0.0;
  bool fallback = false;  // no training observation at that phase
};

namespace detail {

// Mean computed as x0 + mean(x - x0) so that repeated identical values come
// back bit-exact.
struct ShiftedMean {
  bool any = false;
  double x0 = 0.0;
  double acc = 0.0;
  std::size_t n = 0;

  void add(double x) {
    if (!any) {
      any = true;
      x0 = x;
    }
    acc += x - x0;
    ++n;
  }
  double value() const { return n ? x0 + acc / static_cast<double>(n) : 0.0; }
};

}  // namespace detail

/// Fits phase means on intervals [0, train_end) in raw units.
inline HaModel ha_fit(const data::GridSeries& series, std::size_t train_end, std::size_t period = 0) {
  if (period == 0) period = data::default_period(series.interval);
  train_end = std::min(train_end, series.steps());
  if (train_end == 0) throw DataError("historical average needs training data");
  HaModel m;
  m.period = period;
  m.phase0 = data::phase_offset(series.t0, series.interval);
  m.regions = series.regions();
  m.channels = series.channels();
  std::vector<detail::ShiftedMean> by_phase(period * m.regions * m.channels), by_region(m.regions * m.channels);
  m.phase_count.assign(period * m.regions, 0);
  for (std::size_t t = 0; t < train_end; ++t) {
    const std::size_t k = (m.phase0 + t) % period;
    for (std::size_t r = 0; r < m.regions; ++r) {
      if (!series.is_observed(t, r)) continue;
      ++m.phase_count[k * m.regions + r];
      for (std::size_t ch = 0; ch < m.channels; ++ch) {
        const double x = series.at(t, r, ch);
        by_phase[(k * m.regions + r) * m.channels + ch].add(x);
        by_region[r * m.channels + ch].add(x);
      }
    }
  }
  m.phase_mean.resize(by_phase.size());
  for (std::size_t i = 0; i < by_phase.size(); ++i) m.phase_mean[i] = by_phase[i].value();
  m.region_mean.resize(by_region.size());
  for (std::size_t i = 0; i < by_region.size(); ++i) m.region_mean[i] = by_region[i].value();
  return m;
}

/// Prediction for absolute interval t of the series the model was fitted on.
inline HaPrediction ha_predict(const HaModel& m, std::size_t t, std::size_t region, std::size_t ch) {
  const std::size_t k = (m.phase0 + t) % m.period;
  if (m.phase_count.at(k * m.regions + region) == 0) return {m.region_mean.at(region * m.channels + ch), true};
  return {m.phase_mean[(k * m.regions + region) * m.channels + ch], false};
}

// ---------------------------------------------------------------------------
// ARIMA-lite

struct ArOptions {
  std::size_t p = 3;  // autoregressive order
  std::size_t q = 1;  // differencing order, 0 or 1
  double ridge = 1e-6;
};

struct ArFit {
  std::vector<double> coeffs;  // coeffs[k] multiplies lag k+1
  std::size_t q = 0;
  bool ridge_used = false;
};

namespace detail {

inline std::vector<double> difference(std::span<const double> x, std::size_t q) {
  std::vector<double> y(x.begin(), x.end());
  for (std::size_t d = 0; d < q; ++d) {
    for (std::size_t i = y.size() - 1; i > 0; --i) y[i] -= y[i - 1];
    y.erase(y.begin());
  }
  return y;
}

// Solves the symmetric normal equations a x = b through a Cholesky
// factorization; false when `a` is not numerically positive definite.
inline bool cholesky_solve(const std::vector<double>& a, const std::vector<double>& b, std::size_t n,
                           std::vector<double>& x) {
  using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const Matrix> A(a.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const Eigen::LLT<Matrix> llt(A);
  if (llt.info() != Eigen::Success) return false;
  // Pivots below this fraction of the trace count as singular.
  const double tol = 1e-12 * std::max(A.diagonal().cwiseAbs().sum(), 1e-300);
  if (!(llt.matrixLLT().diagonal().array().square().minCoeff() > tol)) return false;
  const Eigen::VectorXd sol = llt.solve(Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(n)));
  x.assign(sol.data(), sol.data() + sol.size());
  return true;
}

}  // namespace detail

/// Ordinary least squares y_t = sum_k a_k y_{t-k} (no intercept) on the
/// q-times differenced series.
inline ArFit ar_fit(std::span<const double> series, const ArOptions& opt) {
  if (opt.q > 1) throw ConfigError("differencing order must be 0 or 1");
  if (opt.p == 0) throw ConfigError("AR order must be positive");
  if (series.size() <= opt.p + opt.q) {
    throw DataError("AR(" + std::to_string(opt.p) + ") with differencing " + std::to_string(opt.q) + " needs more than " +
                    std::to_string(opt.p + opt.q) + " observations");
  }
  const std::vector<double> y = detail::difference(series, opt.q);
  const std::size_t p = opt.p;
  std::vector<double> xtx(p * p, 0.0), xty(p, 0.0);
  for (std::size_t t = p; t < y.size(); ++t) {
    for (std::size_t i = 0; i < p; ++i) {
      xty[i] += y[t - 1 - i] * y[t];
      for (std::size_t j = 0; j < p; ++j) xtx[i * p + j] += y[t - 1 - i] * y[t - 1 - j];
    }
  }
  ArFit fit;
  fit.q = opt.q;
  if (!detail::cholesky_solve(xtx, xty, p, fit.coeffs)) {
    for (std::size_t i = 0; i < p; ++i) xtx[i * p + i] += opt.ridge;
    fit.ridge_used = true;
    if (!detail::cholesky_solve(xtx, xty, p, fit.coeffs)) throw NumericalError("AR normal equations are singular");
  }
  return fit;
}

/// One-step prediction of the value following `history` (raw scale).
inline double ar_predict_next(const ArFit& fit, std::span<const double> history) {
  const std::size_t p = fit.coeffs.size();
  if (history.size() < p + fit.q) throw DataError("not enough history for an AR prediction");
  const std::vector<double> y = detail::difference(history.subspan(history.size() - p - fit.q), fit.q);
  double next = 0.0;
  for (std::size_t k = 0; k < p; ++k) next += fit.coeffs[k] * y[y.size() - 1 - k];
  return fit.q ? history.back() + next : next;
}

/// In-sample residuals on the differenced series, one per fitted equation.
inline std::vector<double> ar_residuals(const ArFit& fit, std::span<const double> series) {
  const std::vector<double> y = detail::difference(series, fit.q);
  const std::size_t p = fit.coeffs.size();
  std::vector<double> r;
  for (std::size_t t = p; t < y.size(); ++t) {
    double pred = 0.0;
    for (std::size_t k = 0; k < p; ++k) pred += fit.coeffs[k] * y[t - 1 - k];
    r.push_back(y[t] - pred);
  }
  return r;
}

struct ArForecast {
  Tensor predictions;  // [T - train_end, regions, channels], raw units
  std::size_t ridge_fallbacks = 0;
};

/// Per-(region, channel) fit on [0, train_end) and rolling one-step
/// predictions over [train_end, T) using observed history.
inline ArForecast ar_forecast(const data::GridSeries& series, std::size_t train_end, const ArOptions& opt) {
  const std::size_t T = series.steps(), R = series.regions(), V = series.channels();
  if (train_end == 0 || train_end >= T) throw DataError("AR forecast needs a non-empty test span");
  ArForecast out;
  out.predictions = Tensor(Shape{T - train_end, R, V});
  std::vector<double> x(T);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t ch = 0; ch < V; ++ch) {
      for (std::size_t t = 0; t < T; ++t) x[t] = series.at(t, r, ch);
      const ArFit fit = ar_fit(std::span<const double>(x).first(train_end), opt);
      out.ridge_fallbacks += fit.ridge_used;
      for (std::size_t t = train_end; t < T; ++t) {
        out.predictions[((t - train_end) * R + r) * V + ch] = ar_predict_next(fit, std::span<const double>(x).first(t));
      }
    }
  return out;
}

// ---------------------------------------------------------------------------
// Neural baselines

// Mixed into the seed of the pretraining minibatch stream.
inline constexpr std::uint64_t kPretrainSeedMix = 0x5851F42D4C957F2DULL;

struct FineTuneConfig {
  std::size_t pretrain_steps = 2000;
  double pretrain_lr = 1e-3;
  std::size_t batch_size = 128;
  meta::OptimizerKind optimizer = meta::OptimizerKind::adam;
};

/// Supervised training of the base head from theta0 on `pool`, minibatches
/// drawn uniformly with replacement.
inline ParamSet pretrain(const ParamSet& theta0, std::span<const net::TrainingSample> pool,
                         const net::StNetConfig& net_cfg, const FineTuneConfig& ft, std::uint64_t seed) {
  if (ft.pretrain_steps == 0) return theta0;
  if (pool.empty()) throw DataError("pretraining pool is empty");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  meta::OuterOptimizer opt(ft.optimizer, ft.pretrain_lr);
  ParamSet theta = theta0;
  std::vector<std::size_t> idx(ft.batch_size);
  for (std::size_t step = 0; step < ft.pretrain_steps; ++step) {
    for (auto& i : idx) i = pick(rng);
    const net::Batch b = net::make_batch(pool, idx, net_cfg);
    ad::Graph g;
    const VarMap tv = bind(g, theta, true);
    theta = opt.step(theta, gradients_of(g, net::mse_loss(tv, b, net_cfg), tv));
  }
  return theta;
}

/// Single-FT and Multi-FT: pretrain on the pooled source samples (one city
/// or all of them), then adapt to the target with the same schedule that
/// meta-learned initializations receive.
inline ParamSet fine_tune(std::span<const std::vector<net::TrainingSample>* const> sources,
                          std::span<const net::TrainingSample> target_train, const net::StNetConfig& net_cfg,
                          const meta::MetaConfig& cfg, const FineTuneConfig& ft, std::uint64_t seed) {
  std::vector<net::TrainingSample> pool;
  for (const auto* s : sources) pool.insert(pool.end(), s->begin(), s->end());
  meta::MetaConfig plain = cfg;
  plain.use_memory = false;
  const ParamSet theta0 = meta::initial_state(net_cfg, plain, seed).theta;
  const ParamSet pre = pretrain(theta0, pool, net_cfg, ft, seed ^ kPretrainSeedMix);
  if (plain.target_steps == 0) return pre;
  return meta::adapt_to_target(pre, ParamSet{}, target_train, net_cfg, plain, seed);
}

/// ST-net trained on the target data alone from a seeded initialization.
inline ParamSet train_scratch(std::span<const net::TrainingSample> target_train, const net::StNetConfig& net_cfg,
                              const meta::MetaConfig& cfg, std::uint64_t seed) {
  meta::MetaConfig plain = cfg;
  plain.use_memory = false;
  const ParamSet theta0 = meta::initial_state(net_cfg, plain, seed).theta;
  if (plain.target_steps == 0) return theta0;
  return meta::adapt_to_target(theta0, ParamSet{}, target_train, net_cfg, plain, seed);
}

}  // namespace metast::baseline
