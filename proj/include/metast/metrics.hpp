#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>

namespace metast::metrics {

/// sqrt(sum (p - y)^2 / n).
inline double rmse(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.empty()) throw std::invalid_argument("rmse of empty input");
  if (predictions.size() != targets.size()) {
    throw std::invalid_argument("rmse: " + std::to_string(predictions.size()) + " predictions vs " +
                                std::to_string(targets.size()) + " targets");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - targets[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(predictions.size()));
}

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  return boost::math::ibeta(a, b, x);
}

/// Two-sided tail probability P(|T| >= |t|) for Student's t with `dof` degrees.
inline double student_t_two_sided(double t, double dof) {
  if (!std::isfinite(t)) return 0.0;
  const boost::math::students_t dist(dof);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double mean_diff = 0.0;
  std::size_t n = 0;
  // Differences had zero variance; t is +-inf (or 0 when all differences are 0).
  bool degenerate = false;
};

/// Paired Student's t-test on a - b, paired by index (seed).
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: unequal run counts");
  if (a.size() < 2) throw std::invalid_argument("paired_t_test needs at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> diff(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    diff[i] = a[i] - b[i];
    mean += diff[i];
  }
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double d : diff) ss += (d - mean) * (d - mean);
  const double var = ss / static_cast<double>(n - 1);

  TTestResult r;
  r.n = n;
  r.mean_diff = mean;
  if (var == 0.0) {
    r.degenerate = true;
    if (mean == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = mean / std::sqrt(var / static_cast<double>(n));
  r.p = student_t_two_sided(r.t, static_cast<double>(n - 1));
  return r;
}

/// "**" for p < 0.01, "*" for p < 0.05, else empty.
inline std::string significance_stars(double p) {
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

}  // namespace metast::metrics
