#pragma once

// Periodic region profiles, K-means under Euclidean or DTW distance, and
// the adjusted Rand index used to score recovered groupings.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "metast/data.hpp"
#include "metast/error.hpp"
#include "metast/tensor.hpp"

namespace metast::cluster {

struct RegionPattern {
  std::size_t region = 0;
  std::vector<double> profile;  // length P
  bool empty = false;           // no observations at any phase
};

/// profile[k] = mean over t < t_end with (phase0 + t) mod P == k of the
/// channel-averaged value. Unobserved cells are ignored.
inline std::vector<RegionPattern> build_profiles(const data::GridSeries& series, std::size_t period,
                                                 std::size_t t_end = std::size_t(-1)) {
  t_end = std::min(t_end, series.steps());
  if (period == 0) throw ConfigError("profile period must be positive");
  if (t_end < period) {
    throw DataError("series of " + std::to_string(t_end) + " intervals is shorter than one period of " +
                    std::to_string(period));
  }
  const std::size_t phase0 = data::phase_offset(series.t0, series.interval);
  const std::size_t v = series.channels();
  std::vector<RegionPattern> out(series.regions());
  for (std::size_t r = 0; r < series.regions(); ++r) {
    std::vector<double> sum(period, 0.0);
    std::vector<std::size_t> count(period, 0);
    for (std::size_t t = 0; t < t_end; ++t) {
      if (!series.is_observed(t, r)) continue;
      double x = 0.0;
      for (std::size_t ch = 0; ch < v; ++ch) x += series.at(t, r, ch);
      const std::size_t k = (phase0 + t) % period;
      sum[k] += x / static_cast<double>(v);
      ++count[k];
    }
    out[r].region = r;
    out[r].profile.resize(period);
    std::size_t seen = 0;
    for (std::size_t k = 0; k < period; ++k) {
      out[r].profile[k] = count[k] ? sum[k] / static_cast<double>(count[k]) : 0.0;
      seen += count[k];
    }
    out[r].empty = seen == 0;
  }
  return out;
}

/// Classic DTW with squared pointwise cost and match/insert/delete steps.
inline double dtw_distance(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("dtw_distance of an empty series");
  const std::size_t n = a.size(), m = b.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = inf;
    for (std::size_t j = 1; j <= m; ++j) {
      const double d = a[i - 1] - b[j - 1];
      cur[j] = d * d + std::min({prev[j - 1], prev[j], cur[j - 1]});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

inline double squared_euclidean(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("profiles of different length");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

enum class Metric { euclidean, dtw };

inline Metric metric_from_string(const std::string& s) {
  if (s == "euclidean") return Metric::euclidean;
  if (s == "dtw") return Metric::dtw;
  throw ConfigError("unknown clustering metric '" + s + "'");
}

inline double distance(Metric m, std::span<const double> a, std::span<const double> b) {
  return m == Metric::euclidean ? squared_euclidean(a, b) : dtw_distance(a, b);
}

struct KMeansResult {
  std::vector<std::vector<double>> centroids;
  std::vector<int> labels;
  std::vector<double> objective;  // after each iteration's reassignment
  std::size_t iterations = 0;
  std::size_t reseeded = 0;
};

namespace detail {

inline std::size_t argmax(const std::vector<double>& x) {
  return static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
}

}  // namespace detail

/// Lloyd iterations from farthest-point seeding. Centroids are coordinate
/// means of their members under either metric; under DTW a cluster keeps its
/// previous centroid when the mean would raise its members' cost. An empty
/// cluster is reseeded with the point farthest from its current centroid.
inline KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t G, Metric metric,
                           std::uint64_t seed, std::size_t max_iter = 300) {
  if (G == 0) throw ConfigError("number of clusters must be positive");
  if (points.size() < G) {
    throw DataError("kmeans: " + std::to_string(points.size()) + " profiles for " + std::to_string(G) + " clusters");
  }
  const std::size_t n = points.size();
  const std::size_t P = points[0].size();
  for (const auto& p : points) {
    if (p.size() != P) throw DataError("kmeans: profiles of different length");
  }
  std::mt19937_64 rng(seed);
  KMeansResult res;
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  const std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  res.centroids.push_back(points[first]);
  while (res.centroids.size() < G) {
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], distance(metric, points[i], res.centroids.back()));
    res.centroids.push_back(points[detail::argmax(nearest)]);
  }

  res.labels.assign(n, -1);
  std::vector<double> dist(n, 0.0);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = false;
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t g = 0; g < G; ++g) {
        const double d = distance(metric, points[i], res.centroids[g]);
        if (d < bd) {
          bd = d;
          best = static_cast<int>(g);
        }
      }
      if (best != res.labels[i]) changed = true;
      res.labels[i] = best;
      dist[i] = bd;
      obj += bd;
    }
    res.objective.push_back(obj);
    res.iterations = it + 1;

    std::vector<std::vector<double>> sum(G, std::vector<double>(P, 0.0));
    std::vector<std::size_t> count(G, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto g = static_cast<std::size_t>(res.labels[i]);
      for (std::size_t k = 0; k < P; ++k) sum[g][k] += points[i][k];
      ++count[g];
    }
    bool reseeded = false;
    for (std::size_t g = 0; g < G; ++g) {
      if (count[g] == 0) {
        // Take the worst-served point from a cluster that has more than one.
        std::size_t pick = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (count[static_cast<std::size_t>(res.labels[i])] < 2) continue;
          if (pick == n || dist[i] > dist[pick]) pick = i;
        }
        if (pick == n) throw DataError("kmeans: cannot reseed an empty cluster");
        const auto old = static_cast<std::size_t>(res.labels[pick]);
        for (std::size_t k = 0; k < P; ++k) sum[old][k] -= points[pick][k];
        --count[old];
        res.labels[pick] = static_cast<int>(g);
        sum[g] = points[pick];
        count[g] = 1;
        dist[pick] = 0.0;
        ++res.reseeded;
        reseeded = true;
      }
    }
    for (std::size_t g = 0; g < G; ++g) {
      std::vector<double> mean(P);
      for (std::size_t k = 0; k < P; ++k) mean[k] = sum[g][k] / static_cast<double>(count[g]);
      if (metric == Metric::dtw && count[g] > 1) {
        // The mean does not minimize DTW cost, so keep it only when it lowers
        // the cluster's cost. This keeps the objective monotone.
        double keep = 0.0, take = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (static_cast<std::size_t>(res.labels[i]) != g) continue;
          keep += distance(metric, points[i], res.centroids[g]);
          take += distance(metric, points[i], mean);
        }
        if (!(take < keep)) continue;
      }
      res.centroids[g] = std::move(mean);
    }
    if (!changed && !reseeded) break;
  }
  return res;
}

/// Sum of member-to-own-centroid distances.
inline double kmeans_objective(const std::vector<std::vector<double>>& points, const KMeansResult& r, Metric m) {
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    s += distance(m, points[i], r.centroids[static_cast<std::size_t>(r.labels[i])]);
  }
  return s;
}

inline double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("ARI needs equal nonempty labelings");
  std::map<std::pair<int, int>, std::size_t> table;
  std::map<int, std::size_t> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++table[{a[i], b[i]}];
    ++ra[a[i]];
    ++rb[b[i]];
  }
  auto c2 = [](std::size_t x) { return 0.5 * static_cast<double>(x) * (static_cast<double>(x) - 1.0); };
  double idx = 0, sa = 0, sb = 0;
  for (const auto& [k, v] : table) idx += c2(v);
  for (const auto& [k, v] : ra) sa += c2(v);
  for (const auto& [k, v] : rb) sb += c2(v);
  const double expected = sa * sb / c2(a.size());
  const double max_idx = 0.5 * (sa + sb);
  if (max_idx == expected) return 1.0;  // both labelings trivial
  return (idx - expected) / (max_idx - expected);
}

struct ClusterAssignment {
  std::size_t region = 0;
  int cluster = 0;
  std::vector<double> one_hot;
};

inline std::vector<ClusterAssignment> assignments(std::span<const int> labels, std::size_t G) {
  std::vector<ClusterAssignment> out;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= G) throw DataError("cluster label out of range");
    ClusterAssignment a{r, labels[r], std::vector<double>(G, 0.0)};
    a.one_hot[static_cast<std::size_t>(labels[r])] = 1.0;
    out.push_back(std::move(a));
  }
  return out;
}

inline std::vector<std::size_t> label_histogram(std::span<const int> labels, std::size_t G) {
  std::vector<std::size_t> h(G, 0);
  for (int l : labels) ++h.at(static_cast<std::size_t>(l));
  return h;
}

inline void write_assignments_csv(std::ostream& os, std::span<const int> labels, const std::string& city = "") {
  os << "city,region_id,cluster_id\n";
  for (std::size_t r = 0; r < labels.size(); ++r) os << city << ',' << r << ',' << labels[r] << '\n';
}

inline void write_profiles_csv(std::ostream& os, const std::vector<RegionPattern>& profiles,
                               const std::string& city = "") {
  os << "city,region_id,phase,value\n";
  for (const auto& p : profiles)
    for (std::size_t k = 0; k < p.profile.size(); ++k) os << city << ',' << p.region << ',' << k << ',' << p.profile[k] << '\n';
}

}  // namespace metast::cluster
