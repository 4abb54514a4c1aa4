#pragma once

// Acceptance suite: property checks of the differentiable core, the memory
// and clustering contracts, baseline sanity, determinism, and the synthetic
// transfer benchmark. Every criterion runs even if an earlier one fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "metast/baselines.hpp"
#include "metast/clustering.hpp"
#include "metast/data.hpp"
#include "metast/experiment.hpp"
#include "metast/gradcheck.hpp"
#include "metast/meta_learner.hpp"
#include "metast/metrics.hpp"
#include "metast/params.hpp"
#include "metast/presets.hpp"
#include "metast/st_mem.hpp"
#include "metast/st_net.hpp"

namespace metast::acceptance {

struct Options {
  bool inject_gradient_fault = false;
  std::string output_dir = "acceptance";
  std::size_t threads = 1;
  std::vector<int> only;  // criterion ids to run; empty runs all
  std::function<void(const std::string&)> log;

  bool selected(int id) const { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); }
};

struct Criterion {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct Verdict {
  std::vector<Criterion> criteria;
  bool all_passed() const {
    for (const auto& c : criteria)
      if (!c.passed) return false;
    return !criteria.empty();
  }
};

// Tolerances and budgets.
inline constexpr int kGradTrials = 20;
inline constexpr double kGradTol = 1e-4;
inline constexpr double kGradBudgetSeconds = 120.0;
inline constexpr double kQuadraticTol = 1e-10;
inline constexpr double kMetaGradTol = 1e-3;
inline constexpr int kFreezeTrials = 100;
inline constexpr double kSimplexTol = 1e-9;
inline constexpr double kUniformLossTol = 1e-6;
inline constexpr std::size_t kDtwMaxLength = 8;
inline constexpr double kSignificance = 0.05;
inline constexpr double kMinImprovement = 0.02;
inline constexpr std::size_t kMaxMetaIters = 2000;
inline constexpr double kBenchmarkBudgetSeconds = 1200.0;
inline constexpr std::size_t kSweepInteriorSeeds = 3;
inline constexpr double kPatternAgreement = 0.8;
inline const std::vector<double> kGammaSweep{1e-6, 1e-5, 1e-4, 1e-3, 1e-2};

namespace detail {

inline std::string fmt(double x, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << x;
  return os.str();
}

/// Micro network used by the property checks.
inline net::StNetConfig micro_net(std::size_t window = 2, std::size_t hidden = 3, std::size_t slots = 3,
                                  std::size_t dim = 2) {
  net::StNetConfig c;
  c.patch_size = 3;
  c.channels = 2;
  c.cnn_layers = 1;
  c.cnn_filters = 2;
  c.kernel_size = 3;
  c.spatial_dim = 3;
  c.lstm_hidden = hidden;
  c.window = window;
  c.memory_slots = slots;
  c.memory_dim = dim;
  return c;
}

inline std::vector<net::TrainingSample> random_samples(std::size_t n, const net::StNetConfig& cfg,
                                                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<net::TrainingSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = out[i];
    s.patches.resize(cfg.window * cfg.patch_values());
    for (auto& x : s.patches) x = u(rng);
    s.target.resize(cfg.channels);
    for (auto& x : s.target) x = 0.5 * u(rng);
    s.region = i % 4;
    s.time = cfg.window + i;
  }
  return out;
}

inline meta::TaskSplit random_split(std::size_t n, const net::StNetConfig& cfg, std::mt19937_64& rng) {
  meta::TaskSplit split;
  split.support = random_samples(n, cfg, rng);
  split.query = random_samples(n, cfg, rng);
  std::uniform_int_distribution<int> label(0, static_cast<int>(cfg.memory_slots) - 1);
  for (std::size_t i = 0; i < n; ++i) split.query_labels.push_back(label(rng));
  return split;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

inline bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (a.names() != b.names()) return false;
  for (const auto& [name, t] : a)
    if (!bitwise_equal(t, b.at(name))) return false;
  return true;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// Brute-force minimum over every monotone warping path with unit steps.
inline double dtw_brute(std::span<const double> a, std::span<const double> b, std::size_t i, std::size_t j) {
  const double d = (a[i] - b[j]) * (a[i] - b[j]);
  if (i + 1 == a.size() && j + 1 == b.size()) return d;
  double best = std::numeric_limits<double>::infinity();
  if (i + 1 < a.size()) best = std::min(best, dtw_brute(a, b, i + 1, j));
  if (j + 1 < b.size()) best = std::min(best, dtw_brute(a, b, i, j + 1));
  if (i + 1 < a.size() && j + 1 < b.size()) best = std::min(best, dtw_brute(a, b, i + 1, j + 1));
  return d + best;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 1. Gradient correctness

/// Full ST-net + memory loss (mse + gamma * clustering) over every parameter
/// and the memory matrix.
inline gradcheck::Case full_loss_case() {
  gradcheck::Case c;
  c.name = "st-net+st-mem loss";
  const net::StNetConfig cfg = detail::micro_net();
  auto names = std::make_shared<std::vector<std::string>>();
  auto batch = std::make_shared<net::Batch>();
  auto labels = std::make_shared<Tensor>();
  c.inputs = [cfg, names, batch, labels](std::mt19937_64& rng) {
    ParamSet p = net::init_params(cfg, rng);
    p.set(mem::kMemoryName, gradcheck::random_tensor({cfg.memory_slots, cfg.memory_dim}, rng));
    const auto samples = detail::random_samples(3, cfg, rng);
    *batch = net::make_batch(samples, cfg);
    std::uniform_int_distribution<int> label(0, static_cast<int>(cfg.memory_slots) - 1);
    *labels = mem::one_hot({label(rng), label(rng), label(rng)}, cfg.memory_slots);
    names->clear();
    std::vector<Tensor> out;
    for (const auto& [name, t] : p) {
      names->push_back(name);
      out.push_back(t);
    }
    return out;
  };
  c.fn = [cfg, names, batch, labels](ad::Graph&, std::span<const ad::Var> v) {
    VarMap p;
    for (std::size_t i = 0; i < names->size(); ++i) p.emplace((*names)[i], v[i]);
    const auto fwd = net::forward_with_memory(p, var_at(p, mem::kMemoryName), *batch, cfg);
    const ad::Var mse = net::squared_error(fwd.prediction, batch->targets);
    return ad::add(mse, ad::scale(mem::clustering_loss(fwd.scores, *labels), 0.3));
  };
  return c;
}

inline Criterion gradient_correctness(const Options& opt) {
  Criterion c{1, "gradient correctness", false, "", 0.0};
  std::vector<gradcheck::Case> cases = gradcheck::op_cases();
  cases.push_back(full_loss_case());
  gradcheck::Options go;
  if (opt.inject_gradient_fault) {
    go.corrupt = [](std::vector<Tensor>& g) {
      for (auto& x : g.front().data()) x = -x;
    };
  }
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  std::string worst_case;
  std::size_t failures = 0;
  for (const auto& k : cases) {
    for (int t = 0; t < kGradTrials; ++t) {
      const gradcheck::Report r = gradcheck::check(k.fn, k.inputs(rng), go);
      if (!(r.max_rel_error <= kGradTol)) ++failures;
      if (!(r.max_rel_error <= worst)) {
        worst = r.max_rel_error;
        worst_case = k.name;
      }
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.passed = failures == 0 && secs < kGradBudgetSeconds;
  c.detail = std::to_string(cases.size()) + " cases x " + std::to_string(kGradTrials) +
             " trials, worst rel error " + detail::fmt(worst, 3) + " (" + worst_case + "), " +
             std::to_string(failures) + " failing trials, " + detail::fmt(secs, 3) + " s";
  return c;
}

// ---------------------------------------------------------------------------
// 2. Meta-gradient correctness

/// Second-order meta-gradient of the scalar task L(t) = (t - a)^2 used for
/// both support and query, against 2 (1 - 2 alpha)^2 (t0 - a).
inline double quadratic_meta_gradient_error(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0), alpha(0.01, 0.4);
  const double a = u(rng), t0 = u(rng);
  meta::MetaConfig cfg;
  cfg.inner_lr = alpha(rng);
  cfg.inner_steps = 1;
  cfg.gamma = 0.0;
  cfg.second_order = true;
  cfg.use_memory = false;
  auto loss = [a](ad::Graph& g, const VarMap& theta) {
    return ad::square(ad::sub(var_at(theta, "t"), g.constant(Tensor::scalar(a))));
  };
  meta::TaskObjective task;
  task.support = [loss](ad::Graph& g, const VarMap& theta, const VarMap&) { return loss(g, theta); };
  task.query = [loss](ad::Graph& g, const VarMap& theta, const VarMap&) -> meta::QueryTerms {
    return {loss(g, theta), {}};
  };
  ParamSet theta;
  theta.set("t", Tensor::scalar(t0));
  const std::vector<meta::TaskObjective> tasks{task};
  const meta::MetaGradient mg = meta::meta_gradient(theta, ParamSet{}, tasks, cfg);
  const double k = 1.0 - 2.0 * cfg.inner_lr;
  return std::fabs(mg.theta.at("t").item() - 2.0 * k * k * (t0 - a));
}

/// Relative error of the second-order meta-gradient of a micro ST-net with
/// memory against central differences of the outer loss.
inline double micro_meta_gradient_error(std::mt19937_64& rng) {
  const net::StNetConfig net_cfg = detail::micro_net();
  meta::MetaConfig cfg;
  cfg.inner_lr = 0.1;
  cfg.inner_steps = 1;
  cfg.gamma = 0.5;
  cfg.second_order = true;
  cfg.use_memory = true;
  const auto state = meta::initial_state(net_cfg, cfg, rng());
  ParamSet shared = state.shared;
  shared.set(mem::kMemoryName, gradcheck::random_tensor({net_cfg.memory_slots, net_cfg.memory_dim}, rng));
  std::vector<meta::TaskObjective> tasks;
  for (int k = 0; k < 2; ++k) tasks.push_back(meta::make_objective(detail::random_split(3, net_cfg, rng), net_cfg, cfg));
  const meta::MetaGradient mg = meta::meta_gradient(state.theta, shared, tasks, cfg);

  const double h = 1e-5;
  double diff = 0.0, na = 0.0, nn = 0.0;
  auto probe = [&](ParamSet& set, const ParamSet& analytic, bool is_theta) {
    for (auto& [name, t] : set) {
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double x = t[i];
        t[i] = x + h;
        const double up = is_theta ? meta::outer_loss(set, shared, tasks, cfg).total
                                   : meta::outer_loss(state.theta, set, tasks, cfg).total;
        t[i] = x - h;
        const double down = is_theta ? meta::outer_loss(set, shared, tasks, cfg).total
                                     : meta::outer_loss(state.theta, set, tasks, cfg).total;
        t[i] = x;
        const double num = (up - down) / (2.0 * h);
        const double ana = analytic.at(name)[i];
        diff += (ana - num) * (ana - num);
        na += ana * ana;
        nn += num * num;
      }
    }
  };
  ParamSet theta = state.theta;
  probe(theta, mg.theta, true);
  ParamSet mem_probe = shared;
  probe(mem_probe, mg.shared, false);
  const double denom = std::sqrt(std::max(na, nn));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

inline Criterion meta_gradient_correctness() {
  Criterion c{2, "meta-gradient correctness", false, "", 0.0};
  std::mt19937_64 rng(202);
  double quad = 0.0;
  for (int t = 0; t < 50; ++t) quad = std::max(quad, quadratic_meta_gradient_error(rng));
  double micro = 0.0;
  for (int t = 0; t < 3; ++t) micro = std::max(micro, micro_meta_gradient_error(rng));
  c.passed = quad <= kQuadraticTol && micro <= kMetaGradTol;
  c.detail = "quadratic max abs error " + detail::fmt(quad, 3) + " (tol 1e-10), micro ST-net rel error " +
             detail::fmt(micro, 3) + " (tol 1e-3)";
  return c;
}

// ---------------------------------------------------------------------------
// 3. Memory freeze

inline Criterion memory_freeze() {
  Criterion c{3, "memory freeze", false, "", 0.0};
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<std::size_t> small(1, 3), slots(2, 4);
  std::uniform_real_distribution<double> lr(0.01, 0.5);
  std::size_t violations = 0;
  for (int t = 0; t < kFreezeTrials; ++t) {
    const net::StNetConfig net_cfg = detail::micro_net(small(rng), small(rng) + 1, slots(rng), small(rng));
    meta::MetaConfig cfg;
    cfg.use_memory = true;
    cfg.inner_lr = lr(rng);
    cfg.inner_steps = small(rng);
    cfg.target_lr = lr(rng);
    cfg.target_steps = small(rng) + 1;
    cfg.target_batch_size = 4;
    const auto state = meta::initial_state(net_cfg, cfg, rng());
    const ParamSet before = state.shared;
    const auto split = detail::random_split(5, net_cfg, rng);
    const meta::TaskObjective obj = meta::make_objective(split, net_cfg, cfg);
    const ParamSet adapted = meta::inner_adapt(state.theta, state.shared, obj.support, cfg.inner_lr, cfg.inner_steps);
    const ParamSet target = meta::adapt_to_target(state.theta, state.shared, split.support, net_cfg, cfg, rng());
    const bool frozen = detail::bitwise_equal(before, state.shared) && !adapted.contains(mem::kMemoryName) &&
                        !target.contains(mem::kMemoryName) && !(adapted == state.theta);
    if (!frozen) ++violations;
  }
  c.passed = violations == 0;
  c.detail = std::to_string(kFreezeTrials) + " trials, " + std::to_string(violations) + " with a modified memory";
  return c;
}

// ---------------------------------------------------------------------------
// 4. Attention invariants

inline Criterion attention_invariants() {
  Criterion c{4, "attention invariants", false, "", 0.0};
  std::mt19937_64 rng(404);
  double simplex = 0.0, hull = 0.0, min_p = 1.0;
  for (int t = 0; t < 100; ++t) {
    ad::Graph g;
    const ad::Var q = g.constant(gradcheck::random_tensor({6, 8}, rng, -3.0, 3.0));
    const ad::Var m = g.constant(gradcheck::random_tensor({4, 8}, rng, -2.0, 2.0));
    const mem::Attention a = mem::attend(q, m);
    const Tensor& p = a.scores.value();
    const Tensor& z = a.pattern.value();
    for (std::size_t b = 0; b < 6; ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) {
        s += p[b * 4 + k];
        min_p = std::min(min_p, p[b * 4 + k]);
      }
      simplex = std::max(simplex, std::fabs(s - 1.0));
      for (std::size_t j = 0; j < 8; ++j) {
        double lo = m.value()[j], hi = lo;
        for (std::size_t k = 1; k < 4; ++k) {
          lo = std::min(lo, m.value()[k * 8 + j]);
          hi = std::max(hi, m.value()[k * 8 + j]);
        }
        hull = std::max(hull, std::max(lo - z[b * 8 + j], z[b * 8 + j] - hi));
      }
    }
  }
  ad::Graph g;
  const ad::Var zero = g.constant(Tensor(Shape{5, 8}));
  const ad::Var m = g.constant(gradcheck::random_tensor({4, 8}, rng));
  const mem::Attention a = mem::attend(zero, m);
  const double uniform = mem::clustering_loss(a.scores, mem::one_hot({0, 1, 2, 3, 1}, 4)).value().item();
  const double ln4_error = std::fabs(uniform - std::log(4.0));
  c.passed = simplex <= kSimplexTol && min_p > 0.0 && hull <= 1e-12 && ln4_error <= kUniformLossTol;
  c.detail = "max |sum p - 1| " + detail::fmt(simplex, 3) + ", min p " + detail::fmt(min_p, 3) +
             ", hull excess " + detail::fmt(std::max(hull, 0.0), 3) + ", uniform clustering loss " +
             detail::fmt(uniform, 8) + " vs ln 4";
  return c;
}

// ---------------------------------------------------------------------------
// 5. Clustering recovery

inline Criterion clustering_recovery() {
  Criterion c{5, "clustering recovery", false, "", 0.0};
  double worst_ari = 1.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    data::SynthCitySpec spec;
    spec.rows = 8;
    spec.cols = 8;
    spec.noise = 0.05;
    const data::CityDataset city = data::synth_city(spec, seed);
    std::vector<std::vector<double>> points;
    for (const auto& r : cluster::build_profiles(city.series, 24)) points.push_back(r.profile);
    const auto km = cluster::kmeans(points, data::kArchetypes, cluster::Metric::euclidean, seed);
    worst_ari = std::min(worst_ari, cluster::adjusted_rand_index(km.labels, city.archetype));
  }
  // Integer-valued sequences keep every path sum exact.
  std::mt19937_64 rng(505);
  std::uniform_int_distribution<int> v(-5, 5);
  std::size_t pairs = 0, mismatches = 0;
  for (std::size_t n = 1; n <= kDtwMaxLength; ++n)
    for (std::size_t m = 1; m <= kDtwMaxLength; ++m)
      for (int rep = 0; rep < 3; ++rep) {
        std::vector<double> a(n), b(m);
        for (auto& x : a) x = v(rng);
        for (auto& x : b) x = v(rng);
        ++pairs;
        if (cluster::dtw_distance(a, b) != detail::dtw_brute(a, b, 0, 0)) ++mismatches;
      }
  c.passed = worst_ari == 1.0 && mismatches == 0;
  c.detail = "min ARI over 5 cities at sigma 0.05: " + detail::fmt(worst_ari, 6) + "; DTW vs path enumeration: " +
             std::to_string(mismatches) + " mismatches in " + std::to_string(pairs) + " pairs";
  return c;
}

// ---------------------------------------------------------------------------
// 6-8. Synthetic transfer benchmark

struct BenchmarkOutcome {
  Criterion ordering{6, "directional transfer ordering", false, "", 0.0};
  Criterion patterns{8, "pattern detection", false, "", 0.0};
};

inline BenchmarkOutcome transfer_benchmark(const Options& opt) {
  BenchmarkOutcome out;
  experiment::ExperimentConfig cfg = presets::traffic();
  cfg.methods = {"st-net", "multi-ft", "maml", "metast"};
  cfg.output_dir = (std::filesystem::path(opt.output_dir) / "benchmark").string();
  cfg.threads = opt.threads;
  experiment::RunOptions ro;
  ro.log = opt.log;
  const auto t0 = std::chrono::steady_clock::now();
  const experiment::Report r = experiment::run_experiment(cfg, ro);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const std::string& tgt = cfg.targets.front().synth.name;
  const std::size_t units = cfg.target_units.front();
  auto runs = [&](const std::string& m) { return r.per_seed(m, tgt, units); };
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  const auto metast = runs("metast"), maml = runs("maml"), ft = runs("multi-ft"), scratch = runs("st-net");
  const bool complete = metast.size() == cfg.seeds.size() && maml.size() == metast.size() &&
                        ft.size() == metast.size() && scratch.size() == metast.size() && metast.size() >= 2;
  std::ostringstream d;
  d << cfg.seeds.size() << " seeds, " << cfg.meta.max_meta_iters << " meta-iters, " << detail::fmt(secs, 4) << " s; ";
  if (!complete) {
    d << "incomplete runs (a method failed)";
    out.ordering.detail = d.str();
  } else {
    bool ok = cfg.seeds.size() == 5 && cfg.meta.max_meta_iters <= kMaxMetaIters && secs < kBenchmarkBudgetSeconds;
    auto less = [&](const char* a, const std::vector<double>& x, const char* b, const std::vector<double>& y) {
      const auto t = metrics::paired_t_test(x, y);
      const bool pass = mean(x) < mean(y) && t.p < kSignificance;
      ok = ok && pass;
      d << a << ' ' << detail::fmt(mean(x)) << " < " << b << ' ' << detail::fmt(mean(y)) << " (p=" << detail::fmt(t.p, 3)
        << (pass ? ")" : ", FAILS)") << "; ";
    };
    less("metast", metast, "maml", maml);
    less("maml", maml, "multi-ft", ft);
    less("multi-ft", ft, "st-net", scratch);
    const double gain = (mean(maml) - mean(metast)) / mean(maml);
    ok = ok && gain >= kMinImprovement;
    d << "metast improvement over maml " << detail::fmt(100.0 * gain, 3) << "% (need >= 2%)";
    out.ordering.passed = ok;
    out.ordering.detail = d.str();
  }
  out.ordering.seconds = secs;
  out.patterns.seconds = secs;

  std::vector<double> agree;
  for (const auto& c : r.cells)
    if (c.method == "metast" && c.pattern_agreement) agree.push_back(*c.pattern_agreement);
  if (agree.empty()) {
    out.patterns.detail = "no MetaST runs produced attention exports";
  } else {
    const double m = mean(agree);
    out.patterns.passed = m >= kPatternAgreement;
    std::ostringstream p;
    p << "mean agreement " << detail::fmt(m, 3) << " over " << agree.size() << " runs [";
    for (std::size_t i = 0; i < agree.size(); ++i) p << (i ? ", " : "") << detail::fmt(agree[i], 3);
    p << "] (need >= 0.8)";
    out.patterns.detail = p.str();
  }
  return out;
}

inline Criterion gamma_sensitivity(const Options& opt) {
  Criterion c{7, "gamma sensitivity shape", false, "", 0.0};
  experiment::ExperimentConfig cfg = presets::traffic();
  cfg.output_dir = (std::filesystem::path(opt.output_dir) / "sweep_gamma").string();
  cfg.threads = opt.threads;
  experiment::RunOptions ro;
  ro.log = opt.log;
  ro.save_checkpoints = false;
  const experiment::SweepResult s = experiment::sweep(cfg, experiment::SweepParam::gamma, kGammaSweep, ro);
  const auto best = s.argmin_per_seed();
  std::size_t interior = 0;
  std::ostringstream d;
  d << "argmin gamma per seed [";
  for (std::size_t k = 0; k < best.size(); ++k) {
    if (best[k] > 0 && best[k] + 1 < s.values.size()) ++interior;
    d << (k ? ", " : "") << s.values[best[k]];
  }
  d << "], interior in " << interior << " of " << best.size() << " (need >= 3); mean rmse [";
  for (std::size_t k = 0; k < s.mean_rmse.size(); ++k) d << (k ? ", " : "") << detail::fmt(s.mean_rmse[k]);
  d << ']';
  c.passed = best.size() == 5 && interior >= kSweepInteriorSeeds;
  c.detail = d.str();
  return c;
}

// ---------------------------------------------------------------------------
// 9. Baseline sanity

inline double ha_test_rmse(const data::SynthCitySpec& spec, std::uint64_t seed, std::size_t train_days) {
  const data::CityDataset city = data::synth_city(spec, seed);
  const std::size_t train_end = train_days * 24;
  const baseline::HaModel m = baseline::ha_fit(city.series, train_end);
  std::vector<double> pred, truth;
  for (std::size_t t = train_end; t < city.series.steps(); ++t)
    for (std::size_t r = 0; r < city.series.regions(); ++r)
      for (std::size_t ch = 0; ch < city.series.channels(); ++ch) {
        pred.push_back(baseline::ha_predict(m, t, r, ch).value);
        truth.push_back(city.series.at(t, r, ch));
      }
  return metrics::rmse(pred, truth);
}

inline Criterion baseline_sanity() {
  Criterion c{9, "baseline sanity", false, "", 0.0};
  data::SynthCitySpec spec;
  spec.periods = 37;
  spec.noise = 0.0;
  const double noiseless = ha_test_rmse(spec, 909, 30);
  spec.noise = 0.1;
  double lo = 1e300, hi = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const double e = ha_test_rmse(spec, seed, 30);
    lo = std::min(lo, e);
    hi = std::max(hi, e);
  }
  std::mt19937_64 rng(910);
  std::normal_distribution<double> noise(0.0, 0.01);
  std::vector<double> x{0.5};
  for (int t = 1; t < 2000; ++t) x.push_back(0.5 * x.back() + noise(rng));
  const baseline::ArFit fit = baseline::ar_fit(x, {1, 0, 1e-6});
  const double coeff = fit.coeffs.at(0);
  c.passed = noiseless == 0.0 && lo >= 0.9 * spec.noise && hi <= 1.3 * spec.noise && std::fabs(coeff - 0.5) <= 0.05;
  c.detail = "HA noiseless rmse " + detail::fmt(noiseless, 3) + ", HA at sigma 0.1 in [" + detail::fmt(lo) + ", " +
             detail::fmt(hi) + "] (need [0.09, 0.13]), AR(1) coefficient " + detail::fmt(coeff, 5);
  return c;
}

// ---------------------------------------------------------------------------
// 10. Determinism and persistence

inline experiment::ExperimentConfig determinism_config(const std::string& dir) {
  experiment::ExperimentConfig cfg = presets::traffic();
  cfg.name = "determinism";
  for (auto* list : {&cfg.sources, &cfg.targets})
    for (auto& e : *list) {
      e.synth.rows = 3;
      e.synth.cols = 3;
    }
  cfg.methods = {"ha", "ar", "st-net", "multi-ft", "maml", "metast"};
  cfg.seeds = {3, 4};
  cfg.meta.max_meta_iters = 5;
  cfg.meta.task_batch_size = 8;
  cfg.meta.target_steps = 5;
  cfg.finetune.pretrain_steps = 5;
  cfg.output_dir = dir;
  return cfg;
}

inline Criterion determinism_and_persistence(const Options& opt) {
  Criterion c{10, "determinism and persistence", false, "", 0.0};
  namespace fs = std::filesystem;
  const fs::path base = fs::path(opt.output_dir) / "determinism";
  const auto a = determinism_config((base / "a").string());
  const auto b = determinism_config((base / "b").string());
  const auto ra = experiment::run_experiment(a);
  const auto rb = experiment::run_experiment(b);
  const bool reports = experiment::report_to_json(ra, false) == experiment::report_to_json(rb, false);
  std::size_t files = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(fs::path(a.output_dir) / "checkpoints")) {
    if (entry.path().extension() != ".mstt") continue;
    ++files;
    const fs::path other = fs::path(b.output_dir) / "checkpoints" / entry.path().filename();
    if (!fs::exists(other) || detail::read_file(entry.path()) != detail::read_file(other)) ++differing;
  }

  std::mt19937_64 rng(1010);
  ParamSet p = net::init_params(detail::micro_net(), rng);
  Tensor special(Shape{2, 3}, std::vector<double>{-0.0, 4.9e-324, 1.7976931348623157e308, -1e-310, 1.0 / 3.0, -2.5});
  p.set("special", special);
  p.set(mem::kMemoryName, gradcheck::random_tensor({3, 2}, rng));
  const std::string path = (base / "roundtrip.mstt").string();
  save_checkpoint(path, p);
  const bool roundtrip = detail::bitwise_equal(load_checkpoint(path), p);

  c.passed = reports && files > 0 && differing == 0 && roundtrip;
  c.detail = std::string("reports ") + (reports ? "identical" : "DIFFER") + ", " + std::to_string(files - differing) +
             "/" + std::to_string(files) + " checkpoints bitwise identical, checkpoint round-trip " +
             (roundtrip ? "lossless" : "LOSSY");
  return c;
}

// ---------------------------------------------------------------------------

/// Runs every criterion in order. An exception fails its criterion only.
inline Verdict run_all(const Options& opt) {
  std::filesystem::create_directories(opt.output_dir);
  Verdict v;
  auto run = [&](int id, const char* name, const std::function<std::vector<Criterion>()>& body) {
    if (!opt.selected(id)) return;
    if (opt.log) opt.log(std::string("criterion ") + std::to_string(id) + ": " + name);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Criterion> got;
    try {
      got = body();
    } catch (const std::exception& e) {
      got = {Criterion{id, name, false, std::string("exception: ") + e.what(), 0.0}};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (auto& c : got) {
      if (c.seconds == 0.0) c.seconds = secs;
      v.criteria.push_back(std::move(c));
    }
  };
  run(1, "gradient correctness", [&] { return std::vector<Criterion>{gradient_correctness(opt)}; });
  run(2, "meta-gradient correctness", [] { return std::vector<Criterion>{meta_gradient_correctness()}; });
  run(3, "memory freeze", [] { return std::vector<Criterion>{memory_freeze()}; });
  run(4, "attention invariants", [] { return std::vector<Criterion>{attention_invariants()}; });
  run(5, "clustering recovery", [] { return std::vector<Criterion>{clustering_recovery()}; });
  BenchmarkOutcome bench;
  // Criteria 6 and 8 share one benchmark run.
  if (opt.selected(6) || opt.selected(8)) {
    if (opt.log) opt.log("criteria 6 and 8: synthetic transfer benchmark");
    try {
      bench = transfer_benchmark(opt);
    } catch (const std::exception& e) {
      bench.ordering.detail = bench.patterns.detail = std::string("exception: ") + e.what();
    }
    if (opt.selected(6)) v.criteria.push_back(bench.ordering);
  }
  run(7, "gamma sensitivity shape", [&] { return std::vector<Criterion>{gamma_sensitivity(opt)}; });
  if (opt.selected(8)) v.criteria.push_back(bench.patterns);
  run(9, "baseline sanity", [] { return std::vector<Criterion>{baseline_sanity()}; });
  run(10, "determinism and persistence", [&] { return std::vector<Criterion>{determinism_and_persistence(opt)}; });
  return v;
}

inline nlohmann::json to_json(const Verdict& v) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : v.criteria) {
    j.push_back({{"id", c.id}, {"name", c.name}, {"passed", c.passed}, {"detail", c.detail}, {"seconds", c.seconds}});
  }
  return {{"criteria", j}, {"all_passed", v.all_passed()}};
}

inline void print(std::ostream& os, const Verdict& v) {
  for (const auto& c : v.criteria) os << (c.passed ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << c.detail << '\n';
}

}  // namespace metast::acceptance
