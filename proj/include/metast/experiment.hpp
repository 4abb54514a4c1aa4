#pragma once

// End-to-end transfer experiments: configuration, data preparation, method
// runners, reports with paired significance tests, parameter sweeps and
// attention-pattern export.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "metast/baselines.hpp"
#include "metast/clustering.hpp"
#include "metast/data.hpp"
#include "metast/error.hpp"
#include "metast/meta_learner.hpp"
#include "metast/metrics.hpp"
#include "metast/parallel.hpp"
#include "metast/st_mem.hpp"
#include "metast/st_net.hpp"

namespace metast::experiment {

using nlohmann::json;

inline const std::vector<std::string> kMethods = {"ha", "ar", "st-net", "single-ft", "multi-ft", "maml", "metast"};

// ---------------------------------------------------------------------------
// Configuration

struct CityEntry {
  data::SynthCitySpec synth;
  std::optional<std::string> grid_path;  // ingested grid instead of a synthetic city
};

struct ClusterConfig {
  std::size_t groups = 4;
  cluster::Metric metric = cluster::Metric::euclidean;
  std::size_t period = 0;  // 0: 24 for hourly data, 12 for monthly data
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t data_seed = 0;
  std::vector<CityEntry> sources;
  std::vector<CityEntry> targets;
  std::vector<std::size_t> target_units{1};  // days (hourly) or years (monthly) of target training data
  std::vector<std::string> methods = kMethods;
  std::string reference_method = "maml";
  std::vector<std::uint64_t> seeds;
  std::string single_source;  // Single-FT source city; empty selects the first
  net::StNetConfig net;
  meta::MetaConfig meta;
  baseline::FineTuneConfig finetune;
  baseline::ArOptions ar;
  ClusterConfig clustering;
  std::string output_dir = "out";
  std::size_t threads = 1;

  void validate() const {
    if (sources.empty()) throw ConfigError("experiment needs at least one source city");
    if (targets.empty()) throw ConfigError("experiment needs at least one target city");
    if (target_units.empty()) throw ConfigError("experiment needs at least one target split");
    if (seeds.empty()) throw ConfigError("experiment needs at least one seed");
    for (std::size_t i = 0; i < seeds.size(); ++i)
      for (std::size_t j = i + 1; j < seeds.size(); ++j)
        if (seeds[i] == seeds[j]) throw ConfigError("seeds must be distinct");
    for (const auto& m : methods) {
      if (std::find(kMethods.begin(), kMethods.end(), m) == kMethods.end()) {
        throw ConfigError("unknown method '" + m + "'");
      }
    }
    if (threads == 0) throw ConfigError("threads must be positive");
    if (clustering.groups != net.memory_slots) {
      throw ConfigError("clustering groups must equal the number of memory slots");
    }
    net.validate();
    meta.validate();
  }
};

namespace detail {

template <class T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline data::SynthCitySpec synth_from_json(const json& j, data::Interval default_interval) {
  data::SynthCitySpec s;
  s.interval = default_interval;
  maybe(j, "name", s.name);
  maybe(j, "rows", s.rows);
  maybe(j, "cols", s.cols);
  if (j.contains("interval")) s.interval = data::interval_from_string(j.at("interval").get<std::string>());
  maybe(j, "periods", s.periods);
  maybe(j, "channels", s.channels);
  if (j.contains("archetype_mix")) {
    const auto mix = j.at("archetype_mix").get<std::vector<double>>();
    if (mix.size() != data::kArchetypes) throw ConfigError("archetype_mix needs 4 weights");
    std::copy(mix.begin(), mix.end(), s.archetype_mix.begin());
  }
  maybe(j, "noise", s.noise);
  maybe(j, "scale", s.scale);
  maybe(j, "offset", s.offset);
  maybe(j, "amplitude_jitter", s.amplitude_jitter);
  maybe(j, "phase_shift", s.phase_shift);
  maybe(j, "missing_rate", s.missing_rate);
  maybe(j, "t0", s.t0);
  return s;
}

inline json synth_to_json(const data::SynthCitySpec& s) {
  return {{"name", s.name},
          {"rows", s.rows},
          {"cols", s.cols},
          {"interval", data::to_string(s.interval)},
          {"periods", s.periods},
          {"channels", s.channels},
          {"archetype_mix", std::vector<double>(s.archetype_mix.begin(), s.archetype_mix.end())},
          {"noise", s.noise},
          {"scale", s.scale},
          {"offset", s.offset},
          {"amplitude_jitter", s.amplitude_jitter},
          {"phase_shift", s.phase_shift},
          {"missing_rate", s.missing_rate},
          {"t0", s.t0}};
}

inline CityEntry city_from_json(const json& j, data::Interval iv) {
  CityEntry c;
  c.synth = synth_from_json(j, iv);
  if (j.contains("grid")) c.grid_path = j.at("grid").get<std::string>();
  return c;
}

inline meta::OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return meta::OptimizerKind::sgd;
  if (s == "adam") return meta::OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

inline std::string to_string(meta::OptimizerKind k) { return k == meta::OptimizerKind::sgd ? "sgd" : "adam"; }

}  // namespace detail

inline net::StNetConfig net_from_json(const json& j, net::StNetConfig c = {}) {
  using detail::maybe;
  maybe(j, "patch_size", c.patch_size);
  maybe(j, "channels", c.channels);
  maybe(j, "cnn_layers", c.cnn_layers);
  maybe(j, "cnn_filters", c.cnn_filters);
  maybe(j, "kernel_size", c.kernel_size);
  maybe(j, "spatial_dim", c.spatial_dim);
  maybe(j, "lstm_hidden", c.lstm_hidden);
  maybe(j, "window", c.window);
  maybe(j, "external_dim", c.external_dim);
  maybe(j, "memory_slots", c.memory_slots);
  maybe(j, "memory_dim", c.memory_dim);
  return c;
}

inline json net_to_json(const net::StNetConfig& c) {
  return {{"patch_size", c.patch_size},   {"channels", c.channels},       {"cnn_layers", c.cnn_layers},
          {"cnn_filters", c.cnn_filters}, {"kernel_size", c.kernel_size}, {"spatial_dim", c.spatial_dim},
          {"lstm_hidden", c.lstm_hidden}, {"window", c.window},           {"external_dim", c.external_dim},
          {"memory_slots", c.memory_slots}, {"memory_dim", c.memory_dim}};
}

inline meta::MetaConfig meta_from_json(const json& j, meta::MetaConfig c = {}) {
  using detail::maybe;
  maybe(j, "inner_lr", c.inner_lr);
  maybe(j, "outer_lr", c.outer_lr);
  maybe(j, "inner_steps", c.inner_steps);
  maybe(j, "meta_batch_cities", c.meta_batch_cities);
  maybe(j, "task_batch_size", c.task_batch_size);
  maybe(j, "max_meta_iters", c.max_meta_iters);
  maybe(j, "gamma", c.gamma);
  maybe(j, "second_order", c.second_order);
  if (j.contains("optimizer")) c.optimizer = detail::optimizer_from_string(j.at("optimizer").get<std::string>());
  maybe(j, "use_memory", c.use_memory);
  maybe(j, "target_steps", c.target_steps);
  maybe(j, "target_lr", c.target_lr);
  maybe(j, "target_batch_size", c.target_batch_size);
  return c;
}

inline json meta_to_json(const meta::MetaConfig& c) {
  return {{"inner_lr", c.inner_lr},
          {"outer_lr", c.outer_lr},
          {"inner_steps", c.inner_steps},
          {"meta_batch_cities", c.meta_batch_cities},
          {"task_batch_size", c.task_batch_size},
          {"max_meta_iters", c.max_meta_iters},
          {"gamma", c.gamma},
          {"second_order", c.second_order},
          {"optimizer", detail::to_string(c.optimizer)},
          {"use_memory", c.use_memory},
          {"target_steps", c.target_steps},
          {"target_lr", c.target_lr},
          {"target_batch_size", c.target_batch_size}};
}

inline ExperimentConfig config_from_json(const json& j) {
  try {
    using detail::maybe;
    ExperimentConfig c;
    maybe(j, "name", c.name);
    maybe(j, "data_seed", c.data_seed);
    data::Interval iv = data::Interval::hour;
    if (j.contains("interval")) iv = data::interval_from_string(j.at("interval").get<std::string>());
    for (const auto& s : j.at("sources")) c.sources.push_back(detail::city_from_json(s, iv));
    for (const auto& s : j.at("targets")) c.targets.push_back(detail::city_from_json(s, iv));
    maybe(j, "target_units", c.target_units);
    maybe(j, "methods", c.methods);
    maybe(j, "reference_method", c.reference_method);
    if (j.contains("seeds")) {
      c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    } else {
      std::size_t runs = 20;
      maybe(j, "runs", runs);
      for (std::size_t s = 1; s <= runs; ++s) c.seeds.push_back(s);
    }
    maybe(j, "single_source", c.single_source);
    if (j.contains("net")) c.net = net_from_json(j.at("net"));
    if (j.contains("meta")) c.meta = meta_from_json(j.at("meta"));
    if (j.contains("finetune")) {
      const auto& f = j.at("finetune");
      maybe(f, "pretrain_steps", c.finetune.pretrain_steps);
      maybe(f, "pretrain_lr", c.finetune.pretrain_lr);
      maybe(f, "batch_size", c.finetune.batch_size);
      if (f.contains("optimizer")) c.finetune.optimizer = detail::optimizer_from_string(f.at("optimizer").get<std::string>());
    }
    if (j.contains("ar")) {
      maybe(j.at("ar"), "p", c.ar.p);
      maybe(j.at("ar"), "q", c.ar.q);
    }
    if (j.contains("clustering")) {
      const auto& k = j.at("clustering");
      maybe(k, "groups", c.clustering.groups);
      if (k.contains("metric")) c.clustering.metric = cluster::metric_from_string(k.at("metric").get<std::string>());
      maybe(k, "period", c.clustering.period);
      maybe(k, "seed", c.clustering.seed);
    }
    maybe(j, "output_dir", c.output_dir);
    maybe(j, "threads", c.threads);
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid experiment config: ") + e.what());
  }
}

inline json config_to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  j["data_seed"] = c.data_seed;
  auto cities = [](const std::vector<CityEntry>& v) {
    json a = json::array();
    for (const auto& e : v) {
      json x = detail::synth_to_json(e.synth);
      if (e.grid_path) x["grid"] = *e.grid_path;
      a.push_back(x);
    }
    return a;
  };
  j["sources"] = cities(c.sources);
  j["targets"] = cities(c.targets);
  j["target_units"] = c.target_units;
  j["methods"] = c.methods;
  j["reference_method"] = c.reference_method;
  j["seeds"] = c.seeds;
  j["single_source"] = c.single_source;
  j["net"] = net_to_json(c.net);
  j["meta"] = meta_to_json(c.meta);
  j["finetune"] = {{"pretrain_steps", c.finetune.pretrain_steps},
                   {"pretrain_lr", c.finetune.pretrain_lr},
                   {"batch_size", c.finetune.batch_size},
                   {"optimizer", detail::to_string(c.finetune.optimizer)}};
  j["ar"] = {{"p", c.ar.p}, {"q", c.ar.q}};
  j["clustering"] = {{"groups", c.clustering.groups},
                     {"metric", c.clustering.metric == cluster::Metric::euclidean ? "euclidean" : "dtw"},
                     {"period", c.clustering.period},
                     {"seed", c.clustering.seed}};
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  return j;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedCity {
  std::string name;
  data::GridSeries raw;
  data::GridSeries norm;
  data::Split split;
  std::vector<net::TrainingSample> train;
  std::vector<net::TrainingSample> test;
  std::vector<int> archetype;  // generator ground truth, empty for ingested grids
};

struct PreparedData {
  std::vector<PreparedCity> sources;
  std::vector<meta::SourceCity> meta_sources;
  cluster::KMeansResult clusters;
  std::vector<int> cluster_to_archetype;  // majority archetype per cluster (-1 if unknown)
  // targets[target][unit index]
  std::vector<std::vector<PreparedCity>> targets;
};

namespace detail {

inline std::pair<data::GridSeries, std::vector<int>> load_city(const CityEntry& e, std::uint64_t seed) {
  if (e.grid_path) {
    data::GridSeries g = data::load_grid(*e.grid_path);
    if (g.city_id.empty()) g.city_id = e.synth.name;
    return {std::move(g), {}};
  }
  data::CityDataset c = data::synth_city(e.synth, seed);
  return {std::move(c.series), std::move(c.archetype)};
}

inline PreparedCity prepare_city(std::string name, data::GridSeries raw, std::vector<int> archetype,
                                 data::SplitMode mode, const net::StNetConfig& net) {
  PreparedCity p;
  p.name = std::move(name);
  p.split = data::split(raw.steps(), mode);
  if (p.split.train_end <= net.window) {
    throw DataError("city '" + p.name + "': training span of " + std::to_string(p.split.train_end) +
                    " intervals does not exceed the window of " + std::to_string(net.window));
  }
  if (raw.channels() != net.channels) {
    throw ConfigError("city '" + p.name + "' has " + std::to_string(raw.channels()) + " channels, model expects " +
                      std::to_string(net.channels));
  }
  p.norm = data::normalize(raw, p.split.train_end);
  p.raw = std::move(raw);
  p.train = data::make_samples(p.norm, net.window, net.patch_size, 0, p.split.train_end);
  p.test = data::make_samples(p.norm, net.window, net.patch_size, p.split.train_end);
  p.archetype = std::move(archetype);
  return p;
}

// Per-city seeds derived from the data seed so that adding a target never
// changes the source cities.
inline std::uint64_t city_seed(std::uint64_t data_seed, std::size_t role, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(data_seed), static_cast<std::uint32_t>(data_seed >> 32),
                    static_cast<std::uint32_t>(role), static_cast<std::uint32_t>(index)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t(out[0]) << 32) | out[1];
}

}  // namespace detail

inline std::size_t profile_period(const ExperimentConfig& cfg, data::Interval iv) {
  return cfg.clustering.period ? cfg.clustering.period : data::default_period(iv);
}

/// Builds normalized samples for every city and clusters the pooled source
/// profiles (training spans only) into the memory's pattern categories.
inline PreparedData prepare(const ExperimentConfig& cfg) {
  PreparedData out;
  std::vector<std::vector<double>> profiles;
  std::vector<int> truth;
  for (std::size_t i = 0; i < cfg.sources.size(); ++i) {
    auto [raw, arch] = detail::load_city(cfg.sources[i], detail::city_seed(cfg.data_seed, 0, i));
    PreparedCity c = detail::prepare_city(cfg.sources[i].synth.name, std::move(raw), std::move(arch),
                                          data::SplitMode::source(), cfg.net);
    for (const auto& p : cluster::build_profiles(c.norm, profile_period(cfg, c.norm.interval), c.split.train_end)) {
      profiles.push_back(p.profile);
      truth.push_back(c.archetype.empty() ? -1 : c.archetype[p.region]);
    }
    out.sources.push_back(std::move(c));
  }
  out.clusters = cluster::kmeans(profiles, cfg.clustering.groups, cfg.clustering.metric, cfg.clustering.seed);

  std::vector<std::map<int, std::size_t>> votes(cfg.clustering.groups);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= 0) ++votes[static_cast<std::size_t>(out.clusters.labels[i])][truth[i]];
  }
  for (const auto& v : votes) {
    int best = -1;
    std::size_t n = 0;
    for (const auto& [a, c] : v) {
      if (c > n) {
        n = c;
        best = a;
      }
    }
    out.cluster_to_archetype.push_back(best);
  }

  std::size_t offset = 0;
  for (const auto& c : out.sources) {
    meta::SourceCity sc;
    sc.name = c.name;
    sc.samples = c.train;
    const std::size_t R = c.norm.regions();
    sc.region_cluster.assign(out.clusters.labels.begin() + static_cast<std::ptrdiff_t>(offset),
                             out.clusters.labels.begin() + static_cast<std::ptrdiff_t>(offset + R));
    offset += R;
    out.meta_sources.push_back(std::move(sc));
  }

  for (std::size_t i = 0; i < cfg.targets.size(); ++i) {
    auto [raw, arch] = detail::load_city(cfg.targets[i], detail::city_seed(cfg.data_seed, 1, i));
    std::vector<PreparedCity> per_split;
    for (std::size_t units : cfg.target_units) {
      per_split.push_back(detail::prepare_city(cfg.targets[i].synth.name, raw, arch,
                                               data::SplitMode::target_units(units, raw.interval), cfg.net));
    }
    out.targets.push_back(std::move(per_split));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

/// RMSE in raw units of normalized predictions [n, v] against the raw series.
inline double rmse_raw(const PreparedCity& city, std::span<const net::TrainingSample> samples,
                       const Tensor& predictions) {
  const std::size_t v = city.raw.channels();
  std::vector<double> pred, truth;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t ch = 0; ch < v; ++ch) {
      pred.push_back(city.norm.norm->denormalize(ch, predictions[i * v + ch]));
      truth.push_back(city.raw.at(samples[i].time, samples[i].region, ch));
    }
  return metrics::rmse(pred, truth);
}

/// Attention scores [n, G] of each sample under (theta, memory).
inline Tensor attention_scores(const ParamSet& theta, const Tensor& memory, std::span<const net::TrainingSample> samples,
                               const net::StNetConfig& cfg, std::size_t chunk = 512) {
  const std::size_t G = memory.dim(0);
  Tensor out(Shape{samples.size(), G});
  for (std::size_t begin = 0; begin < samples.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, samples.size() - begin);
    const net::Batch b = net::make_batch(samples.subspan(begin, n), cfg);
    ad::Graph g;
    const VarMap p = bind(g, theta, false);
    const auto fwd = net::forward_with_memory(p, g.constant(memory), b, cfg);
    const Tensor& s = fwd.scores.value();
    std::copy(s.data().begin(), s.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(begin * G));
  }
  return out;
}

struct PatternExport {
  Tensor mean_scores;                 // [regions, G]
  std::vector<std::size_t> counts;    // samples per region
  std::vector<int> argmax;            // -1 for regions without samples
};

inline PatternExport export_patterns(const ParamSet& theta, const Tensor& memory,
                                     std::span<const net::TrainingSample> samples, std::size_t regions,
                                     const net::StNetConfig& cfg) {
  const Tensor s = attention_scores(theta, memory, samples, cfg);
  const std::size_t G = memory.dim(0);
  PatternExport e;
  e.mean_scores = Tensor(Shape{regions, G});
  e.counts.assign(regions, 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::size_t r = samples[i].region;
    if (r >= regions) throw DataError("sample region outside the grid");
    ++e.counts[r];
    for (std::size_t g = 0; g < G; ++g) e.mean_scores[r * G + g] += s[i * G + g];
  }
  for (std::size_t r = 0; r < regions; ++r) {
    int best = -1;
    for (std::size_t g = 0; g < G && e.counts[r]; ++g) {
      e.mean_scores[r * G + g] /= static_cast<double>(e.counts[r]);
      if (best < 0 || e.mean_scores[r * G + g] > e.mean_scores[r * G + static_cast<std::size_t>(best)]) {
        best = static_cast<int>(g);
      }
    }
    e.argmax.push_back(best);
  }
  return e;
}

inline void write_patterns_csv(std::ostream& os, const PatternExport& e, const std::vector<cluster::RegionPattern>& profiles) {
  const std::size_t G = e.mean_scores.dim(1);
  const std::size_t P = profiles.empty() ? 0 : profiles[0].profile.size();
  os << "region_id,samples,argmax";
  for (std::size_t g = 0; g < G; ++g) os << ",p_" << g;
  for (std::size_t k = 0; k < P; ++k) os << ",profile_" << k;
  os << '\n';
  os.precision(10);
  for (std::size_t r = 0; r < e.counts.size(); ++r) {
    os << r << ',' << e.counts[r] << ',' << e.argmax[r];
    for (std::size_t g = 0; g < G; ++g) os << ',' << e.mean_scores[r * G + g];
    for (std::size_t k = 0; k < P; ++k) os << ',' << (r < profiles.size() ? profiles[r].profile[k] : 0.0);
    os << '\n';
  }
}

/// Fraction of regions whose attention argmax, mapped through the cluster
/// majority archetype, equals the generator's archetype.
inline double pattern_agreement(const PatternExport& e, std::span<const int> cluster_to_archetype,
                                std::span<const int> archetype) {
  std::size_t hit = 0, n = 0;
  for (std::size_t r = 0; r < archetype.size() && r < e.argmax.size(); ++r) {
    if (e.argmax[r] < 0) continue;
    ++n;
    hit += cluster_to_archetype[static_cast<std::size_t>(e.argmax[r])] == archetype[r];
  }
  return n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// Reports

struct Cell {
  std::string method;
  std::string target;
  std::size_t units = 0;
  std::uint64_t seed = 0;
  double rmse = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> pattern_agreement;
  std::string error;
  double wall_ms = 0.0;
};

struct Summary {
  std::string method;
  std::string target;
  std::size_t units = 0;
  double mean_rmse = std::numeric_limits<double>::quiet_NaN();
  double std_rmse = 0.0;
  std::size_t runs = 0;
  std::optional<metrics::TTestResult> vs_reference;
  std::string stars;
};

struct Report {
  std::string name;
  std::string reference_method;
  std::vector<Cell> cells;
  std::vector<Summary> summary;

  const Summary* find(const std::string& method, const std::string& target, std::size_t units) const {
    for (const auto& s : summary) {
      if (s.method == method && s.target == target && s.units == units) return &s;
    }
    return nullptr;
  }

  /// Per-seed RMSE of one (method, target, units) cell row, ordered as seeds.
  std::vector<double> per_seed(const std::string& method, const std::string& target, std::size_t units) const {
    std::vector<double> v;
    for (const auto& c : cells) {
      if (c.method == method && c.target == target && c.units == units) v.push_back(c.rmse);
    }
    return v;
  }
};

namespace detail {

inline json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

}  // namespace detail

inline json report_to_json(const Report& r, bool include_timing = true) {
  json j;
  j["name"] = r.name;
  j["reference_method"] = r.reference_method;
  j["cells"] = json::array();
  for (const auto& c : r.cells) {
    json x = {{"method", c.method}, {"target", c.target}, {"units", c.units}, {"seed", c.seed},
              {"rmse", detail::number_or_null(c.rmse)}};
    if (c.pattern_agreement) x["pattern_agreement"] = *c.pattern_agreement;
    if (!c.error.empty()) x["error"] = c.error;
    if (include_timing) x["wall_ms"] = c.wall_ms;
    j["cells"].push_back(x);
  }
  j["summary"] = json::array();
  for (const auto& s : r.summary) {
    json x = {{"method", s.method},
              {"target", s.target},
              {"units", s.units},
              {"mean_rmse", detail::number_or_null(s.mean_rmse)},
              {"std_rmse", detail::number_or_null(s.std_rmse)},
              {"runs", s.runs},
              {"stars", s.stars}};
    if (s.vs_reference) {
      x["vs_reference"] = {{"t", detail::number_or_null(s.vs_reference->t)},
                           {"p", s.vs_reference->p},
                           {"mean_diff", s.vs_reference->mean_diff},
                           {"degenerate", s.vs_reference->degenerate}};
    }
    j["summary"].push_back(x);
  }
  return j;
}

inline void write_report_csv(std::ostream& os, const Report& r) {
  os << "method,target,units,seed,rmse,pattern_agreement,error,wall_ms\n";
  os.precision(17);
  for (const auto& c : r.cells) {
    os << c.method << ',' << c.target << ',' << c.units << ',' << c.seed << ',';
    if (std::isfinite(c.rmse)) os << c.rmse;
    os << ',';
    if (c.pattern_agreement) os << *c.pattern_agreement;
    std::string err = c.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << ',' << err << ',' << c.wall_ms << '\n';
  }
}

/// Means over seeds and paired t-tests against the reference method. Stars
/// are only attached where a t/p pair is stored.
inline void summarize(Report& r, const std::vector<std::string>& methods, const std::vector<std::string>& targets,
                      const std::vector<std::size_t>& units) {
  r.summary.clear();
  for (const auto& t : targets)
    for (std::size_t u : units)
      for (const auto& m : methods) {
        Summary s;
        s.method = m;
        s.target = t;
        s.units = u;
        const std::vector<double> v = r.per_seed(m, t, u);
        std::vector<double> ok;
        for (double x : v)
          if (std::isfinite(x)) ok.push_back(x);
        s.runs = ok.size();
        if (!ok.empty()) {
          double mean = 0;
          for (double x : ok) mean += x;
          mean /= static_cast<double>(ok.size());
          double ss = 0;
          for (double x : ok) ss += (x - mean) * (x - mean);
          s.mean_rmse = mean;
          s.std_rmse = ok.size() > 1 ? std::sqrt(ss / static_cast<double>(ok.size() - 1)) : 0.0;
        }
        const std::vector<double> ref = r.per_seed(r.reference_method, t, u);
        bool complete = v.size() >= 2 && ref.size() == v.size() && m != r.reference_method;
        for (std::size_t i = 0; complete && i < v.size(); ++i) complete = std::isfinite(v[i]) && std::isfinite(ref[i]);
        if (complete) {
          s.vs_reference = metrics::paired_t_test(v, ref);
          s.stars = metrics::significance_stars(s.vs_reference->p);
        }
        r.summary.push_back(std::move(s));
      }
}

// ---------------------------------------------------------------------------
// Running

struct RunOptions {
  bool write_outputs = true;
  bool save_checkpoints = true;
  std::function<void(const std::string&)> log;
};

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline std::string unit_tag(std::size_t units) { return std::to_string(units); }

// Source-stage artefact of one (method, seed): an initialization and, for
// the memory model, the frozen memory.
struct Pretrained {
  ParamSet theta;
  ParamSet shared;
  std::vector<meta::LogRow> log;
};

inline Pretrained source_stage(const std::string& method, const ExperimentConfig& cfg, const PreparedData& data,
                               std::uint64_t seed) {
  Pretrained p;
  if (method == "maml" || method == "metast") {
    meta::MetaConfig mc = cfg.meta;
    mc.threads = 1;
    if (method == "maml") {
      mc.use_memory = false;
      mc.gamma = 0.0;
    } else {
      mc.use_memory = true;
    }
    auto res = meta::meta_train(data.meta_sources, cfg.net, mc, seed);
    p.theta = std::move(res.theta);
    p.shared = std::move(res.shared);
    p.log = std::move(res.log);
  } else if (method == "single-ft" || method == "multi-ft") {
    std::vector<net::TrainingSample> pool;
    for (const auto& c : data.sources) {
      const bool chosen = cfg.single_source.empty() ? &c == &data.sources.front() : c.name == cfg.single_source;
      if (method == "multi-ft" || chosen) pool.insert(pool.end(), c.train.begin(), c.train.end());
    }
    if (pool.empty()) throw ConfigError("single_source '" + cfg.single_source + "' is not a source city");
    meta::MetaConfig plain = cfg.meta;
    plain.use_memory = false;
    p.theta = baseline::pretrain(meta::initial_state(cfg.net, plain, seed).theta, pool, cfg.net, cfg.finetune,
                                 seed ^ baseline::kPretrainSeedMix);
  } else if (method == "st-net") {
    meta::MetaConfig plain = cfg.meta;
    plain.use_memory = false;
    p.theta = meta::initial_state(cfg.net, plain, seed).theta;
  }
  return p;
}

}  // namespace detail

/// Runs every (method, target, split, seed) cell. A failing cell records
/// its error and the run continues.
inline Report run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  cfg.validate();
  const PreparedData data = prepare(cfg);
  namespace fs = std::filesystem;
  const fs::path out_dir(cfg.output_dir);
  if (opt.write_outputs) fs::create_directories(out_dir);
  if (opt.save_checkpoints && opt.write_outputs) fs::create_directories(out_dir / "checkpoints");

  Report report;
  report.name = cfg.name;
  report.reference_method = cfg.reference_method;
  std::vector<std::string> targets;
  for (const auto& t : data.targets) targets.push_back(t.front().name);

  // cells[seed][method][target][unit]
  const std::size_t S = cfg.seeds.size(), M = cfg.methods.size(), T = data.targets.size(), U = cfg.target_units.size();
  std::vector<Cell> cells(S * M * T * U);
  auto cell_at = [&](std::size_t s, std::size_t m, std::size_t t, std::size_t u) -> Cell& {
    return cells[((s * M + m) * T + t) * U + u];
  };

  // The classical baselines do not depend on the seed.
  std::map<std::pair<std::size_t, std::size_t>, double> ha_rmse, ar_rmse;
  std::map<std::pair<std::size_t, std::size_t>, std::string> ha_err, ar_err;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t u = 0; u < U; ++u) {
      const PreparedCity& c = data.targets[t][u];
      if (std::find(cfg.methods.begin(), cfg.methods.end(), "ha") != cfg.methods.end()) {
        try {
          const baseline::HaModel ha = baseline::ha_fit(c.raw, c.split.train_end, profile_period(cfg, c.raw.interval));
          std::vector<double> pred, truth;
          for (const auto& s : c.test)
            for (std::size_t ch = 0; ch < c.raw.channels(); ++ch) {
              pred.push_back(baseline::ha_predict(ha, s.time, s.region, ch).value);
              truth.push_back(c.raw.at(s.time, s.region, ch));
            }
          ha_rmse[{t, u}] = metrics::rmse(pred, truth);
        } catch (const std::exception& e) {
          ha_err[{t, u}] = e.what();
        }
      }
      if (std::find(cfg.methods.begin(), cfg.methods.end(), "ar") != cfg.methods.end()) {
        try {
          const baseline::ArForecast f = baseline::ar_forecast(c.raw, c.split.train_end, cfg.ar);
          const std::size_t R = c.raw.regions(), V = c.raw.channels();
          std::vector<double> pred, truth;
          for (const auto& s : c.test)
            for (std::size_t ch = 0; ch < V; ++ch) {
              pred.push_back(f.predictions[((s.time - c.split.train_end) * R + s.region) * V + ch]);
              truth.push_back(c.raw.at(s.time, s.region, ch));
            }
          ar_rmse[{t, u}] = metrics::rmse(pred, truth);
        } catch (const std::exception& e) {
          ar_err[{t, u}] = e.what();
        }
      }
    }

  parallel_for(S, cfg.threads, [&](std::size_t s) {
    const std::uint64_t seed = cfg.seeds[s];
    for (std::size_t m = 0; m < M; ++m) {
      const std::string& method = cfg.methods[m];
      std::optional<detail::Pretrained> pre;
      std::string pre_error;
      double pre_ms = 0.0;
      if (method != "ha" && method != "ar") {
        const auto t0 = std::chrono::steady_clock::now();
        try {
          pre = detail::source_stage(method, cfg, data, seed);
        } catch (const std::exception& e) {
          pre_error = e.what();
        }
        pre_ms = detail::elapsed_ms(t0);
        if (pre && opt.write_outputs && opt.save_checkpoints && (method == "maml" || method == "metast")) {
          const std::string stem = method + "_seed" + std::to_string(seed);
          save_checkpoint((out_dir / "checkpoints" / (stem + ".mstt")).string(), ParamSet::merge(pre->theta, pre->shared));
          std::ofstream log(out_dir / "checkpoints" / (stem + "_log.csv"));
          meta::write_log_csv(log, pre->log);
        }
      }
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t u = 0; u < U; ++u) {
          Cell& cell = cell_at(s, m, t, u);
          const PreparedCity& c = data.targets[t][u];
          cell.method = method;
          cell.target = c.name;
          cell.units = cfg.target_units[u];
          cell.seed = seed;
          const auto t0 = std::chrono::steady_clock::now();
          try {
            if (method == "ha") {
              if (ha_err.count({t, u})) throw DataError(ha_err.at({t, u}));
              cell.rmse = ha_rmse.at({t, u});
            } else if (method == "ar") {
              if (ar_err.count({t, u})) throw DataError(ar_err.at({t, u}));
              cell.rmse = ar_rmse.at({t, u});
            } else {
              if (!pre) throw std::runtime_error(pre_error);
              meta::MetaConfig mc = cfg.meta;
              mc.use_memory = method == "metast";
              const ParamSet theta = meta::adapt_to_target(pre->theta, pre->shared, c.train, cfg.net, mc, seed);
              const Tensor* memory = mc.use_memory ? &pre->shared.at(mem::kMemoryName) : nullptr;
              cell.rmse = rmse_raw(c, c.test, net::predict(theta, c.test, cfg.net, memory));
              if (memory && !c.archetype.empty()) {
                const PatternExport e = export_patterns(theta, *memory, c.test, c.raw.regions(), cfg.net);
                cell.pattern_agreement = pattern_agreement(e, data.cluster_to_archetype, c.archetype);
              }
            }
          } catch (const std::exception& e) {
            cell.error = e.what();
            cell.rmse = std::numeric_limits<double>::quiet_NaN();
          }
          cell.wall_ms = pre_ms + detail::elapsed_ms(t0);
          if (opt.log) {
            std::ostringstream msg;
            msg << method << " target=" << c.name << " units=" << cell.units << " seed=" << seed
                << " rmse=" << cell.rmse << (cell.error.empty() ? "" : " error=" + cell.error);
            opt.log(msg.str());
          }
        }
    }
  });

  report.cells = std::move(cells);
  summarize(report, cfg.methods, targets, cfg.target_units);
  if (opt.write_outputs) {
    std::ofstream(out_dir / "report.json") << report_to_json(report).dump(2) << '\n';
    std::ofstream csv(out_dir / "report.csv");
    write_report_csv(csv, report);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepParam { memory_d, gamma };

inline SweepParam sweep_param_from_string(const std::string& s) {
  if (s == "memory_d") return SweepParam::memory_d;
  if (s == "gamma") return SweepParam::gamma;
  throw ConfigError("unknown sweep parameter '" + s + "' (expected memory_d or gamma)");
}

struct SweepResult {
  std::string param;
  std::vector<double> values;
  std::vector<double> mean_rmse;            // per value
  std::vector<std::vector<double>> per_seed;  // [value][seed], averaged over targets and splits
  std::vector<std::uint64_t> seeds;

  /// Index of the best value for each seed.
  std::vector<std::size_t> argmin_per_seed() const {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      std::size_t best = 0;
      for (std::size_t v = 1; v < values.size(); ++v) {
        if (per_seed[v][s] < per_seed[best][s]) best = v;
      }
      out.push_back(best);
    }
    return out;
  }
};

/// One MetaST experiment per value; rows are ordered by value.
inline SweepResult sweep(ExperimentConfig cfg, SweepParam param, std::vector<double> values, const RunOptions& opt = {}) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  std::sort(values.begin(), values.end());
  SweepResult res;
  res.param = param == SweepParam::gamma ? "gamma" : "memory_d";
  res.values = values;
  res.seeds = cfg.seeds;
  cfg.methods = {"metast"};
  cfg.reference_method = "metast";
  const std::string base_dir = cfg.output_dir;
  for (double v : values) {
    ExperimentConfig c = cfg;
    if (param == SweepParam::gamma) {
      c.meta.gamma = v;
    } else {
      if (v < 1 || v != std::floor(v)) throw ConfigError("memory_d values must be positive integers");
      c.net.memory_dim = static_cast<std::size_t>(v);
    }
    std::ostringstream tag;
    tag << res.param << '_' << v;
    c.output_dir = (std::filesystem::path(base_dir) / tag.str()).string();
    const Report r = run_experiment(c, opt);
    std::vector<double> seed_mean(cfg.seeds.size(), 0.0);
    std::vector<std::size_t> seed_n(cfg.seeds.size(), 0);
    double total = 0;
    std::size_t n = 0;
    for (const auto& cell : r.cells) {
      if (!std::isfinite(cell.rmse)) continue;
      const auto k = static_cast<std::size_t>(std::find(cfg.seeds.begin(), cfg.seeds.end(), cell.seed) - cfg.seeds.begin());
      seed_mean[k] += cell.rmse;
      ++seed_n[k];
      total += cell.rmse;
      ++n;
    }
    for (std::size_t k = 0; k < seed_mean.size(); ++k) {
      seed_mean[k] = seed_n[k] ? seed_mean[k] / static_cast<double>(seed_n[k]) : std::numeric_limits<double>::quiet_NaN();
    }
    res.per_seed.push_back(seed_mean);
    res.mean_rmse.push_back(n ? total / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN());
  }
  if (opt.write_outputs) {
    std::filesystem::create_directories(base_dir);
    std::ofstream curve(std::filesystem::path(base_dir) / ("sweep_" + res.param + ".csv"));
    curve.precision(17);
    curve << res.param << ",mean_rmse\n";
    for (std::size_t i = 0; i < values.size(); ++i) curve << values[i] << ',' << res.mean_rmse[i] << '\n';
    std::ofstream per(std::filesystem::path(base_dir) / ("sweep_" + res.param + "_per_seed.csv"));
    per.precision(17);
    per << res.param << ",seed,rmse\n";
    for (std::size_t i = 0; i < values.size(); ++i)
      for (std::size_t s = 0; s < res.seeds.size(); ++s) per << values[i] << ',' << res.seeds[s] << ',' << res.per_seed[i][s] << '\n';
  }
  return res;
}

}  // namespace metast::experiment
