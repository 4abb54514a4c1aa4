// Command-line front end for ingestion, synthetic data, clustering,
// meta-training, adaptation, baselines, evaluation, sweeps and the
// acceptance suite.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "metast/acceptance.hpp"
#include "metast/baselines.hpp"
#include "metast/clustering.hpp"
#include "metast/data.hpp"
#include "metast/error.hpp"
#include "metast/experiment.hpp"
#include "metast/meta_learner.hpp"

namespace fs = std::filesystem;
using namespace metast;
using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::size_t threads = 1;
  bool quiet = false;
};

experiment::ExperimentConfig load(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config is required for this command");
  experiment::ExperimentConfig cfg = experiment::load_config(g.config);
  if (g.seed) cfg.seeds = {*g.seed};
  if (!g.out_dir.empty()) cfg.output_dir = g.out_dir;
  cfg.threads = g.threads;
  return cfg;
}

std::string out_dir(const Globals& g, const std::string& fallback = "out") {
  const std::string d = g.out_dir.empty() ? fallback : g.out_dir;
  fs::create_directories(d);
  return d;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("cannot parse '" + item + "' as a number");
    }
  }
  return out;
}

data::BoundingBox parse_bbox(const std::string& s) {
  const auto v = parse_list(s);
  if (v.size() != 4) throw ConfigError("--bbox expects min_lat,min_lon,max_lat,max_lon");
  data::BoundingBox b{v[0], v[1], v[2], v[3]};
  if (!b.valid()) throw ConfigError("--bbox is empty or inverted");
  return b;
}

const experiment::PreparedCity& find_target(const experiment::PreparedData& d, const experiment::ExperimentConfig& cfg,
                                            const std::string& name, std::size_t units) {
  const auto u = std::find(cfg.target_units.begin(), cfg.target_units.end(), units);
  if (u == cfg.target_units.end()) throw ConfigError("split of " + std::to_string(units) + " units is not configured");
  for (const auto& t : d.targets) {
    if (name.empty() || t.front().name == name) return t[static_cast<std::size_t>(u - cfg.target_units.begin())];
  }
  throw ConfigError("unknown target city '" + name + "'");
}

void log_line(const Globals& g, const std::string& s) {
  if (!g.quiet) std::cerr << s << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metast: cross-city spatial-temporal transfer with meta-learning"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment configuration (JSON)");
  app.add_option("--seed", g.seed, "Override the seed list with a single seed");
  app.add_option("--out-dir", g.out_dir, "Output directory");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", g.quiet, "Suppress progress output");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Rasterize a trip or water-sample CSV into a grid");
  std::string in_csv, in_kind = "trips", in_bbox, in_interval = "hour", in_out, in_city;
  std::size_t in_rows = 0, in_cols = 0;
  double in_cell = 0.5;
  std::vector<std::string> in_map;
  ingest->add_option("--csv", in_csv, "Input CSV")->required();
  ingest->add_option("--kind", in_kind, "trips or water")->check(CLI::IsMember({"trips", "water"}));
  ingest->add_option("--bbox", in_bbox, "min_lat,min_lon,max_lat,max_lon")->required();
  ingest->add_option("--rows", in_rows, "Grid rows (trips)");
  ingest->add_option("--cols", in_cols, "Grid columns (trips)");
  ingest->add_option("--interval", in_interval, "hour or month (trips)");
  ingest->add_option("--cell-deg", in_cell, "Cell size in degrees (water)");
  ingest->add_option("--map", in_map, "Column mapping field=column, e.g. pickup_time=tpep_pickup_datetime");
  ingest->add_option("--city", in_city, "City identifier");
  ingest->add_option("--output", in_out, "Output grid path")->required();

  // synth
  auto* synth = app.add_subcommand("synth", "Write the configured synthetic cities as grids");

  // cluster
  auto* clus = app.add_subcommand("cluster", "Cluster source-region profiles");

  // train-meta
  auto* train = app.add_subcommand("train-meta", "Meta-train an initialization (and memory) on the source cities");
  std::string train_method = "metast";
  train->add_option("--method", train_method, "metast or maml")->check(CLI::IsMember({"metast", "maml"}));

  // adapt
  auto* adapt = app.add_subcommand("adapt", "Adapt a meta-trained checkpoint to a target city and report RMSE");
  std::string ad_ckpt, ad_target;
  std::size_t ad_units = 1;
  adapt->add_option("--checkpoint", ad_ckpt, "Checkpoint from train-meta")->required();
  adapt->add_option("--target", ad_target, "Target city name (default: first)");
  adapt->add_option("--units", ad_units, "Days (hourly) or years (monthly) of target training data");

  // baseline
  auto* base = app.add_subcommand("baseline", "Run one method over the configured targets");
  std::string base_method;
  base->add_option("--method", base_method, "Method")
      ->required()
      ->check(CLI::IsMember({"ha", "ar", "st-net", "single-ft", "multi-ft", "maml", "metast"}));

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "Run the full experiment grid and write the report");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Sensitivity sweep of memory_d or gamma");
  std::string sw_param, sw_values;
  sw->add_option("--param", sw_param, "memory_d or gamma")->required()->check(CLI::IsMember({"memory_d", "gamma"}));
  sw->add_option("--values", sw_values, "Comma-separated values")->required();

  // export-patterns
  auto* ex = app.add_subcommand("export-patterns", "Per-region mean attention scores and profiles");
  std::string ex_ckpt, ex_target;
  std::size_t ex_units = 1;
  bool ex_adapt = true;
  ex->add_option("--checkpoint", ex_ckpt, "Checkpoint with memory")->required();
  ex->add_option("--target", ex_target, "Target city name (default: first)");
  ex->add_option("--units", ex_units, "Target split");
  ex->add_flag("!--no-adapt", ex_adapt, "Use the checkpoint parameters without target adaptation");

  // accept
  auto* acc = app.add_subcommand("accept", "Run the acceptance suite");
  bool acc_fault = false;
  acc->add_flag("--inject-fault", acc_fault, "Corrupt analytic gradients to exercise the gradient criterion");
  std::vector<int> acc_only;
  acc->add_option("--only", acc_only, "Run only these criterion ids")->check(CLI::Range(1, 10));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
  }

  try {
    if (*ingest) {
      std::ifstream in(in_csv);
      if (!in) throw DataError("cannot open '" + in_csv + "'");
      const data::BoundingBox box = parse_bbox(in_bbox);
      data::GridSeries grid;
      std::size_t malformed = 0;
      if (in_kind == "trips") {
        if (in_rows == 0 || in_cols == 0) throw ConfigError("--rows and --cols are required for trips");
        data::TripColumns cols;
        for (const auto& m : in_map) {
          const auto eq = m.find('=');
          if (eq == std::string::npos) throw ConfigError("--map expects field=column");
          const std::string key = m.substr(0, eq), col = m.substr(eq + 1);
          if (key == "pickup_time") cols.pickup_time = col;
          else if (key == "pickup_lat") cols.pickup_lat = col;
          else if (key == "pickup_lon") cols.pickup_lon = col;
          else if (key == "dropoff_time") cols.dropoff_time = col;
          else if (key == "dropoff_lat") cols.dropoff_lat = col;
          else if (key == "dropoff_lon") cols.dropoff_lon = col;
          else throw ConfigError("unknown column field '" + key + "'");
        }
        const auto records = data::read_trip_csv(in, cols, &malformed);
        data::RasterOptions opt;
        opt.bbox = box;
        opt.rows = in_rows;
        opt.cols = in_cols;
        opt.interval = data::interval_from_string(in_interval);
        data::RasterReport rep;
        grid = data::rasterize(records, opt, &rep);
        std::cout << json{{"rows_malformed", malformed},
                          {"accepted", rep.accepted},
                          {"out_of_bbox", rep.out_of_bbox},
                          {"out_of_span", rep.out_of_span}}
                         .dump()
                  << '\n';
      } else {
        const auto samples = data::read_water_csv(in, &malformed);
        grid = data::rasterize_water(samples, box, in_cell);
        std::cout << json{{"rows_malformed", malformed}, {"samples", samples.size()}}.dump() << '\n';
      }
      grid.city_id = in_city;
      if (fs::path(in_out).has_parent_path()) fs::create_directories(fs::path(in_out).parent_path());
      data::save_grid(in_out, grid);
    } else if (*synth) {
      const auto cfg = load(g);
      const std::string dir = out_dir(g, cfg.output_dir);
      json index = json::array();
      auto write = [&](const std::vector<experiment::CityEntry>& cities, std::size_t role) {
        for (std::size_t i = 0; i < cities.size(); ++i) {
          if (cities[i].grid_path) continue;
          const auto c = data::synth_city(cities[i].synth, experiment::detail::city_seed(cfg.data_seed, role, i));
          const std::string path = (fs::path(dir) / (c.name + ".grid")).string();
          data::save_grid(path, c.series);
          std::ofstream truth(fs::path(dir) / (c.name + "_archetypes.csv"));
          truth << "region_id,archetype,name\n";
          for (std::size_t r = 0; r < c.archetype.size(); ++r) {
            truth << r << ',' << c.archetype[r] << ',' << data::archetype_name(c.archetype[r]) << '\n';
          }
          index.push_back({{"city", c.name}, {"role", role ? "target" : "source"}, {"grid", path}});
        }
      };
      write(cfg.sources, 0);
      write(cfg.targets, 1);
      std::cout << index.dump(2) << '\n';
    } else if (*clus) {
      const auto cfg = load(g);
      const auto data = experiment::prepare(cfg);
      const std::string dir = out_dir(g, cfg.output_dir);
      std::ofstream assign(fs::path(dir) / "cluster_assignments.csv");
      std::ofstream prof(fs::path(dir) / "cluster_profiles.csv");
      assign << "city,region_id,cluster_id\n";
      prof << "city,region_id,phase,value\n";
      for (std::size_t c = 0; c < data.sources.size(); ++c) {
        const auto& city = data.sources[c];
        for (std::size_t r = 0; r < data.meta_sources[c].region_cluster.size(); ++r) {
          assign << city.name << ',' << r << ',' << data.meta_sources[c].region_cluster[r] << '\n';
        }
        for (const auto& p : cluster::build_profiles(city.norm, experiment::profile_period(cfg, city.norm.interval),
                                                     city.split.train_end)) {
          for (std::size_t k = 0; k < p.profile.size(); ++k) prof << city.name << ',' << p.region << ',' << k << ',' << p.profile[k] << '\n';
        }
      }
      const auto hist = cluster::label_histogram(data.clusters.labels, cfg.clustering.groups);
      std::cout << json{{"groups", cfg.clustering.groups},
                        {"histogram", hist},
                        {"iterations", data.clusters.iterations},
                        {"objective", data.clusters.objective.empty() ? 0.0 : data.clusters.objective.back()},
                        {"cluster_to_archetype", data.cluster_to_archetype}}
                       .dump()
                << '\n';
    } else if (*train) {
      const auto cfg = load(g);
      const auto data = experiment::prepare(cfg);
      const std::string dir = out_dir(g, cfg.output_dir);
      meta::MetaConfig mc = cfg.meta;
      mc.threads = cfg.threads;
      mc.use_memory = train_method == "metast";
      if (!mc.use_memory) mc.gamma = 0.0;
      const std::uint64_t seed = cfg.seeds.front();
      const auto res = meta::meta_train(data.meta_sources, cfg.net, mc, seed, [&](std::size_t it, const auto& st) {
        if ((it + 1) % 100 == 0) {
          log_line(g, "iter " + std::to_string(it + 1) + " outer_loss " + std::to_string(st.log.back().outer_loss));
        }
      });
      const std::string stem = train_method + "_seed" + std::to_string(seed);
      save_checkpoint((fs::path(dir) / (stem + ".mstt")).string(), res.checkpoint());
      std::ofstream log(fs::path(dir) / (stem + "_log.csv"));
      meta::write_log_csv(log, res.log);
      std::cout << (fs::path(dir) / (stem + ".mstt")).string() << '\n';
    } else if (*adapt) {
      const auto cfg = load(g);
      const auto data = experiment::prepare(cfg);
      const auto& target = find_target(data, cfg, ad_target, ad_units);
      ParamSet all = load_checkpoint(ad_ckpt);
      ParamSet shared;
      if (all.contains(mem::kMemoryName)) shared.set(mem::kMemoryName, all.at(mem::kMemoryName));
      ParamSet theta = all.with_prefix(mem::kMemoryName, false);
      meta::MetaConfig mc = cfg.meta;
      mc.use_memory = !shared.empty();
      const std::uint64_t seed = cfg.seeds.front();
      const double before = experiment::rmse_raw(
          target, target.test, net::predict(theta, target.test, cfg.net, mc.use_memory ? &shared.at(mem::kMemoryName) : nullptr));
      const ParamSet adapted = meta::adapt_to_target(theta, shared, target.train, cfg.net, mc, seed);
      const double after = experiment::rmse_raw(
          target, target.test, net::predict(adapted, target.test, cfg.net, mc.use_memory ? &shared.at(mem::kMemoryName) : nullptr));
      const std::string dir = out_dir(g, cfg.output_dir);
      const std::string path = (fs::path(dir) / (target.name + "_adapted_seed" + std::to_string(seed) + ".mstt")).string();
      save_checkpoint(path, ParamSet::merge(adapted, shared));
      std::cout << json{{"target", target.name}, {"rmse_before", before}, {"rmse_after", after}, {"checkpoint", path}}.dump()
                << '\n';
    } else if (*base || *eval) {
      auto cfg = load(g);
      if (*base) {
        cfg.methods = {base_method};
        cfg.reference_method = base_method;
      }
      experiment::RunOptions opt;
      opt.log = [&](const std::string& s) { log_line(g, s); };
      const auto report = experiment::run_experiment(cfg, opt);
      for (const auto& s : report.summary) {
        std::cout << s.method << " target=" << s.target << " units=" << s.units << " mean_rmse=" << s.mean_rmse
                  << " runs=" << s.runs << (s.vs_reference ? " p=" + std::to_string(s.vs_reference->p) : "") << ' '
                  << s.stars << '\n';
      }
      bool failed = false;
      for (const auto& c : report.cells) failed = failed || !c.error.empty();
      if (failed) std::cerr << "some cells failed; see " << cfg.output_dir << "/report.json\n";
    } else if (*sw) {
      const auto cfg = load(g);
      experiment::RunOptions opt;
      opt.log = [&](const std::string& s) { log_line(g, s); };
      const auto res = experiment::sweep(cfg, experiment::sweep_param_from_string(sw_param), parse_list(sw_values), opt);
      std::cout << res.param << ",mean_rmse\n";
      for (std::size_t i = 0; i < res.values.size(); ++i) std::cout << res.values[i] << ',' << res.mean_rmse[i] << '\n';
    } else if (*ex) {
      const auto cfg = load(g);
      const auto data = experiment::prepare(cfg);
      const auto& target = find_target(data, cfg, ex_target, ex_units);
      if (!fs::exists(ex_ckpt)) throw DataError("missing checkpoint '" + ex_ckpt + "'");
      ParamSet all = load_checkpoint(ex_ckpt);
      if (!all.contains(mem::kMemoryName)) throw DataError("checkpoint has no pattern memory");
      ParamSet shared;
      shared.set(mem::kMemoryName, all.at(mem::kMemoryName));
      ParamSet theta = all.with_prefix(mem::kMemoryName, false);
      if (ex_adapt) {
        meta::MetaConfig mc = cfg.meta;
        mc.use_memory = true;
        theta = meta::adapt_to_target(theta, shared, target.train, cfg.net, mc, cfg.seeds.front());
      }
      const auto e = experiment::export_patterns(theta, shared.at(mem::kMemoryName), target.test, target.raw.regions(), cfg.net);
      const auto profiles = cluster::build_profiles(target.raw, experiment::profile_period(cfg, target.raw.interval));
      const std::string dir = out_dir(g, cfg.output_dir);
      const std::string path = (fs::path(dir) / (target.name + "_patterns.csv")).string();
      std::ofstream os(path);
      experiment::write_patterns_csv(os, e, profiles);
      json out{{"csv", path}};
      if (!target.archetype.empty()) {
        out["pattern_agreement"] = experiment::pattern_agreement(e, data.cluster_to_archetype, target.archetype);
      }
      std::cout << out.dump() << '\n';
    } else if (*acc) {
      acceptance::Options opt;
      opt.inject_gradient_fault = acc_fault;
      opt.only = acc_only;
      opt.output_dir = out_dir(g, "acceptance");
      opt.threads = g.threads;
      opt.log = [&](const std::string& s) { log_line(g, s); };
      const auto verdict = acceptance::run_all(opt);
      acceptance::print(std::cout, verdict);
      std::ofstream(fs::path(opt.output_dir) / "verdict.json") << acceptance::to_json(verdict).dump(2) << '\n';
      return verdict.all_passed() ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::config);
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::data);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return static_cast<int>(ExitCode::numerical);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
