#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "metast/experiment.hpp"
#include "metast/presets.hpp"

using namespace metast;
namespace fs = std::filesystem;

namespace {

nlohmann::json tiny_json() {
  nlohmann::json j = presets::traffic_json();
  for (auto* key : {"sources", "targets"})
    for (auto& c : j[key]) c["rows"] = c["cols"] = 3;
  j["sources"].erase(2);
  j["methods"] = {"ha", "ar", "maml", "metast"};
  j["seeds"] = {3, 4};
  j["net"]["cnn_filters"] = 2;
  j["net"]["spatial_dim"] = 4;
  j["net"]["lstm_hidden"] = 4;
  j["meta"]["max_meta_iters"] = 5;
  j["meta"]["meta_batch_cities"] = 2;
  j["meta"]["task_batch_size"] = 4;
  j["meta"]["target_steps"] = 3;
  return j;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("metast_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const int rc = std::system((std::string(METAST_CLI_PATH) + " --quiet " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  for (const auto& j : {presets::traffic_json(), presets::water_json()}) {
    const auto c = experiment::config_from_json(j);
    const auto back = experiment::config_to_json(c);
    EXPECT_EQ(experiment::config_to_json(experiment::config_from_json(back)), back);
  }
}

TEST(Config, PresetsValidate) {
  EXPECT_NO_THROW(presets::traffic().validate());
  const auto w = presets::water();
  EXPECT_NO_THROW(w.validate());
  EXPECT_EQ(w.clustering.metric, cluster::Metric::dtw);
  EXPECT_EQ(w.net.memory_slots, 3u);
  EXPECT_EQ(w.net.memory_dim, 4u);
  EXPECT_EQ(w.sources[0].synth.interval, data::Interval::month);
}

TEST(Config, ShippedFilesMatchPresets) {
  const fs::path dir = fs::path(METAST_SOURCE_DIR) / "configs";
  EXPECT_EQ(experiment::config_to_json(experiment::load_config((dir / "traffic_synth.json").string())),
            experiment::config_to_json(presets::traffic()));
  EXPECT_EQ(experiment::config_to_json(experiment::load_config((dir / "water_synth.json").string())),
            experiment::config_to_json(presets::water()));
}

TEST(Config, RejectsInvalidSettings) {
  auto bad = [](auto edit) {
    nlohmann::json j = tiny_json();
    edit(j);
    return experiment::config_from_json(j);
  };
  EXPECT_THROW(bad([](auto& j) { j["methods"] = {"lstm"}; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& j) { j["seeds"] = {1, 1}; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& j) { j["clustering"]["groups"] = 5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& j) { j["sources"] = nlohmann::json::array(); }).validate(), ConfigError);
  EXPECT_THROW(bad([](auto& j) { j["meta"]["optimizer"] = "rmsprop"; }), ConfigError);
  EXPECT_THROW(bad([](auto& j) { j["net"]["window"] = "six"; }), ConfigError);
  EXPECT_THROW(bad([](auto& j) { j.erase("targets"); }), ConfigError);
  EXPECT_THROW(experiment::load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, RunsDefaultToTwentySeeds) {
  nlohmann::json j = tiny_json();
  j.erase("seeds");
  EXPECT_EQ(experiment::config_from_json(j).seeds.size(), 20u);
  j["runs"] = 3;
  EXPECT_EQ(experiment::config_from_json(j).seeds, (std::vector<std::uint64_t>{1, 2, 3}));
}

TEST(Experiment, ReportIsDeterministic) {
  const auto cfg = experiment::config_from_json(tiny_json());
  experiment::RunOptions opt;
  opt.write_outputs = false;
  const auto a = experiment::run_experiment(cfg, opt);
  const auto b = experiment::run_experiment(cfg, opt);
  EXPECT_EQ(experiment::report_to_json(a, false), experiment::report_to_json(b, false));
  ASSERT_EQ(a.cells.size(), 4u * 2u);
  for (const auto& c : a.cells) {
    EXPECT_TRUE(std::isfinite(c.rmse)) << c.method;
    EXPECT_TRUE(c.error.empty()) << c.error;
    EXPECT_EQ(c.pattern_agreement.has_value(), c.method == "metast");
  }
  EXPECT_NE(a.find("metast", "tgt", 1), nullptr);
  EXPECT_EQ(a.per_seed("ha", "tgt", 1)[0], a.per_seed("ha", "tgt", 1)[1]);
}

TEST(Experiment, WritesReportFiles) {
  auto cfg = experiment::config_from_json(tiny_json());
  cfg.methods = {"ha", "metast"};
  cfg.seeds = {1};
  cfg.output_dir = scratch_dir("outputs").string();
  experiment::run_experiment(cfg);
  for (const char* f : {"report.json", "report.csv"}) EXPECT_TRUE(fs::exists(fs::path(cfg.output_dir) / f)) << f;
  EXPECT_FALSE(fs::is_empty(fs::path(cfg.output_dir) / "checkpoints"));
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch_dir("cli");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli("--no-such-flag"), static_cast<int>(ExitCode::config));
  EXPECT_EQ(run_cli("--config /nonexistent.json evaluate"), static_cast<int>(ExitCode::config));

  std::ofstream(dir / "broken.json") << "{ not json";
  EXPECT_EQ(run_cli("--config " + (dir / "broken.json").string() + " evaluate"), static_cast<int>(ExitCode::config));

  nlohmann::json j = tiny_json();
  j["methods"] = {"ha"};
  j["seeds"] = {1};
  std::ofstream(dir / "tiny.json") << j.dump();
  EXPECT_EQ(run_cli("--config " + (dir / "tiny.json").string() + " --out-dir " + (dir / "out").string() + " evaluate"), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "report.json"));

  EXPECT_EQ(run_cli("ingest --csv " + (dir / "missing.csv").string() + " --bbox 0,0,1,1 --rows 2 --cols 2 --output " +
                    (dir / "g").string()),
            static_cast<int>(ExitCode::data));
}
