#pragma once

// Built-in experiment presets. configs/traffic_synth.json and
// configs/water_synth.json hold the same settings as files.

#include "json.hpp"
#include "metast/experiment.hpp"

namespace metast::presets {

/// Hourly two-channel benchmark: three source cities and one target city
/// with four regional archetypes, trained with the micro network.
inline nlohmann::json traffic_json() {
  return nlohmann::json::parse(R"({
  "name": "traffic_synth",
  "data_seed": 7,
  "interval": "hour",
  "sources": [
    {"name": "src_a", "rows": 5, "cols": 5, "periods": 14, "noise": 0.1, "scale": 1.0, "phase_shift": 0},
    {"name": "src_b", "rows": 5, "cols": 5, "periods": 14, "noise": 0.1, "scale": 2.0, "phase_shift": 1},
    {"name": "src_c", "rows": 5, "cols": 5, "periods": 14, "noise": 0.1, "scale": 0.5, "phase_shift": -1}
  ],
  "targets": [{"name": "tgt", "rows": 5, "cols": 5, "periods": 8, "noise": 0.1, "scale": 1.5, "phase_shift": 0.5}],
  "target_units": [1],
  "methods": ["ha", "ar", "st-net", "single-ft", "multi-ft", "maml", "metast"],
  "seeds": [1, 2, 3, 4, 5],
  "net": {"patch_size": 3, "channels": 2, "cnn_layers": 1, "cnn_filters": 8, "kernel_size": 3,
          "spatial_dim": 16, "lstm_hidden": 32, "window": 4, "memory_slots": 4, "memory_dim": 8},
  "meta": {"inner_lr": 0.1, "outer_lr": 0.02, "inner_steps": 1, "meta_batch_cities": 3, "task_batch_size": 16,
           "max_meta_iters": 600, "gamma": 0.01, "second_order": true, "optimizer": "adam",
           "target_steps": 100, "target_lr": 0.05, "target_batch_size": 32},
  "finetune": {"pretrain_steps": 200, "pretrain_lr": 0.003, "batch_size": 96, "optimizer": "adam"},
  "clustering": {"groups": 4, "metric": "euclidean"},
  "output_dir": "out/traffic_synth"
})");
}

inline experiment::ExperimentConfig traffic() { return experiment::config_from_json(traffic_json()); }

/// Monthly single-channel benchmark: pH-like readings around 7 with three
/// regional archetypes, DTW clustering and a smaller memory.
inline nlohmann::json water_json() {
  return nlohmann::json::parse(R"({
  "name": "water_synth",
  "data_seed": 11,
  "interval": "month",
  "sources": [
    {"name": "src_a", "rows": 5, "cols": 5, "periods": 10, "channels": 1, "noise": 0.05, "scale": 0.4, "offset": 7.0,
     "phase_shift": 0, "archetype_mix": [1, 1, 1, 0], "missing_rate": 0.05},
    {"name": "src_b", "rows": 5, "cols": 5, "periods": 10, "channels": 1, "noise": 0.05, "scale": 0.6, "offset": 7.2,
     "phase_shift": 1, "archetype_mix": [1, 1, 1, 0], "missing_rate": 0.05}
  ],
  "targets": [{"name": "tgt", "rows": 5, "cols": 5, "periods": 4, "channels": 1, "noise": 0.05, "scale": 0.5,
               "offset": 6.9, "phase_shift": 0, "archetype_mix": [1, 1, 1, 0], "missing_rate": 0.05}],
  "target_units": [1, 2],
  "methods": ["ha", "ar", "st-net", "single-ft", "multi-ft", "maml", "metast"],
  "seeds": [1, 2, 3, 4, 5],
  "net": {"patch_size": 3, "channels": 1, "cnn_layers": 1, "cnn_filters": 4, "kernel_size": 3,
          "spatial_dim": 8, "lstm_hidden": 16, "window": 6, "memory_slots": 3, "memory_dim": 4},
  "meta": {"inner_lr": 0.05, "outer_lr": 0.003, "inner_steps": 1, "meta_batch_cities": 2, "task_batch_size": 16,
           "max_meta_iters": 300, "gamma": 0.001, "second_order": true, "optimizer": "adam",
           "target_steps": 100, "target_lr": 0.05, "target_batch_size": 16},
  "finetune": {"pretrain_steps": 200, "pretrain_lr": 0.003, "batch_size": 48, "optimizer": "adam"},
  "clustering": {"groups": 3, "metric": "dtw"},
  "output_dir": "out/water_synth"
})");
}

inline experiment::ExperimentConfig water() { return experiment::config_from_json(water_json()); }

}  // namespace metast::presets
