#pragma once

// Base spatial-temporal predictor: a small CNN encodes each region's N x N
// neighbourhood patch per time step, an LSTM runs over the window, and a tanh
// head predicts the next-step value in normalized units.

#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "metast/autodiff.hpp"
#include "metast/error.hpp"
#include "metast/params.hpp"
#include "metast/st_mem.hpp"

namespace metast::net {

struct StNetConfig {
  std::size_t patch_size = 7;  // N, odd
  std::size_t channels = 2;    // v
  std::size_t cnn_layers = 1;  // Q
  std::size_t cnn_filters = 64;
  std::size_t kernel_size = 3;
  std::size_t spatial_dim = 64;  // width of s
  std::size_t lstm_hidden = 128;
  std::size_t window = 8;
  std::size_t external_dim = 0;
  std::size_t memory_slots = 4;  // G
  std::size_t memory_dim = 8;    // d

  void validate() const {
    auto positive = [](std::size_t v, const char* what) {
      if (v == 0) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(patch_size, "patch_size");
    positive(channels, "channels");
    positive(cnn_layers, "cnn_layers");
    positive(cnn_filters, "cnn_filters");
    positive(kernel_size, "kernel_size");
    positive(spatial_dim, "spatial_dim");
    positive(lstm_hidden, "lstm_hidden");
    positive(window, "window");
    positive(memory_dim, "memory_dim");
    if (patch_size % 2 == 0) throw ConfigError("patch_size must be odd");
    if (kernel_size % 2 == 0) throw ConfigError("kernel_size must be odd");
    if (memory_slots < 2) throw ConfigError("memory_slots must be at least 2");
  }

  std::size_t patch_values() const { return patch_size * patch_size * channels; }
};

/// One supervised instance for a single region.
struct TrainingSample {
  std::vector<double> patches;    // window x [N, N, v], oldest first
  std::vector<double> externals;  // window x external_dim, may be empty
  std::vector<double> target;     // v values, normalized
  std::size_t region = 0;
  std::size_t time = 0;  // index of the target interval
};

/// Samples stacked for one graph evaluation. Patches are time-major so that
/// rows [t*B, (t+1)*B) hold step t of every sample.
struct Batch {
  Tensor patches;    // [window*B, N, N, v]
  Tensor externals;  // [window*B, e] or empty
  Tensor targets;    // [B, v]
  std::vector<std::size_t> regions;
  std::size_t size = 0;
};

template <class Range>
Batch make_batch_from(const Range& samples, const StNetConfig& cfg) {
  Batch b;
  b.size = static_cast<std::size_t>(std::distance(std::begin(samples), std::end(samples)));
  if (b.size == 0) throw std::invalid_argument("empty batch");
  const std::size_t N = cfg.patch_size, v = cfg.channels, T = cfg.window, e = cfg.external_dim;
  const std::size_t pv = cfg.patch_values();
  b.patches = Tensor(Shape{T * b.size, N, N, v});
  if (e > 0) b.externals = Tensor(Shape{T * b.size, e});
  b.targets = Tensor(Shape{b.size, v});
  auto P = b.patches.data();
  std::size_t i = 0;
  for (const auto& ref : samples) {
    const TrainingSample& s = ref;
    if (s.patches.size() != T * pv || s.target.size() != v || s.externals.size() != (e > 0 ? T * e : s.externals.size())) {
      throw ShapeError("training sample does not match the network configuration");
    }
    for (std::size_t t = 0; t < T; ++t) {
      std::copy_n(s.patches.begin() + static_cast<std::ptrdiff_t>(t * pv), pv,
                  P.begin() + static_cast<std::ptrdiff_t>((t * b.size + i) * pv));
      if (e > 0) {
        std::copy_n(s.externals.begin() + static_cast<std::ptrdiff_t>(t * e), e,
                    b.externals.data().begin() + static_cast<std::ptrdiff_t>((t * b.size + i) * e));
      }
    }
    std::copy(s.target.begin(), s.target.end(), b.targets.data().begin() + static_cast<std::ptrdiff_t>(i * v));
    b.regions.push_back(s.region);
    ++i;
  }
  return b;
}

inline Batch make_batch(std::span<const TrainingSample> samples, const StNetConfig& cfg) {
  return make_batch_from(samples, cfg);
}

inline Batch make_batch(std::span<const TrainingSample> samples, std::span<const std::size_t> indices,
                        const StNetConfig& cfg) {
  std::vector<std::reference_wrapper<const TrainingSample>> picked;
  picked.reserve(indices.size());
  for (std::size_t k : indices) picked.emplace_back(samples[k]);
  return make_batch_from(picked, cfg);
}

// ---------------------------------------------------------------------------
// Parameters

inline std::string conv_kernel_name(std::size_t q) { return "cnn." + std::to_string(q) + ".kernel"; }
inline std::string conv_bias_name(std::size_t q) { return "cnn." + std::to_string(q) + ".bias"; }
inline const std::string kSpatialWeight = "fc_s.weight";  // [spatial_dim, N*N*F]
inline const std::string kSpatialBias = "fc_s.bias";
inline const std::string kHeadWeight = "head.weight";  // [v, hidden]
inline const std::string kHeadBias = "head.bias";
inline const char* const kGates[] = {"i", "f", "d", "c"};
inline std::string lstm_name(const char* kind, const char* gate) {
  return std::string("lstm.") + kind + "_" + gate;
}

/// Seeded init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer.
inline ParamSet init_params(const StNetConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  ParamSet p;
  const std::size_t K = cfg.kernel_size, F = cfg.cnn_filters, N = cfg.patch_size;
  std::size_t cin = cfg.channels;
  for (std::size_t q = 0; q < cfg.cnn_layers; ++q) {
    const std::size_t fan = K * K * cin;
    p.set(conv_kernel_name(q), uniform_fan_in(Shape{K, K, cin, F}, fan, rng));
    p.set(conv_bias_name(q), uniform_fan_in(Shape{F}, fan, rng));
    cin = F;
  }
  const std::size_t flat = N * N * F;
  p.set(kSpatialWeight, uniform_fan_in(Shape{cfg.spatial_dim, flat}, flat, rng));
  p.set(kSpatialBias, uniform_fan_in(Shape{cfg.spatial_dim}, flat, rng));

  const std::size_t H = cfg.lstm_hidden;
  const std::size_t in = cfg.spatial_dim + cfg.external_dim;
  for (const char* gate : kGates) {
    p.set(lstm_name("U", gate), uniform_fan_in(Shape{H, in}, in + H, rng));
    p.set(lstm_name("W", gate), uniform_fan_in(Shape{H, H}, in + H, rng));
    p.set(lstm_name("b", gate), uniform_fan_in(Shape{H}, in + H, rng));
  }
  p.set(kHeadWeight, uniform_fan_in(Shape{cfg.channels, H}, H, rng));
  p.set(kHeadBias, uniform_fan_in(Shape{cfg.channels}, H, rng));

  const std::size_t d = cfg.memory_dim;
  p.set(mem::kQueryWeight, uniform_fan_in(Shape{d, H}, H, rng));
  p.set(mem::kQueryBias, uniform_fan_in(Shape{d}, H, rng));
  p.set(mem::kHeadWeight, uniform_fan_in(Shape{cfg.channels, H + d}, H + d, rng));
  p.set(mem::kHeadBias, uniform_fan_in(Shape{cfg.channels}, H + d, rng));
  return p;
}

// ---------------------------------------------------------------------------
// Forward pieces

/// Q ReLU conv layers, flatten, one fully connected layer.
/// patches: [M, N, N, v] -> s: [M, spatial_dim].
inline ad::Var cnn_encode(const VarMap& p, ad::Var patches, const StNetConfig& cfg) {
  const Shape& shape = patches.shape();
  if (shape.size() != 4 || shape[1] != cfg.patch_size || shape[2] != cfg.patch_size ||
      shape[3] != cfg.channels) {
    throw ShapeError("cnn_encode: expected [M," + std::to_string(cfg.patch_size) + "," +
                     std::to_string(cfg.patch_size) + "," + std::to_string(cfg.channels) +
                     "], got " + shape_str(shape));
  }
  ad::Var x = patches;
  for (std::size_t q = 0; q < cfg.cnn_layers; ++q) {
    x = ad::relu(ad::add_bias(ad::conv2d(x, var_at(p, conv_kernel_name(q))), var_at(p, conv_bias_name(q))));
  }
  const std::size_t m = shape[0];
  const ad::Var flat = ad::reshape(x, Shape{m, x.value().size() / m});
  return ad::add_bias(ad::matmul(flat, var_at(p, kSpatialWeight), false, true), var_at(p, kSpatialBias));
}

struct LstmState {
  ad::Var h;  // [B, H]
  ad::Var c;  // [B, H]
};

/// One step of the gated recurrence over input [s; e]:
///   i, f, d = sigmoid(U x + W h + b);  c^ = tanh(U_c x + W_c h + b_c)
///   c = f o c_prev + i o c^;  h = tanh(c) o d
inline LstmState lstm_step(const VarMap& p, ad::Var s, std::optional<ad::Var> e, LstmState prev) {
  const ad::Var x = e ? ad::concat(s, *e, 1) : s;
  auto gate = [&](const char* g) {
    const ad::Var u = var_at(p, lstm_name("U", g));
    if (u.value().dim(1) != x.value().dim(1)) {
      throw ShapeError("lstm_step: input width " + std::to_string(x.value().dim(1)) +
                       " does not match U_" + g + " " + shape_str(u.shape()));
    }
    return ad::add_bias(ad::add(ad::matmul(x, u, false, true),
                                ad::matmul(prev.h, var_at(p, lstm_name("W", g)), false, true)),
                        var_at(p, lstm_name("b", g)));
  };
  const ad::Var i = ad::sigmoid(gate("i"));
  const ad::Var f = ad::sigmoid(gate("f"));
  const ad::Var d = ad::sigmoid(gate("d"));
  const ad::Var cand = ad::tanh(gate("c"));
  const ad::Var c = ad::add(ad::mul(f, prev.c), ad::mul(i, cand));
  const ad::Var h = ad::mul(ad::tanh(c), d);
  return {h, c};
}

/// tanh(W_n h + b_n).
inline ad::Var base_head(const VarMap& p, ad::Var h) {
  return ad::tanh(ad::add_bias(ad::matmul(h, var_at(p, kHeadWeight), false, true), var_at(p, kHeadBias)));
}

/// Runs the CNN on every step and unrolls the LSTM from a zero state.
/// Returns the final hidden state [B, H].
inline ad::Var encode_window(const VarMap& p, const Batch& batch, const StNetConfig& cfg) {
  ad::Graph& g = var_at(p, kHeadWeight).graph();
  const std::size_t B = batch.size;
  if (batch.patches.dim(0) != cfg.window * B) {
    throw ShapeError("batch window does not match configuration");
  }
  const ad::Var s_all = cnn_encode(p, g.constant(batch.patches), cfg);
  std::optional<ad::Var> e_all;
  if (cfg.external_dim > 0) e_all = g.constant(batch.externals);
  LstmState state{g.constant(Tensor(Shape{B, cfg.lstm_hidden})),
                  g.constant(Tensor(Shape{B, cfg.lstm_hidden}))};
  for (std::size_t t = 0; t < cfg.window; ++t) {
    const ad::Var s = cfg.window == 1 ? s_all : ad::slice(s_all, 0, t * B, B);
    std::optional<ad::Var> e;
    if (e_all) e = cfg.window == 1 ? *e_all : ad::slice(*e_all, 0, t * B, B);
    state = lstm_step(p, s, e, state);
  }
  return state.h;
}

struct Forward {
  ad::Var prediction;  // [B, v]
  ad::Var hidden;      // [B, H]
};

/// Base predictor: encoder + tanh head.
inline Forward forward(const VarMap& p, const Batch& batch, const StNetConfig& cfg) {
  const ad::Var h = encode_window(p, batch, cfg);
  return {base_head(p, h), h};
}

struct MemoryForward {
  ad::Var prediction;
  ad::Var hidden;
  ad::Var scores;
};

/// Memory-enhanced predictor: encoder, query, attention, enhanced head.
inline MemoryForward forward_with_memory(const VarMap& p, ad::Var memory, const Batch& batch,
                                         const StNetConfig& cfg) {
  const ad::Var h = encode_window(p, batch, cfg);
  const mem::Attention att = mem::attend(mem::project_query(p, h), memory);
  return {mem::predict_enhanced(p, h, att.pattern), h, att.scores};
}

/// Batch mean of squared error summed over channels.
inline ad::Var squared_error(ad::Var prediction, const Tensor& targets) {
  if (prediction.shape() != targets.shape()) {
    throw ShapeError("prediction " + shape_str(prediction.shape()) + " vs target " +
                     shape_str(targets.shape()));
  }
  ad::Graph& g = prediction.graph();
  const double B = static_cast<double>(targets.dim(0));
  return ad::scale(ad::sum(ad::square(ad::sub(prediction, g.constant(targets)))), 1.0 / B);
}

/// Mean squared error of the batch; with a memory the enhanced head is used.
inline ad::Var mse_loss(const VarMap& p, const Batch& batch, const StNetConfig& cfg,
                        std::optional<ad::Var> memory = std::nullopt) {
  const ad::Var pred = memory ? forward_with_memory(p, *memory, batch, cfg).prediction
                              : forward(p, batch, cfg).prediction;
  return squared_error(pred, batch.targets);
}

// ---------------------------------------------------------------------------
// Value-level helpers

/// Predictions [B, v] for a batch, evaluated in chunks.
inline Tensor predict(const ParamSet& params, std::span<const TrainingSample> samples,
                      const StNetConfig& cfg, const Tensor* memory = nullptr,
                      std::size_t chunk = 512) {
  Tensor out(Shape{samples.size(), cfg.channels});
  for (std::size_t begin = 0; begin < samples.size(); begin += chunk) {
    const std::size_t n = std::min(chunk, samples.size() - begin);
    ad::Graph g;
    const VarMap p = bind(g, params, false);
    const Batch batch = make_batch(samples.subspan(begin, n), cfg);
    const ad::Var pred = memory ? forward_with_memory(p, g.constant(*memory), batch, cfg).prediction
                                : forward(p, batch, cfg).prediction;
    std::copy(pred.value().data().begin(), pred.value().data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(begin * cfg.channels));
  }
  return out;
}

/// Spatial representation s of a single [N, N, v] patch.
inline Tensor cnn_encode(const Tensor& patch, const ParamSet& params, const StNetConfig& cfg) {
  ad::Graph g;
  const VarMap p = bind(g, params, false);
  const ad::Var x = g.constant(patch.reshaped(Shape{1, patch.dim(0), patch.dim(1), patch.dim(2)}));
  const ad::Var s = cnn_encode(p, x, cfg);
  return s.value().reshaped(Shape{cfg.spatial_dim});
}

}  // namespace metast::net
