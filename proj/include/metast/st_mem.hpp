#pragma once

// Global pattern memory M (G x d): a query projected from the LSTM state
// attends over the memory rows, and the attended pattern representation is
// concatenated with the state for the enhanced prediction head. A cross-entropy
// term ties the attention scores to the region's cluster label.

#include <random>
#include <string>
#include <vector>

#include "metast/autodiff.hpp"
#include "metast/params.hpp"

namespace metast::mem {

/// Reserved checkpoint name of the memory matrix.
inline const std::string kMemoryName = "st_mem.M";

inline const std::string kQueryWeight = "query.weight";  // [d, hidden]
inline const std::string kQueryBias = "query.bias";      // [d]
inline const std::string kHeadWeight = "head_mem.weight";  // [v, hidden + d]
inline const std::string kHeadBias = "head_mem.bias";      // [v]

inline constexpr double kClusterLogEpsilon = 1e-12;

/// Memory rows; frozen while adapting to any single task.
struct PatternMemory {
  Tensor rows;  // [G, d]

  std::size_t slots() const { return rows.dim(0); }
  std::size_t dim() const { return rows.dim(1); }

  static PatternMemory random(std::size_t slots, std::size_t dim, std::mt19937_64& rng) {
    if (slots < 2) throw std::invalid_argument("pattern memory needs at least 2 slots");
    if (dim < 1) throw std::invalid_argument("pattern memory dimension must be positive");
    return {uniform_tensor(Shape{slots, dim}, -0.1, 0.1, rng)};
  }

  ParamSet as_params() const {
    ParamSet p;
    p.set(kMemoryName, rows);
    return p;
  }
  static PatternMemory from_params(const ParamSet& p) { return {p.at(kMemoryName)}; }
};

/// v = W_l h + b_l for a batch of states h [B, hidden]; returns [B, d].
inline ad::Var project_query(const VarMap& params, ad::Var hidden) {
  const ad::Var w = var_at(params, kQueryWeight);
  if (hidden.value().rank() != 2 || w.value().dim(1) != hidden.value().dim(1)) {
    throw ShapeError("project_query: hidden " + shape_str(hidden.shape()) +
                     " incompatible with W_l " + shape_str(w.shape()));
  }
  return ad::add_bias(ad::matmul(hidden, w, false, true), var_at(params, kQueryBias));
}

struct Attention {
  ad::Var scores;   // [B, G], rows on the simplex
  ad::Var pattern;  // [B, d]
};

/// Softmax over inner products with each memory row, then the
/// score-weighted sum of rows.
inline Attention attend(ad::Var query, ad::Var memory) {
  if (query.value().rank() != 2 || memory.value().rank() != 2 ||
      query.value().dim(1) != memory.value().dim(1)) {
    throw ShapeError("attend: query " + shape_str(query.shape()) + " vs memory " +
                     shape_str(memory.shape()));
  }
  const ad::Var logits = ad::matmul(query, memory, false, true);
  const ad::Var scores = ad::softmax(logits, 1);
  return {scores, ad::matmul(scores, memory)};
}

/// tanh(W'[h; z] + b').
inline ad::Var predict_enhanced(const VarMap& params, ad::Var hidden, ad::Var pattern) {
  const ad::Var joined = ad::concat(hidden, pattern, 1);
  const ad::Var w = var_at(params, kHeadWeight);
  if (w.value().dim(1) != joined.value().dim(1)) {
    throw ShapeError("predict_enhanced: head expects input width " +
                     std::to_string(w.value().dim(1)) + ", got " +
                     std::to_string(joined.value().dim(1)));
  }
  return ad::tanh(ad::add_bias(ad::matmul(joined, w, false, true), var_at(params, kHeadBias)));
}

/// One-hot rows [B, G] from integer labels.
inline Tensor one_hot(const std::vector<int>& labels, std::size_t slots) {
  Tensor t(Shape{labels.size(), slots});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= slots) {
      throw std::invalid_argument("cluster label " + std::to_string(labels[i]) +
                                  " outside [0, " + std::to_string(slots) + ")");
    }
    t[i * slots + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

/// Batch mean of -sum_g o(g) log(p(g) + eps).
inline ad::Var clustering_loss(ad::Var scores, const Tensor& labels) {
  if (labels.shape() != scores.shape()) {
    throw ShapeError("clustering_loss: labels " + shape_str(labels.shape()) +
                     " do not match scores " + shape_str(scores.shape()));
  }
  ad::Graph& g = scores.graph();
  const ad::Var logp = ad::log(ad::affine(scores, 1.0, kClusterLogEpsilon));
  const double batch = static_cast<double>(scores.value().dim(0));
  return ad::scale(ad::sum(ad::mul(g.constant(labels), logp)), -1.0 / batch);
}

}  // namespace metast::mem
