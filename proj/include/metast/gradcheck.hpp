#pragma once

// Central finite-difference checks of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "metast/autodiff.hpp"
#include "metast/tensor.hpp"

namespace metast::gradcheck {

/// Builds a scalar loss from leaf variables bound to the given inputs.
using LossFn = std::function<ad::Var(ad::Graph&, std::span<const ad::Var>)>;

struct Options {
  double h = 1e-5;
  // Hook applied to the analytic gradients before comparison. Fault
  // injection in the acceptance suite uses it.
  std::function<void(std::vector<Tensor>&)> corrupt;
};

struct Report {
  double max_rel_error = 0.0;        // worst tensor over all inputs
  std::vector<double> rel_error;     // per input tensor
};

/// ||a - n|| / max(||a||, ||n||) per input, Euclidean norms. Both zero
/// counts as agreement.
inline double relative_error(const Tensor& analytic, const Tensor& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = analytic[i] - numeric[i];
    diff += d * d;
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

// Inputs are bound as parameters so that losses which differentiate
// internally (second-order checks) see the same graph either way.
inline double evaluate(const LossFn& fn, const std::vector<Tensor>& inputs) {
  ad::Graph g;
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(g.parameter(t));
  return fn(g, vars).value().item();
}

inline std::vector<Tensor> analytic_gradients(const LossFn& fn, const std::vector<Tensor>& inputs) {
  ad::Graph g;
  std::vector<ad::Var> vars;
  for (const auto& t : inputs) vars.push_back(g.parameter(t));
  const ad::Var loss = fn(g, vars);
  return g.gradients(loss, vars);
}

inline std::vector<Tensor> numeric_gradients(const LossFn& fn, std::vector<Tensor> inputs, double h) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor grad(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x = inputs[k][i];
      inputs[k][i] = x + h;
      const double up = evaluate(fn, inputs);
      inputs[k][i] = x - h;
      const double down = evaluate(fn, inputs);
      inputs[k][i] = x;
      grad[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(grad));
  }
  return out;
}

inline Report check(const LossFn& fn, const std::vector<Tensor>& inputs, const Options& opt = {}) {
  std::vector<Tensor> analytic = analytic_gradients(fn, inputs);
  if (opt.corrupt) opt.corrupt(analytic);
  const std::vector<Tensor> numeric = numeric_gradients(fn, inputs, opt.h);
  Report r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const double e = relative_error(analytic[k], numeric[k]);
    r.rel_error.push_back(e);
    r.max_rel_error = std::max(r.max_rel_error, e);
  }
  return r;
}

/// Uniform random tensor in [lo, hi).
inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (auto& x : t.data()) x = u(rng);
  return t;
}


/// A named loss over freshly drawn inputs.
struct Case {
  std::string name;
  LossFn fn;
  std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
};

/// One case per differentiable operation of the tape, plus a second-order
/// case that differentiates through a gradient.
inline std::vector<Case> op_cases() {
  using V = std::span<const ad::Var>;
  auto r = [](Shape s, double lo = -1.0, double hi = 1.0) {
    return [s, lo, hi](std::mt19937_64& g) { return random_tensor(s, g, lo, hi); };
  };
  auto two = [](auto a, auto b) {
    return [a, b](std::mt19937_64& g) { return std::vector<Tensor>{a(g), b(g)}; };
  };
  auto one = [](auto a) {
    return [a](std::mt19937_64& g) { return std::vector<Tensor>{a(g)}; };
  };
  auto sq = [](ad::Var x) { return ad::sum(ad::square(x)); };
  // Keeps relu inputs away from the kink.
  auto away = [](std::mt19937_64& g) {
    Tensor t = random_tensor({3, 4}, g);
    for (auto& x : t.data()) x += x >= 0 ? 0.05 : -0.05;
    return std::vector<Tensor>{t};
  };
  const auto m34 = r({3, 4});
  std::vector<Case> c;
  c.push_back({"add", [](ad::Graph&, V v) { return ad::sum(ad::add(v[0], v[1]) * v[0]); }, two(m34, m34)});
  c.push_back({"sub", [](ad::Graph&, V v) { return ad::sum(ad::sub(v[0], v[1]) * v[1]); }, two(m34, m34)});
  c.push_back({"mul", [](ad::Graph&, V v) { return ad::sum(ad::mul(v[0], v[1])); }, two(m34, m34)});
  c.push_back({"affine", [sq](ad::Graph&, V v) { return sq(ad::affine(v[0], 1.7, -0.3)); }, one(m34)});
  c.push_back({"sigmoid", [sq](ad::Graph&, V v) { return sq(ad::sigmoid(v[0])); }, one(m34)});
  c.push_back({"tanh", [sq](ad::Graph&, V v) { return sq(ad::tanh(v[0])); }, one(m34)});
  c.push_back({"relu", [sq](ad::Graph&, V v) { return sq(ad::relu(v[0])); }, away});
  c.push_back({"exp", [](ad::Graph&, V v) { return ad::sum(ad::exp(v[0])); }, one(m34)});
  c.push_back({"log", [sq](ad::Graph&, V v) { return sq(ad::log(v[0])); }, one(r({3, 4}, 0.5, 2.0))});
  c.push_back({"reciprocal", [](ad::Graph&, V v) { return ad::sum(ad::reciprocal(v[0])); }, one(r({3, 4}, 0.5, 2.0))});
  c.push_back({"sum/mean", [](ad::Graph&, V v) { return ad::square(ad::mean(v[0])); }, one(m34)});
  c.push_back({"matmul", [sq](ad::Graph&, V v) { return sq(ad::matmul(v[0], v[1])); }, two(m34, r({4, 2}))});
  c.push_back({"matmul_nt", [sq](ad::Graph&, V v) { return sq(ad::matmul(v[0], v[1], false, true)); }, two(m34, r({2, 4}))});
  c.push_back({"matmul_tn", [sq](ad::Graph&, V v) { return sq(ad::matmul(v[0], v[1], true, false)); }, two(r({4, 3}), r({4, 2}))});
  c.push_back({"matmul_tt", [sq](ad::Graph&, V v) { return sq(ad::matmul(v[0], v[1], true, true)); }, two(r({4, 3}), r({2, 4}))});
  c.push_back({"conv2d", [sq](ad::Graph&, V v) { return sq(ad::conv2d(v[0], v[1])); }, two(r({2, 4, 5, 2}), r({3, 3, 2, 3}))});
  c.push_back({"conv2d_input_grad", [sq](ad::Graph&, V v) { return sq(ad::conv2d_input_grad(v[0], v[1])); },
               two(r({2, 4, 5, 3}), r({3, 3, 2, 3}))});
  c.push_back({"conv2d_kernel_grad", [sq](ad::Graph&, V v) { return sq(ad::conv2d_kernel_grad(v[0], v[1], 3, 3)); },
               two(r({2, 4, 5, 2}), r({2, 4, 5, 3}))});
  c.push_back({"softmax", [sq](ad::Graph&, V v) { return sq(ad::softmax(v[0], 1)) + sq(ad::softmax(v[0], 0)); }, one(m34)});
  c.push_back({"sum_axis", [sq](ad::Graph&, V v) { return sq(ad::sum_axis(v[0], 1)); }, one(m34)});
  c.push_back({"broadcast_axis", [sq](ad::Graph&, V v) { return sq(ad::broadcast_axis(v[0], 0, 5)); }, one(r({4}))});
  c.push_back({"fill", [sq](ad::Graph&, V v) { return sq(ad::fill(v[0], {2, 3})); }, one(r({}))});
  c.push_back({"tile_leading", [sq](ad::Graph&, V v) { return sq(ad::tile_leading(v[0], {2, 3, 4})) * ad::sum(v[0]); }, one(r({4}))});
  c.push_back({"sum_leading", [sq](ad::Graph&, V v) { return sq(ad::sum_leading(v[0], {4})); }, one(r({2, 3, 4}))});
  c.push_back({"add_bias", [sq](ad::Graph&, V v) { return sq(ad::add_bias(v[0], v[1])); }, two(m34, r({4}))});
  c.push_back({"concat", [](ad::Graph&, V v) {
                 const ad::Var j = ad::concat(v[0], v[1], 1);
                 return ad::sum(ad::square(j) * j);
               },
               two(m34, r({3, 2}))});
  c.push_back({"slice", [sq](ad::Graph&, V v) { return sq(ad::slice(v[0], 1, 1, 2)); }, one(m34)});
  c.push_back({"embed", [](ad::Graph&, V v) { return ad::sum(ad::square(ad::embed(v[0], 1, 1, 5)) * ad::embed(v[0], 1, 2, 5)); },
               one(r({3, 2}))});
  c.push_back({"reshape", [](ad::Graph&, V v) { return ad::sum(ad::square(ad::reshape(v[0], {2, 6})) * ad::reshape(v[0], {2, 6})); },
               one(m34)});
  c.push_back({"second_order", [](ad::Graph& g, V v) {
                 const ad::Var h = ad::tanh(ad::conv2d(v[0], v[1]));
                 const ad::Var y = ad::softmax(ad::matmul(ad::reshape(h, {1, 18}), v[2]), 1);
                 const ad::Var loss = ad::sum(ad::square(y));
                 const auto grads = g.grad(loss, v, true);
                 return ad::sum(ad::square(grads[0])) + ad::sum(ad::square(grads[1])) + ad::sum(ad::square(grads[2]));
               },
               [](std::mt19937_64& g) {
                 return std::vector<Tensor>{random_tensor({1, 3, 3, 2}, g), random_tensor({3, 3, 2, 2}, g),
                                            random_tensor({18, 3}, g)};
               }});
  return c;
}

}  // namespace metast::gradcheck
