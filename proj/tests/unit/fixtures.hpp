#pragma once

// Shared helpers for the unit tests.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "metast/acceptance.hpp"
#include "metast/gradcheck.hpp"
#include "metast/params.hpp"

namespace metast::fixture {

using acceptance::detail::bitwise_equal;
using acceptance::detail::micro_net;
using acceptance::detail::random_samples;
using acceptance::detail::random_split;

/// Loss over a named parameter set, for finite-difference checks.
using ParamLoss = std::function<ad::Var(const VarMap&)>;

/// Worst relative gradient error of `loss` over every tensor in `params`.
inline double param_grad_error(const ParamSet& params, const ParamLoss& loss) {
  auto names = std::make_shared<std::vector<std::string>>(params.names());
  std::vector<Tensor> inputs;
  for (const auto& n : *names) inputs.push_back(params.at(n));
  const gradcheck::LossFn fn = [names, loss](ad::Graph&, std::span<const ad::Var> v) {
    VarMap p;
    for (std::size_t i = 0; i < names->size(); ++i) p.emplace((*names)[i], v[i]);
    return loss(p);
  };
  return gradcheck::check(fn, inputs).max_rel_error;
}

/// Same parameter layout with every value set to `value`.
inline ParamSet filled(const ParamSet& like, double value) {
  ParamSet out = like.zeros_like();
  for (auto& [_, t] : out)
    for (auto& x : t.data()) x = value;
  return out;
}

}  // namespace metast::fixture
