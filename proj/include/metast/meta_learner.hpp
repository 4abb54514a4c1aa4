#pragma once

// Bilevel training. The generic part works on any (theta, shared) pair of
// ParamSets with loss callbacks: `theta` is adapted per task by plain SGD,
// `shared` (the pattern memory) is read-only inside a task and only moves in
// the outer update. The ST-net part below builds those callbacks from city
// samples and drives the full meta-training loop.

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "metast/autodiff.hpp"
#include "metast/parallel.hpp"
#include "metast/params.hpp"
#include "metast/st_mem.hpp"
#include "metast/st_net.hpp"

namespace metast::meta {

enum class OptimizerKind { sgd, adam };

struct MetaConfig {
  double inner_lr = 1e-3;  // alpha
  double outer_lr = 1e-3;
  std::size_t inner_steps = 5;
  std::size_t meta_batch_cities = 3;
  std::size_t task_batch_size = 128;
  std::size_t max_meta_iters = 20000;
  double gamma = 1e-4;
  bool second_order = true;
  OptimizerKind optimizer = OptimizerKind::sgd;
  bool use_memory = true;

  // Target-city adaptation schedule.
  std::size_t target_steps = 200;
  double target_lr = 1e-3;
  std::size_t target_batch_size = 128;

  std::size_t threads = 1;

  void validate() const {
    if (!(inner_lr >= 0.0)) throw ConfigError("inner_lr must be non-negative");
    if (!(outer_lr >= 0.0)) throw ConfigError("outer_lr must be non-negative");
    if (inner_steps < 1) throw ConfigError("inner_steps must be at least 1");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be non-negative");
    if (meta_batch_cities < 1) throw ConfigError("meta_batch_cities must be at least 1");
    if (task_batch_size < 1) throw ConfigError("task_batch_size must be at least 1");
    if (target_batch_size < 1) throw ConfigError("target_batch_size must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// Generic bilevel machinery

using SupportFn = std::function<ad::Var(ad::Graph&, const VarMap& theta, const VarMap& shared)>;

struct QueryTerms {
  ad::Var mse;
  std::optional<ad::Var> clu;
};
using QueryFn = std::function<QueryTerms(ad::Graph&, const VarMap& theta, const VarMap& shared)>;

/// One source task: the support loss drives adaptation, the query terms
/// measure generalization of the adapted parameters.
struct TaskObjective {
  SupportFn support;
  QueryFn query;
};

/// `steps` SGD steps on the support loss from theta0. Neither input is touched.
inline ParamSet inner_adapt(const ParamSet& theta0, const ParamSet& shared, const SupportFn& support,
                            double lr, std::size_t steps) {
  ParamSet theta = theta0;
  for (std::size_t s = 0; s < steps; ++s) {
    ad::Graph g;
    const VarMap tv = bind(g, theta, true);
    const VarMap sv = bind(g, shared, false);
    const ad::Var loss = support(g, tv, sv);
    theta = sgd_step(theta, gradients_of(g, loss, tv), lr);
  }
  return theta;
}

struct OuterLoss {
  double total = 0.0;
  double mse = 0.0;
  double clu = 0.0;
};

namespace detail {

inline ad::Var combine(const QueryTerms& q, double gamma) {
  if (!q.clu || gamma == 0.0) return q.mse;
  return ad::add(q.mse, ad::scale(*q.clu, gamma));
}

inline void accumulate(OuterLoss& acc, const QueryTerms& q, double gamma) {
  acc.mse += q.mse.value().item();
  if (q.clu) acc.clu += q.clu->value().item();
  acc.total += combine(q, gamma).value().item();
}

/// Adapts on-graph with differentiable SGD steps.
inline VarMap adapt_on_graph(ad::Graph& g, VarMap theta, const VarMap& shared,
                             const SupportFn& support, double lr, std::size_t steps) {
  for (std::size_t s = 0; s < steps; ++s) {
    const ad::Var loss = support(g, theta, shared);
    std::vector<ad::Var> wrt;
    for (const auto& [_, v] : theta) wrt.push_back(v);
    const auto grads = g.grad(loss, wrt, true);
    std::size_t i = 0;
    for (auto& [_, v] : theta) v = ad::sub(v, ad::scale(grads[i++], lr));
  }
  return theta;
}

}  // namespace detail

/// Sum over tasks of query mse + gamma * clustering term at the adapted
/// parameters.
inline OuterLoss outer_loss(const ParamSet& theta0, const ParamSet& shared,
                            std::span<const TaskObjective> tasks, const MetaConfig& cfg) {
  if (tasks.empty()) throw std::invalid_argument("outer_loss: empty task list");
  OuterLoss acc;
  for (const TaskObjective& task : tasks) {
    const ParamSet adapted = inner_adapt(theta0, shared, task.support, cfg.inner_lr, cfg.inner_steps);
    ad::Graph g;
    const VarMap tv = bind(g, adapted, false);
    const VarMap sv = bind(g, shared, false);
    detail::accumulate(acc, task.query(g, tv, sv), cfg.gamma);
  }
  return acc;
}

struct MetaGradient {
  ParamSet theta;
  ParamSet shared;
  OuterLoss loss;
};

/// Gradient of outer_loss with respect to (theta0, shared). Second-order mode
/// differentiates through the inner SGD steps; first-order mode evaluates the
/// query gradient at the adapted parameters and applies it to theta0.
inline MetaGradient meta_gradient(const ParamSet& theta0, const ParamSet& shared,
                                  std::span<const TaskObjective> tasks, const MetaConfig& cfg) {
  if (tasks.empty()) throw std::invalid_argument("meta_gradient: empty task list");
  std::vector<MetaGradient> per_task(tasks.size());
  parallel_for(tasks.size(), cfg.threads, [&](std::size_t k) {
    const TaskObjective& task = tasks[k];
    MetaGradient& out = per_task[k];
    ad::Graph g;
    VarMap tv;
    VarMap adapted;
    if (cfg.second_order) {
      tv = bind(g, theta0, true);
    } else {
      tv = bind(g, inner_adapt(theta0, shared, task.support, cfg.inner_lr, cfg.inner_steps), true);
    }
    const VarMap sv = bind(g, shared, true);
    adapted = cfg.second_order
                  ? detail::adapt_on_graph(g, tv, sv, task.support, cfg.inner_lr, cfg.inner_steps)
                  : tv;
    const QueryTerms q = task.query(g, adapted, sv);
    detail::accumulate(out.loss, q, cfg.gamma);
    const ad::Var total = detail::combine(q, cfg.gamma);
    out.theta = gradients_of(g, total, tv);
    out.shared = gradients_of(g, total, sv);
  });
  MetaGradient sum = std::move(per_task[0]);
  for (std::size_t k = 1; k < per_task.size(); ++k) {
    sum.theta.axpy(1.0, per_task[k].theta);
    sum.shared.axpy(1.0, per_task[k].shared);
    sum.loss.total += per_task[k].loss.total;
    sum.loss.mse += per_task[k].loss.mse;
    sum.loss.clu += per_task[k].loss.clu;
  }
  return sum;
}

/// Outer-loop update rule over the merged (theta, shared) set.
class OuterOptimizer {
 public:
  OuterOptimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr), adam_(Adam::Options{lr}) {}
  explicit OuterOptimizer(const MetaConfig& cfg) : OuterOptimizer(cfg.optimizer, cfg.outer_lr) {}

  ParamSet step(const ParamSet& params, const ParamSet& grads) {
    if (lr_ == 0.0) return params;
    if (kind_ == OptimizerKind::adam) return adam_.step(params, grads);
    return sgd_step(params, grads, lr_);
  }

 private:
  OptimizerKind kind_;
  double lr_;
  Adam adam_;
};

struct MetaState {
  ParamSet theta;
  ParamSet shared;
  OuterLoss loss;
};

/// One outer update of (theta0, shared).
inline MetaState meta_step(const ParamSet& theta0, const ParamSet& shared,
                           std::span<const TaskObjective> tasks, const MetaConfig& cfg,
                           OuterOptimizer& opt) {
  const MetaGradient grad = meta_gradient(theta0, shared, tasks, cfg);
  const ParamSet merged = ParamSet::merge(theta0, shared);
  const ParamSet updated = opt.step(merged, ParamSet::merge(grad.theta, grad.shared));
  MetaState out;
  for (const auto& [name, t] : updated) {
    if (shared.contains(name)) {
      out.shared.set(name, t);
    } else {
      out.theta.set(name, t);
    }
  }
  out.loss = grad.loss;
  return out;
}

inline MetaState meta_step(const ParamSet& theta0, const ParamSet& shared,
                           std::span<const TaskObjective> tasks, const MetaConfig& cfg) {
  OuterOptimizer opt(OptimizerKind::sgd, cfg.outer_lr);
  return meta_step(theta0, shared, tasks, cfg, opt);
}

// ---------------------------------------------------------------------------
// Spatial-temporal tasks

/// Training samples of one source city plus the cluster label of each region.
struct SourceCity {
  std::string name;
  std::vector<net::TrainingSample> samples;
  std::vector<int> region_cluster;
};

/// Support and query samples of one city, disjoint in time.
struct TaskSplit {
  std::vector<net::TrainingSample> support;
  std::vector<net::TrainingSample> query;
  std::vector<int> query_labels;
};

/// Loss callbacks for a split. With memory enabled the enhanced head is used
/// throughout and the query side carries the clustering term.
inline TaskObjective make_objective(const TaskSplit& split, const net::StNetConfig& net_cfg,
                                    const MetaConfig& cfg) {
  if (split.support.empty() || split.query.empty()) {
    throw std::invalid_argument("task split needs non-empty support and query sets");
  }
  auto support = std::make_shared<net::Batch>(net::make_batch(split.support, net_cfg));
  auto query = std::make_shared<net::Batch>(net::make_batch(split.query, net_cfg));
  auto labels = std::make_shared<Tensor>();
  if (cfg.use_memory) *labels = mem::one_hot(split.query_labels, net_cfg.memory_slots);
  const bool use_memory = cfg.use_memory;

  TaskObjective obj;
  obj.support = [support, net_cfg, use_memory](ad::Graph&, const VarMap& theta, const VarMap& shared) {
    if (use_memory) return net::mse_loss(theta, *support, net_cfg, var_at(shared, mem::kMemoryName));
    return net::mse_loss(theta, *support, net_cfg);
  };
  obj.query = [query, labels, net_cfg, use_memory](ad::Graph&, const VarMap& theta,
                                                    const VarMap& shared) -> QueryTerms {
    if (!use_memory) {
      return {net::squared_error(net::forward(theta, *query, net_cfg).prediction, query->targets), {}};
    }
    const auto fwd = net::forward_with_memory(theta, var_at(shared, mem::kMemoryName), *query, net_cfg);
    return {net::squared_error(fwd.prediction, query->targets), mem::clustering_loss(fwd.scores, *labels)};
  };
  return obj;
}

/// Draws time-disjoint support/query batches from one city.
class TaskSampler {
 public:
  explicit TaskSampler(const SourceCity& city) : city_(&city) {
    if (city.region_cluster.empty()) {
      throw std::invalid_argument("source city '" + city.name + "' has no cluster labels");
    }
    std::map<std::size_t, std::vector<std::size_t>> by_time;
    for (std::size_t i = 0; i < city.samples.size(); ++i) by_time[city.samples[i].time].push_back(i);
    if (by_time.size() < 2) {
      throw std::invalid_argument("source city '" + city.name + "' needs at least two timestamps");
    }
    for (auto& [_, idx] : by_time) groups_.push_back(std::move(idx));
  }

  TaskSplit sample(std::size_t batch_size, std::mt19937_64& rng) const {
    std::vector<std::size_t> order(groups_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t half = order.size() / 2;
    TaskSplit split;
    draw(order, 0, half, batch_size, rng, split.support);
    draw(order, half, order.size(), batch_size, rng, split.query);
    for (const auto& s : split.query) split.query_labels.push_back(label(s.region));
    return split;
  }

 private:
  int label(std::size_t region) const {
    if (region >= city_->region_cluster.size()) {
      throw std::out_of_range("region without a cluster label in city '" + city_->name + "'");
    }
    return city_->region_cluster[region];
  }

  void draw(const std::vector<std::size_t>& order, std::size_t lo, std::size_t hi, std::size_t n,
            std::mt19937_64& rng, std::vector<net::TrainingSample>& out) const {
    std::uniform_int_distribution<std::size_t> pick_time(lo, hi - 1);
    for (std::size_t k = 0; k < n; ++k) {
      const auto& group = groups_[order[pick_time(rng)]];
      std::uniform_int_distribution<std::size_t> pick(0, group.size() - 1);
      out.push_back(city_->samples[group[pick(rng)]]);
    }
  }

  const SourceCity* city_;
  std::vector<std::vector<std::size_t>> groups_;
};

struct LogRow {
  std::size_t iter = 0;
  double outer_loss = 0.0;
  double mse = 0.0;
  double clu = 0.0;
  double wall_ms = 0.0;
};

inline void write_log_csv(std::ostream& os, const std::vector<LogRow>& log) {
  os << "iter,outer_loss,mse_term,clu_term,wall_ms\n";
  os.precision(17);
  for (const auto& r : log) {
    os << r.iter << ',' << r.outer_loss << ',' << r.mse << ',' << r.clu << ',' << r.wall_ms << '\n';
  }
}

struct MetaTrainResult {
  ParamSet theta;
  ParamSet shared;  // holds the memory when enabled, otherwise empty
  std::vector<LogRow> log;

  ParamSet checkpoint() const { return ParamSet::merge(theta, shared); }
};

/// Seeded initial (theta0, shared) pair.
inline MetaTrainResult initial_state(const net::StNetConfig& net_cfg, const MetaConfig& cfg,
                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  MetaTrainResult r;
  r.theta = net::init_params(net_cfg, rng);
  if (cfg.use_memory) {
    r.shared = mem::PatternMemory::random(net_cfg.memory_slots, net_cfg.memory_dim, rng).as_params();
  }
  return r;
}

/// Full meta-training loop: each iteration samples a batch of cities, one
/// time-disjoint task per city, and applies one outer update.
/// `on_iter` (optional) observes the state after each iteration.
inline MetaTrainResult meta_train(const std::vector<SourceCity>& cities, const net::StNetConfig& net_cfg,
                                  const MetaConfig& cfg, std::uint64_t seed,
                                  const std::function<void(std::size_t, const MetaTrainResult&)>& on_iter = {}) {
  net_cfg.validate();
  cfg.validate();
  if (cities.empty()) throw std::invalid_argument("meta_train needs at least one source city");
  std::vector<TaskSampler> samplers;
  for (const auto& c : cities) samplers.emplace_back(c);

  MetaTrainResult state = initial_state(net_cfg, cfg, seed);
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  OuterOptimizer opt(cfg);
  const std::size_t per_iter = std::min(cfg.meta_batch_cities, cities.size());
  std::vector<std::size_t> city_order(cities.size());
  std::iota(city_order.begin(), city_order.end(), std::size_t{0});

  for (std::size_t it = 0; it < cfg.max_meta_iters; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(city_order.begin(), city_order.end(), rng);
    std::vector<TaskObjective> tasks;
    for (std::size_t k = 0; k < per_iter; ++k) {
      tasks.push_back(make_objective(samplers[city_order[k]].sample(cfg.task_batch_size, rng), net_cfg, cfg));
    }
    MetaState next = meta_step(state.theta, state.shared, tasks, cfg, opt);
    state.theta = std::move(next.theta);
    state.shared = std::move(next.shared);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    state.log.push_back({it, next.loss.total, next.loss.mse, next.loss.clu, ms});
    if (on_iter) on_iter(it, state);
  }
  return state;
}

/// Gradient descent from theta0 on the target training samples with the
/// shared memory held fixed. Returns the adapted parameters.
inline ParamSet adapt_to_target(const ParamSet& theta0, const ParamSet& shared,
                                std::span<const net::TrainingSample> train, const net::StNetConfig& net_cfg,
                                const MetaConfig& cfg, std::uint64_t seed) {
  if (train.empty()) throw std::invalid_argument("adapt_to_target: empty training set");
  if (cfg.use_memory && !shared.contains(mem::kMemoryName)) {
    throw std::invalid_argument("adapt_to_target: memory enabled but no memory supplied");
  }
  std::mt19937_64 rng(seed);
  const std::size_t batch = std::min(cfg.target_batch_size, train.size());
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  ParamSet theta = theta0;
  for (std::size_t step = 0; step < cfg.target_steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < batch) {
      if (cursor == order.size()) {
        if (batch < train.size()) std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    const net::Batch b = net::make_batch(train, idx, net_cfg);
    ad::Graph g;
    const VarMap tv = bind(g, theta, true);
    const VarMap sv = bind(g, shared, false);
    const ad::Var loss = cfg.use_memory ? net::mse_loss(tv, b, net_cfg, var_at(sv, mem::kMemoryName))
                                        : net::mse_loss(tv, b, net_cfg);
    theta = sgd_step(theta, gradients_of(g, loss, tv), cfg.target_lr);
  }
  return theta;
}

}  // namespace metast::meta
