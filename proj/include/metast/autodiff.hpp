#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Graph is an append-only tape. Every op records its inputs and forward
// value; grad() walks the tape backwards from a scalar loss. Adjoints are
// themselves built from recorded ops, so with create_graph=true the returned
// gradients can be differentiated again (needed for second-order meta-updates).

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metast/error.hpp"
#include "metast/kernels.hpp"
#include "metast/tensor.hpp"

namespace metast::ad {

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  affine,
  matmul,
  conv2d,
  conv2d_input_grad,
  conv2d_kernel_grad,
  sigmoid,
  tanh,
  relu,
  exp,
  log,
  square,
  reciprocal,
  sum,
  fill,
  sum_axis,
  broadcast_axis,
  sum_leading,
  tile_leading,
  softmax,
  concat,
  slice,
  embed,
  reshape,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::affine: return "affine";
    case Op::matmul: return "matmul";
    case Op::conv2d: return "conv2d";
    case Op::conv2d_input_grad: return "conv2d_input_grad";
    case Op::conv2d_kernel_grad: return "conv2d_kernel_grad";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::square: return "square";
    case Op::reciprocal: return "reciprocal";
    case Op::sum: return "sum";
    case Op::fill: return "fill";
    case Op::sum_axis: return "sum_axis";
    case Op::broadcast_axis: return "broadcast_axis";
    case Op::sum_leading: return "sum_leading";
    case Op::tile_leading: return "tile_leading";
    case Op::softmax: return "softmax";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::embed: return "embed";
    case Op::reshape: return "reshape";
  }
  return "?";
}

/// Lower clamp applied inside log().
inline constexpr double kLogEpsilon = 1e-12;

struct Attrs {
  double scale = 1.0;
  double shift = 0.0;
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t extent = 0;
  bool trans_a = false;
  bool trans_b = false;
  Shape shape;
};

struct Node {
  Op op = Op::leaf;
  std::vector<std::size_t> inputs;
  Tensor value;
  Attrs attrs;
  bool requires_grad = false;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(Op::leaf, {}, std::move(value), {}, false); }
  Var parameter(Tensor value) { return push(Op::leaf, {}, std::move(value), {}, true); }

  const Tensor& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node_at(std::size_t id) const { return nodes_.at(id); }

  /// Records an op whose value has already been computed. Used by the op
  /// free functions below; rejects non-finite values.
  Var record(Op op, std::vector<std::size_t> inputs, Tensor value, Attrs attrs = {}) {
    bool rg = false;
    if (!no_grad_) {
      for (std::size_t in : inputs) rg = rg || nodes_.at(in).requires_grad;
    }
    for (double x : value.data()) {
      if (!std::isfinite(x)) {
        throw NumericalError(std::string("non-finite value produced by ") + op_name(op));
      }
    }
    return push(op, std::move(inputs), std::move(value), std::move(attrs), rg);
  }

  /// Gradients of a scalar `loss` with respect to each of `wrt`. Leaves that
  /// do not influence the loss get zeros. With create_graph the result is
  /// itself differentiable.
  inline std::vector<Var> grad(Var loss, std::span<const Var> wrt, bool create_graph);

  /// Value-only gradients; the adjoint nodes are discarded afterwards.
  std::vector<Tensor> gradients(Var loss, std::span<const Var> wrt) {
    const std::size_t mark = nodes_.size();
    auto vars = grad(loss, wrt, false);
    std::vector<Tensor> out;
    out.reserve(vars.size());
    for (Var v : vars) out.push_back(value(v));
    nodes_.resize(mark);
    return out;
  }

 private:
  const Node& node(Var v) const {
    if (v.graph_ != this) throw std::logic_error("Var belongs to a different graph");
    return nodes_.at(v.id_);
  }

  Var push(Op op, std::vector<std::size_t> inputs, Tensor value, Attrs attrs, bool rg) {
    nodes_.push_back(Node{op, std::move(inputs), std::move(value), std::move(attrs), rg});
    return Var(this, nodes_.size() - 1);
  }

  Var var(std::size_t id) { return Var(this, id); }

  inline std::vector<Var> vjp(std::size_t id, Var g);

  std::vector<Node> nodes_;
  bool no_grad_ = false;
};

inline const Tensor& Var::value() const { return graph_->value(*this); }

namespace detail {

inline Graph& same_graph(Var a, Var b) {
  if (&a.graph() != &b.graph()) throw std::logic_error("operands from different graphs");
  return a.graph();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

inline Var add(Var a, Var b) {
  return detail::same_graph(a, b).record(Op::add, {a.id(), b.id()}, kernel::add(a.value(), b.value()));
}
inline Var sub(Var a, Var b) {
  return detail::same_graph(a, b).record(Op::sub, {a.id(), b.id()}, kernel::sub(a.value(), b.value()));
}
/// Elementwise (Hadamard) product.
inline Var mul(Var a, Var b) {
  return detail::same_graph(a, b).record(Op::mul, {a.id(), b.id()},
                                         kernel::hadamard(a.value(), b.value()));
}
/// scale * x + shift, elementwise.
inline Var affine(Var x, double scale, double shift) {
  Attrs at;
  at.scale = scale;
  at.shift = shift;
  return x.graph().record(Op::affine, {x.id()}, kernel::affine(x.value(), scale, shift), at);
}
inline Var scale(Var x, double s) { return affine(x, s, 0.0); }

inline Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
  Attrs at;
  at.trans_a = trans_a;
  at.trans_b = trans_b;
  return detail::same_graph(a, b).record(Op::matmul, {a.id(), b.id()},
                                         kernel::matmul(a.value(), b.value(), trans_a, trans_b), at);
}

inline Var conv2d(Var input, Var weights) {
  return detail::same_graph(input, weights)
      .record(Op::conv2d, {input.id(), weights.id()}, kernel::conv2d(input.value(), weights.value()));
}
inline Var conv2d_input_grad(Var grad, Var weights) {
  return detail::same_graph(grad, weights)
      .record(Op::conv2d_input_grad, {grad.id(), weights.id()},
              kernel::conv2d_input_grad(grad.value(), weights.value()));
}
inline Var conv2d_kernel_grad(Var input, Var grad, std::size_t kh, std::size_t kw) {
  Attrs at;
  at.shape = {kh, kw};
  return detail::same_graph(input, grad)
      .record(Op::conv2d_kernel_grad, {input.id(), grad.id()},
              kernel::conv2d_kernel_grad(input.value(), grad.value(), kh, kw), at);
}

inline Var sigmoid(Var x) { return x.graph().record(Op::sigmoid, {x.id()}, kernel::sigmoid(x.value())); }
inline Var tanh(Var x) { return x.graph().record(Op::tanh, {x.id()}, kernel::tanh(x.value())); }
inline Var relu(Var x) { return x.graph().record(Op::relu, {x.id()}, kernel::relu(x.value())); }
inline Var exp(Var x) { return x.graph().record(Op::exp, {x.id()}, kernel::exp(x.value())); }
inline Var log(Var x) {
  return x.graph().record(Op::log, {x.id()}, kernel::log(x.value(), kLogEpsilon));
}
inline Var square(Var x) { return x.graph().record(Op::square, {x.id()}, kernel::square(x.value())); }
inline Var reciprocal(Var x) {
  return x.graph().record(Op::reciprocal, {x.id()}, kernel::reciprocal(x.value()));
}

inline Var sum(Var x) { return x.graph().record(Op::sum, {x.id()}, kernel::sum(x.value())); }
inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

inline Var fill(Var s, const Shape& shape) {
  Attrs at;
  at.shape = shape;
  return s.graph().record(Op::fill, {s.id()}, kernel::fill(s.value(), shape), at);
}
inline Var sum_axis(Var x, std::size_t axis) {
  Attrs at;
  at.axis = axis;
  return x.graph().record(Op::sum_axis, {x.id()}, kernel::sum_axis(x.value(), axis), at);
}
inline Var broadcast_axis(Var x, std::size_t axis, std::size_t extent) {
  Attrs at;
  at.axis = axis;
  at.extent = extent;
  return x.graph().record(Op::broadcast_axis, {x.id()},
                          kernel::broadcast_axis(x.value(), axis, extent), at);
}
inline Var tile_leading(Var x, const Shape& shape) {
  Attrs at;
  at.shape = shape;
  return x.graph().record(Op::tile_leading, {x.id()}, kernel::tile_leading(x.value(), shape), at);
}
inline Var sum_leading(Var x, const Shape& trailing) {
  Attrs at;
  at.shape = trailing;
  return x.graph().record(Op::sum_leading, {x.id()}, kernel::sum_leading(x.value(), trailing), at);
}
/// x + b with b broadcast over the leading axes of x.
inline Var add_bias(Var x, Var bias) { return add(x, tile_leading(bias, x.shape())); }

inline Var softmax(Var x, std::size_t axis) {
  Attrs at;
  at.axis = axis;
  return x.graph().record(Op::softmax, {x.id()}, kernel::softmax(x.value(), axis), at);
}

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Graph& g = parts[0].graph();
  std::vector<const Tensor*> values;
  std::vector<std::size_t> ids;
  for (Var p : parts) {
    if (&p.graph() != &g) throw std::logic_error("operands from different graphs");
    values.push_back(&p.value());
    ids.push_back(p.id());
  }
  Attrs at;
  at.axis = axis;
  return g.record(Op::concat, std::move(ids), kernel::concat(values, axis), at);
}
inline Var concat(Var a, Var b, std::size_t axis) {
  const Var parts[] = {a, b};
  return concat(std::span<const Var>(parts), axis);
}

inline Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t length) {
  Attrs at;
  at.axis = axis;
  at.begin = begin;
  at.extent = length;
  return x.graph().record(Op::slice, {x.id()}, kernel::slice(x.value(), axis, begin, length), at);
}
inline Var embed(Var x, std::size_t axis, std::size_t begin, std::size_t full) {
  Attrs at;
  at.axis = axis;
  at.begin = begin;
  at.extent = full;
  return x.graph().record(Op::embed, {x.id()}, kernel::embed(x.value(), axis, begin, full), at);
}
inline Var reshape(Var x, const Shape& shape) {
  Attrs at;
  at.shape = shape;
  return x.graph().record(Op::reshape, {x.id()}, x.value().reshaped(shape), at);
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var x) { return scale(x, s); }

// ---------------------------------------------------------------------------
// Backward

inline std::vector<Var> Graph::vjp(std::size_t id, Var g) {
  // Copy what we need: recording new nodes may reallocate nodes_.
  const Op op = nodes_[id].op;
  const std::vector<std::size_t> in = nodes_[id].inputs;
  const Attrs at = nodes_[id].attrs;
  const Var out = var(id);
  auto input = [&](std::size_t k) { return var(in[k]); };

  switch (op) {
    case Op::leaf:
      return {};
    case Op::add:
      return {g, g};
    case Op::sub:
      return {g, scale(g, -1.0)};
    case Op::mul:
      return {mul(g, input(1)), mul(g, input(0))};
    case Op::affine:
      return {scale(g, at.scale)};
    case Op::matmul: {
      const Var a = input(0), b = input(1);
      const Var ga = at.trans_a ? matmul(b, g, at.trans_b, true) : matmul(g, b, false, !at.trans_b);
      const Var gb = at.trans_b ? matmul(g, a, true, at.trans_a) : matmul(a, g, !at.trans_a, false);
      return {ga, gb};
    }
    case Op::conv2d: {
      const Var x = input(0), k = input(1);
      return {conv2d_input_grad(g, k), conv2d_kernel_grad(x, g, k.value().dim(0), k.value().dim(1))};
    }
    case Op::conv2d_input_grad: {
      // inputs (grad_out, kernel); g has the shape of the conv input.
      const Var go = input(0), k = input(1);
      return {conv2d(g, k), conv2d_kernel_grad(g, go, k.value().dim(0), k.value().dim(1))};
    }
    case Op::conv2d_kernel_grad: {
      // inputs (x, grad_out); g has kernel shape.
      const Var x = input(0), go = input(1);
      return {conv2d_input_grad(go, g), conv2d(x, g)};
    }
    case Op::sigmoid:
      return {mul(g, mul(out, affine(out, -1.0, 1.0)))};
    case Op::tanh:
      return {mul(g, affine(square(out), -1.0, 1.0))};
    case Op::relu:
      return {mul(g, constant(kernel::relu_mask(input(0).value())))};
    case Op::exp:
      return {mul(g, out)};
    case Op::log: {
      const Var x = input(0);
      const Tensor& xv = x.value();
      bool clamped = false;
      for (double v : xv.data()) clamped = clamped || v <= kLogEpsilon;
      if (!clamped) return {mul(g, reciprocal(x))};
      Tensor mask(xv.shape());
      Tensor fillv(xv.shape());
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const bool live = xv[i] > kLogEpsilon;
        mask[i] = live ? 1.0 : 0.0;
        fillv[i] = live ? 0.0 : kLogEpsilon;
      }
      const Var m = constant(std::move(mask));
      const Var safe = add(mul(x, m), constant(std::move(fillv)));
      return {mul(mul(g, m), reciprocal(safe))};
    }
    case Op::square:
      return {mul(g, scale(input(0), 2.0))};
    case Op::reciprocal:
      return {mul(g, scale(square(out), -1.0))};
    case Op::sum:
      return {fill(g, input(0).shape())};
    case Op::fill:
      return {reshape(sum(g), input(0).shape())};
    case Op::sum_axis:
      return {broadcast_axis(g, at.axis, input(0).shape()[at.axis])};
    case Op::broadcast_axis:
      return {sum_axis(g, at.axis)};
    case Op::tile_leading:
      return {sum_leading(g, input(0).shape())};
    case Op::sum_leading:
      return {tile_leading(g, input(0).shape())};
    case Op::softmax: {
      const std::size_t n = out.shape()[at.axis];
      const Var dot = broadcast_axis(sum_axis(mul(g, out), at.axis), at.axis, n);
      return {mul(out, sub(g, dot))};
    }
    case Op::concat: {
      std::vector<Var> grads;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < in.size(); ++k) {
        const std::size_t len = input(k).shape()[at.axis];
        grads.push_back(slice(g, at.axis, offset, len));
        offset += len;
      }
      return grads;
    }
    case Op::slice:
      return {embed(g, at.axis, at.begin, input(0).shape()[at.axis])};
    case Op::embed:
      return {slice(g, at.axis, at.begin, input(0).shape()[at.axis])};
    case Op::reshape:
      return {reshape(g, input(0).shape())};
  }
  throw std::logic_error("vjp: unknown op");
}

inline std::vector<Var> Graph::grad(Var loss, std::span<const Var> wrt, bool create_graph) {
  if (!loss.valid() || loss.graph_ != this || loss.id_ >= nodes_.size()) {
    throw std::logic_error("backward called before any forward pass on this graph");
  }
  if (nodes_[loss.id_].value.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " +
                     shape_str(nodes_[loss.id_].value.shape()));
  }
  struct ModeGuard {
    bool& flag;
    bool saved;
    ~ModeGuard() { flag = saved; }
  } guard{no_grad_, no_grad_};
  no_grad_ = !create_graph;

  std::vector<std::optional<Var>> adjoint(loss.id_ + 1);
  adjoint[loss.id_] = constant(Tensor(nodes_[loss.id_].value.shape(), 1.0));

  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    if (!adjoint[id] || !nodes_[id].requires_grad || nodes_[id].op == Op::leaf) continue;
    const std::vector<Var> grads = vjp(id, *adjoint[id]);
    const std::vector<std::size_t> inputs = nodes_[id].inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const std::size_t src = inputs[k];
      if (!nodes_[src].requires_grad) continue;
      adjoint[src] = adjoint[src] ? add(*adjoint[src], grads[k]) : grads[k];
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (Var w : wrt) {
    if (w.graph_ != this) throw std::logic_error("Var belongs to a different graph");
    if (w.id_ <= loss.id_ && adjoint[w.id_]) {
      result.push_back(*adjoint[w.id_]);
    } else {
      result.push_back(constant(Tensor(nodes_.at(w.id_).value.shape())));
    }
  }
  return result;
}

}  // namespace metast::ad
