#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "metast/autodiff.hpp"
#include "metast/error.hpp"
#include "metast/tensor.hpp"

namespace metast {

/// Named collection of tensors, ordered by name. Used both for trainable
/// parameters and for gradient maps keyed identically to them.
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }

  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : tensors_) out.push_back(k);
    return out;
  }

  /// Total scalar count.
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  bool same_layout(const ParamSet& o) const {
    if (tensors_.size() != o.tensors_.size()) return false;
    auto a = tensors_.begin();
    auto b = o.tensors_.begin();
    for (; a != tensors_.end(); ++a, ++b) {
      if (a->first != b->first || a->second.shape() != b->second.shape()) return false;
    }
    return true;
  }

  /// this += alpha * x. Keys and shapes must match.
  void axpy(double alpha, const ParamSet& x) {
    require_layout(x, "axpy");
    auto b = x.tensors_.begin();
    for (auto& [_, t] : tensors_) {
      auto dst = t.data();
      auto src = b->second.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
      ++b;
    }
  }

  /// Copy of this set with all values zeroed.
  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& [k, t] : tensors_) out.set(k, Tensor(t.shape()));
    return out;
  }

  /// Union of two disjoint sets.
  static ParamSet merge(const ParamSet& a, const ParamSet& b) {
    ParamSet out = a;
    for (const auto& [k, t] : b) {
      if (out.contains(k)) throw std::invalid_argument("duplicate parameter '" + k + "'");
      out.set(k, t);
    }
    return out;
  }

  /// Subset selected by name prefix.
  ParamSet with_prefix(const std::string& prefix, bool keep = true) const {
    ParamSet out;
    for (const auto& [k, t] : tensors_) {
      if ((k.rfind(prefix, 0) == 0) == keep) out.set(k, t);
    }
    return out;
  }

  void require_layout(const ParamSet& o, const char* what) const {
    if (!same_layout(o)) {
      throw std::invalid_argument(std::string(what) + ": parameter keys or shapes differ");
    }
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.tensors_ == b.tensors_; }

 private:
  Map tensors_;
};

/// Returns params - lr * grads as a new set; `params` is left untouched.
inline ParamSet sgd_step(const ParamSet& params, const ParamSet& grads, double lr) {
  params.require_layout(grads, "sgd_step");
  ParamSet out = params;
  if (lr != 0.0) out.axpy(-lr, grads);
  return out;
}

/// Adam moments for one ParamSet layout.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(Options opt) : opt_(opt) {}

  ParamSet step(const ParamSet& params, const ParamSet& grads) {
    params.require_layout(grads, "adam");
    if (m_.empty()) {
      m_ = params.zeros_like();
      v_ = params.zeros_like();
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    ParamSet out = params;
    auto g = grads.begin();
    auto m = m_.begin();
    auto v = v_.begin();
    for (auto& [_, p] : out) {
      auto pd = p.data();
      auto gd = g->second.data();
      auto md = m->second.data();
      auto vd = v->second.data();
      for (std::size_t i = 0; i < pd.size(); ++i) {
        md[i] = opt_.beta1 * md[i] + (1.0 - opt_.beta1) * gd[i];
        vd[i] = opt_.beta2 * vd[i] + (1.0 - opt_.beta2) * gd[i] * gd[i];
        pd[i] -= opt_.lr * (md[i] / c1) / (std::sqrt(vd[i] / c2) + opt_.eps);
      }
      ++g;
      ++m;
      ++v;
    }
    return out;
  }

  const Options& options() const { return opt_; }

 private:
  Options opt_;
  ParamSet m_, v_;
  std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Graph binding

using VarMap = std::map<std::string, ad::Var>;

/// Places every tensor on the graph, as trainable leaves or constants.
inline VarMap bind(ad::Graph& g, const ParamSet& params, bool trainable) {
  VarMap out;
  for (const auto& [k, t] : params) out.emplace(k, trainable ? g.parameter(t) : g.constant(t));
  return out;
}

inline const ad::Var& var_at(const VarMap& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw std::out_of_range("no bound parameter named '" + name + "'");
  return it->second;
}

inline ParamSet values_of(const VarMap& vars) {
  ParamSet out;
  for (const auto& [k, v] : vars) out.set(k, v.value());
  return out;
}

/// Value gradients of `loss` for every entry of `vars`, as a ParamSet.
inline ParamSet gradients_of(ad::Graph& g, ad::Var loss, const VarMap& vars) {
  std::vector<ad::Var> wrt;
  for (const auto& [_, v] : vars) wrt.push_back(v);
  auto grads = g.gradients(loss, wrt);
  ParamSet out;
  std::size_t i = 0;
  for (const auto& [k, _] : vars) out.set(k, std::move(grads[i++]));
  return out;
}

// ---------------------------------------------------------------------------
// Initialization

inline Tensor uniform_tensor(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& x : t.data()) x = dist(rng);
  return t;
}

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline Tensor uniform_fan_in(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  return uniform_tensor(std::move(shape), -bound, bound, rng);
}

// ---------------------------------------------------------------------------
// Checkpoint container: "MSTT", u32 version, u32 count, then per tensor
// u32 name length, name bytes, u32 rank, u64 dims[rank], f64 payload.
// All integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw DataError("checkpoint truncated");
  }
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
  return static_cast<T>(u);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const ParamSet& params) {
  os.write("MSTT", 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::write_le<std::uint64_t>(os, d);
    for (double x : t.data()) detail::write_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(x));
  }
}

inline ParamSet read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "MSTT") {
    throw DataError("not a checkpoint: bad magic bytes");
  }
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = detail::read_le<std::uint32_t>(is);
  ParamSet out;
  for (std::uint32_t n = 0; n < count; ++n) {
    const auto len = detail::read_le<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw DataError("checkpoint truncated in tensor name");
    const auto rank = detail::read_le<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
    Tensor t(shape);
    for (double& x : t.data()) x = std::bit_cast<double>(detail::read_le<std::uint64_t>(is));
    out.set(name, std::move(t));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  write_checkpoint(os, params);
}

inline ParamSet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(is);
}

}  // namespace metast
