#pragma once

// Dense tensors, a reverse-mode tape, tanh MLPs and Adam.
//
// Tensors are row-major 64-bit arrays. Every tape primitive treats its operands
// as matrices [rows x cols] where cols is the last dimension, which is all the
// graph network and the baselines need (rows = samples in a batch).

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gridgnn/error.hpp"

namespace gridgnn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class Tensor {
 public:
  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_product(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (shape_product(shape_) != values_.size()) {
      throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                           std::to_string(values_.size()) + " values");
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor(Shape{rows, cols}, fill);
  }
  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{1, n}, std::move(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }

  /// Leading dimensions flattened; a rank-0 or rank-1 tensor has one row.
  std::size_t rows() const noexcept {
    if (shape_.size() <= 1) return shape_.empty() ? 1 : (shape_[0] == 0 ? 0 : 1);
    return values_.size() / std::max<std::size_t>(shape_.back(), 1);
  }
  std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  double item() const {
    if (values_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
    return values_[0];
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> values_;
};

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using MatrixMap = Eigen::Map<RowMatrix>;

inline ConstMatrixMap as_matrix(const Tensor& t) {
  return ConstMatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatrixMap as_matrix(Tensor& t) {
  return MatrixMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ParameterSet

/// Named trainable tensors with a gradient accumulator per entry.
class ParameterSet {
 public:
  std::size_t add(std::string id, Tensor value) {
    if (index_.contains(id)) throw ContractError("duplicate parameter id '" + id + "'");
    const std::size_t i = entries_.size();
    index_.emplace(id, i);
    Tensor grad(value.shape(), 0.0);
    entries_.push_back(Entry{std::move(id), std::move(value), std::move(grad)});
    return i;
  }

  bool contains(const std::string& id) const { return index_.contains(id); }

  std::size_t index(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ContractError("unknown parameter id '" + id + "'");
    return it->second;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const std::string& id(std::size_t i) const { return entries_.at(i).id; }
  const Tensor& value(std::size_t i) const { return entries_.at(i).value; }
  Tensor& value(std::size_t i) { return entries_.at(i).value; }
  const Tensor& grad(std::size_t i) const { return entries_.at(i).grad; }
  Tensor& grad(std::size_t i) { return entries_.at(i).grad; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(0.0);
  }

  /// {param_id: {shape: [...], values: [...]}}; doubles round-trip exactly.
  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& e : entries_) {
      j[e.id] = {{"shape", e.value.shape()},
                 {"values", std::vector<double>(e.value.values().begin(), e.value.values().end())}};
    }
    return j;
  }

  static ParameterSet from_json(const nlohmann::json& j) {
    ParameterSet p;
    for (const auto& [id, entry] : j.items()) {
      p.add(id, Tensor(entry.at("shape").get<Shape>(), entry.at("values").get<std::vector<double>>()));
    }
    return p;
  }

  /// Overwrite values of an existing layout; ids and shapes must match exactly.
  void load_values(const nlohmann::json& j) {
    if (j.size() != entries_.size()) {
      throw ValidationError("parameter count mismatch: checkpoint has " + std::to_string(j.size()) +
                            ", model expects " + std::to_string(entries_.size()));
    }
    for (auto& e : entries_) {
      if (!j.contains(e.id)) throw ValidationError("checkpoint lacks parameter '" + e.id + "'");
      Tensor t(j.at(e.id).at("shape").get<Shape>(), j.at(e.id).at("values").get<std::vector<double>>());
      if (t.shape() != e.value.shape()) {
        throw ValidationError("parameter '" + e.id + "' has shape " + shape_string(t.shape()) +
                              ", expected " + shape_string(e.value.shape()));
      }
      e.value = std::move(t);
    }
  }

  void copy_values_from(const ParameterSet& other) {
    if (other.size() != size()) throw ContractError("parameter layouts differ");
    for (std::size_t i = 0; i < entries_.size(); ++i) entries_[i].value = other.entries_[i].value;
  }

 private:
  struct Entry {
    std::string id;
    Tensor value;
    Tensor grad;
  };
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Tape

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

/// Records primitive operations in execution order and differentiates them in reverse.
class Tape {
 public:
  enum class Op { Constant, Parameter, MatMul, Add, Sub, Mul, Scale, Tanh, Exp, Clamp, Concat, Slice, ReduceSum, ReduceMean };

  Var constant(Tensor t) {
    Node n;
    n.op = Op::Constant;
    n.value = std::move(t);
    return push(std::move(n), false);
  }

  /// Leaf referring to params.value(index); the ParameterSet must outlive the tape.
  Var parameter(const ParameterSet& params, std::size_t index) {
    Node n;
    n.op = Op::Parameter;
    n.external = &params.value(index);
    n.param = index;
    return push(std::move(n), false);
  }

  Var matmul(Var a, Var b) {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    if (x.cols() != y.rows()) {
      throw DimensionError("matmul " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
    }
    return op2(Op::MatMul, a, b);
  }

  /// Elementwise sum; b may also be a single row broadcast over the rows of a.
  Var add(Var a, Var b) {
    check_broadcast(a, b, "add");
    return op2(Op::Add, a, b);
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    return op2(Op::Sub, a, b);
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    return op2(Op::Mul, a, b);
  }

  Var scale(Var a, double c) {
    Node n = unary(Op::Scale, a);
    n.a = c;
    return push(std::move(n));
  }

  Var tanh(Var a) { return push(unary(Op::Tanh, a)); }
  Var exp(Var a) { return push(unary(Op::Exp, a)); }

  Var clamp(Var a, double lo, double hi) {
    Node n = unary(Op::Clamp, a);
    n.a = lo;
    n.b = hi;
    return push(std::move(n));
  }

  /// Concatenate along the last dimension.
  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    const std::size_t r = value(parts[0]).rows();
    Node n;
    n.op = Op::Concat;
    for (Var p : parts) {
      if (value(p).rows() != r) throw DimensionError("concat row mismatch");
      n.inputs.push_back(p.id);
    }
    return push(std::move(n));
  }
  Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

  /// Columns [begin, end) of a.
  Var slice(Var a, std::size_t begin, std::size_t end) {
    if (begin > end || end > value(a).cols()) {
      throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                           shape_string(value(a).shape()));
    }
    Node n = unary(Op::Slice, a);
    n.begin = begin;
    n.end = end;
    return push(std::move(n));
  }

  Var reduce_sum(Var a) { return push(unary(Op::ReduceSum, a)); }
  Var reduce_mean(Var a) { return push(unary(Op::ReduceMean, a)); }

  const Tensor& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id).op; }

  /// Recompute every non-leaf value in recorded order.
  void replay() {
    for (auto& n : nodes_) {
      if (n.op != Op::Constant && n.op != Op::Parameter) compute(n);
    }
  }

  /// d loss / d node for every recorded node (zeros where loss does not depend on it).
  std::vector<Tensor> adjoints(Var loss) const {
    std::vector<Tensor> adj(nodes_.size());
    propagate(loss, adj, nullptr);
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (adj[i].size() == 0 && value(Var{i}).size() != 0) adj[i] = Tensor(value(Var{i}).shape(), 0.0);
    }
    return adj;
  }

  /// Accumulate d loss / d parameter into params' gradient buffers.
  void backward(Var loss, ParameterSet& params) const {
    std::vector<Tensor> adj(nodes_.size());
    propagate(loss, adj, [&](std::size_t param, const Tensor& g) {
      Tensor& dst = params.grad(param);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
  }

 private:
  struct Node {
    Op op = Op::Constant;
    std::vector<std::size_t> inputs;
    Tensor value;
    const Tensor* external = nullptr;
    std::size_t param = std::numeric_limits<std::size_t>::max();
    double a = 0.0;
    double b = 0.0;
    std::size_t begin = 0;
    std::size_t end = 0;
  };

  Node unary(Op op, Var a) const {
    Node n;
    n.op = op;
    n.inputs = {a.id};
    return n;
  }

  Var op2(Op op, Var a, Var b) {
    Node n;
    n.op = op;
    n.inputs = {a.id, b.id};
    return push(std::move(n));
  }

  Var push(Node n, bool evaluate = true) {
    for (std::size_t in : n.inputs) {
      if (in >= nodes_.size()) throw ContractError("operand not recorded on this tape");
    }
    if (evaluate) compute(n);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  void check_same(Var a, Var b, const char* what) const {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    if (x.size() != y.size() || x.cols() != y.cols()) {
      throw DimensionError(std::string(what) + " " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
    }
  }

  void check_broadcast(Var a, Var b, const char* what) const {
    const Tensor& x = value(a);
    const Tensor& y = value(b);
    const bool same = x.size() == y.size() && x.cols() == y.cols();
    const bool row = y.rows() == 1 && y.cols() == x.cols();
    if (!same && !row) {
      throw DimensionError(std::string(what) + " " + shape_string(x.shape()) + " vs " + shape_string(y.shape()));
    }
  }

  const Tensor& in(const Node& n, std::size_t k) const { return value(Var{n.inputs[k]}); }

  void compute(Node& n) const {
    switch (n.op) {
      case Op::Constant:
      case Op::Parameter:
        return;
      case Op::MatMul: {
        const Tensor& x = in(n, 0);
        const Tensor& y = in(n, 1);
        n.value = Tensor::matrix(x.rows(), y.cols());
        detail::as_matrix(n.value).noalias() = detail::as_matrix(x) * detail::as_matrix(y);
        return;
      }
      case Op::Add: {
        const Tensor& x = in(n, 0);
        const Tensor& y = in(n, 1);
        n.value = x;
        if (y.size() == x.size()) {
          for (std::size_t i = 0; i < x.size(); ++i) n.value[i] += y[i];
        } else {
          const std::size_t c = x.cols();
          for (std::size_t i = 0; i < x.size(); ++i) n.value[i] += y[i % c];
        }
        return;
      }
      case Op::Sub:
      case Op::Mul: {
        const Tensor& x = in(n, 0);
        const Tensor& y = in(n, 1);
        n.value = x;
        if (n.op == Op::Sub) {
          for (std::size_t i = 0; i < x.size(); ++i) n.value[i] -= y[i];
        } else {
          for (std::size_t i = 0; i < x.size(); ++i) n.value[i] *= y[i];
        }
        return;
      }
      case Op::Scale:
        n.value = in(n, 0);
        for (double& v : n.value.values()) v *= n.a;
        return;
      case Op::Tanh:
        n.value = in(n, 0);
        for (double& v : n.value.values()) v = std::tanh(v);
        return;
      case Op::Exp:
        n.value = in(n, 0);
        for (double& v : n.value.values()) v = std::exp(v);
        return;
      case Op::Clamp:
        n.value = in(n, 0);
        for (double& v : n.value.values()) v = std::clamp(v, n.a, n.b);
        return;
      case Op::Concat: {
        const std::size_t r = in(n, 0).rows();
        std::size_t total = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) total += in(n, k).cols();
        n.value = Tensor::matrix(r, total);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& part = in(n, k);
          const std::size_t c = part.cols();
          for (std::size_t i = 0; i < r; ++i) {
            std::copy_n(part.data() + i * c, c, n.value.data() + i * total + offset);
          }
          offset += c;
        }
        return;
      }
      case Op::Slice: {
        const Tensor& x = in(n, 0);
        const std::size_t r = x.rows();
        const std::size_t c = x.cols();
        const std::size_t w = n.end - n.begin;
        n.value = Tensor::matrix(r, w);
        for (std::size_t i = 0; i < r; ++i) std::copy_n(x.data() + i * c + n.begin, w, n.value.data() + i * w);
        return;
      }
      case Op::ReduceSum:
      case Op::ReduceMean: {
        const Tensor& x = in(n, 0);
        double s = 0.0;
        for (double v : x.values()) s += v;
        if (n.op == Op::ReduceMean) s = x.size() ? s / static_cast<double>(x.size()) : 0.0;
        n.value = Tensor::scalar(s);
        return;
      }
    }
  }

  template <class Sink>
  void propagate(Var loss, std::vector<Tensor>& adj, Sink&& sink) const {
    if (loss.id >= nodes_.size()) throw ContractError("loss not recorded on this tape");
    if (value(loss).size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_string(value(loss).shape()));
    }
    auto acc = [&](std::size_t id) -> Tensor& {
      if (adj[id].size() == 0 && value(Var{id}).size() != 0) adj[id] = Tensor(value(Var{id}).shape(), 0.0);
      return adj[id];
    };
    acc(loss.id)[0] = 1.0;

    constexpr bool keep = std::is_same_v<std::decay_t<Sink>, std::nullptr_t>;

    for (std::size_t idx = loss.id + 1; idx-- > 0;) {
      if (adj[idx].size() == 0) continue;
      const Node& n = nodes_[idx];
      const Tensor& g = adj[idx];
      switch (n.op) {
        case Op::Constant:
          break;
        case Op::Parameter:
          if constexpr (!keep) sink(n.param, g);
          break;
        case Op::MatMul: {
          const Tensor& x = in(n, 0);
          const Tensor& y = in(n, 1);
          Tensor& gx = acc(n.inputs[0]);
          detail::as_matrix(gx).noalias() += detail::as_matrix(g) * detail::as_matrix(y).transpose();
          Tensor& gy = acc(n.inputs[1]);
          detail::as_matrix(gy).noalias() += detail::as_matrix(x).transpose() * detail::as_matrix(g);
          break;
        }
        case Op::Add: {
          Tensor& gx = acc(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
          Tensor& gy = acc(n.inputs[1]);
          if (gy.size() == g.size()) {
            for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i];
          } else {
            const std::size_t c = g.cols();
            for (std::size_t i = 0; i < g.size(); ++i) gy[i % c] += g[i];
          }
          break;
        }
        case Op::Sub: {
          Tensor& gx = acc(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
          Tensor& gy = acc(n.inputs[1]);
          for (std::size_t i = 0; i < g.size(); ++i) gy[i] -= g[i];
          break;
        }
        case Op::Mul: {
          const Tensor& x = in(n, 0);
          const Tensor& y = in(n, 1);
          Tensor& gx = acc(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
          Tensor& gy = acc(n.inputs[1]);
          for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * x[i];
          break;
        }
        case Op::Scale: {
          Tensor& gx = acc(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * n.a;
          break;
        }
        case Op::Tanh: {
          Tensor& gx = acc(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
          break;
        }
        case Op::Exp: {
          Tensor& gx = acc(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * n.value[i];
          break;
        }
        case Op::Clamp: {
          const Tensor& x = in(n, 0);
          Tensor& gx = acc(n.inputs[0]);
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (x[i] >= n.a && x[i] <= n.b) gx[i] += g[i];
          }
          break;
        }
        case Op::Concat: {
          const std::size_t r = g.rows();
          const std::size_t total = g.cols();
          std::size_t offset = 0;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            Tensor& gp = acc(n.inputs[k]);
            const std::size_t c = gp.cols();
            for (std::size_t i = 0; i < r; ++i) {
              for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + offset + j];
            }
            offset += c;
          }
          break;
        }
        case Op::Slice: {
          Tensor& gx = acc(n.inputs[0]);
          const std::size_t r = g.rows();
          const std::size_t c = gx.cols();
          const std::size_t w = n.end - n.begin;
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < w; ++j) gx[i * c + n.begin + j] += g[i * w + j];
          }
          break;
        }
        case Op::ReduceSum:
        case Op::ReduceMean: {
          Tensor& gx = acc(n.inputs[0]);
          double s = g[0];
          if (n.op == Op::ReduceMean && gx.size()) s /= static_cast<double>(gx.size());
          for (double& v : gx.values()) v += s;
          break;
        }
      }
      if constexpr (!keep) adj[idx] = Tensor();
    }
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Initialization and MLPs

/// Uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)); shape [fan_in, fan_out].
inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Tensor w = Tensor::matrix(fan_in, fan_out);
  for (double& v : w.values()) v = dist(rng);
  return w;
}

/// Handle to the weights of a fully connected tanh network stored in a ParameterSet.
/// Parameters are named "<name>/W<l>" ([in, out]) and "<name>/b<l>" ([1, out]).
struct Mlp {
  std::string name;
  std::vector<std::size_t> widths;
  std::vector<std::size_t> weights;
  std::vector<std::size_t> biases;

  std::size_t layer_count() const noexcept { return weights.size(); }
  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }
};

inline Mlp add_mlp(ParameterSet& params, const std::string& name, std::vector<std::size_t> widths,
                   std::mt19937_64& rng) {
  if (widths.size() < 2) throw ContractError("mlp '" + name + "' needs at least one layer");
  Mlp mlp{name, std::move(widths), {}, {}};
  for (std::size_t l = 0; l + 1 < mlp.widths.size(); ++l) {
    mlp.weights.push_back(params.add(name + "/W" + std::to_string(l), glorot_uniform(mlp.widths[l], mlp.widths[l + 1], rng)));
    mlp.biases.push_back(params.add(name + "/b" + std::to_string(l), Tensor::matrix(1, mlp.widths[l + 1])));
  }
  return mlp;
}

/// Look up an existing MLP by name and layer widths.
inline Mlp bind_mlp(const ParameterSet& params, const std::string& name, std::vector<std::size_t> widths) {
  Mlp mlp{name, std::move(widths), {}, {}};
  for (std::size_t l = 0; l + 1 < mlp.widths.size(); ++l) {
    const std::size_t w = params.index(name + "/W" + std::to_string(l));
    const std::size_t b = params.index(name + "/b" + std::to_string(l));
    if (params.value(w).shape() != Shape{mlp.widths[l], mlp.widths[l + 1]} ||
        params.value(b).shape() != Shape{1, mlp.widths[l + 1]}) {
      throw DimensionError("mlp '" + name + "' layer " + std::to_string(l) + " has unexpected parameter shape");
    }
    mlp.weights.push_back(w);
    mlp.biases.push_back(b);
  }
  return mlp;
}

/// tanh on hidden layers, linear output.
inline Var mlp_forward(Tape& tape, const ParameterSet& params, const Mlp& mlp, Var input) {
  if (tape.value(input).cols() != mlp.input_width()) {
    throw DimensionError("mlp '" + mlp.name + "' layer 0 expects width " + std::to_string(mlp.input_width()) +
                         ", got " + std::to_string(tape.value(input).cols()));
  }
  Var h = input;
  for (std::size_t l = 0; l < mlp.layer_count(); ++l) {
    h = tape.add(tape.matmul(h, tape.parameter(params, mlp.weights[l])), tape.parameter(params, mlp.biases[l]));
    if (l + 1 < mlp.layer_count()) h = tape.tanh(h);
  }
  return h;
}

/// Evaluate an MLP stored under `name` with the given layer widths on a fresh tape.
inline Tensor mlp_forward(const ParameterSet& params, const std::string& name,
                          const std::vector<std::size_t>& layer_spec, const Tensor& input) {
  const Mlp mlp = bind_mlp(params, name, layer_spec);
  Tape tape;
  return tape.value(mlp_forward(tape, params, mlp, tape.constant(input)));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::int64_t step = 0;
};

/// Bias-corrected Adam update; zeroes the gradients afterwards.
inline void adam_step(ParameterSet& params, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw ContractError("learning rate must be positive");
  if (state.first_moment.size() != params.size()) {
    state.first_moment.clear();
    state.second_moment.clear();
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment.emplace_back(params.value(i).shape(), 0.0);
      state.second_moment.emplace_back(params.value(i).shape(), 0.0);
    }
    state.step = 0;
  }
  ++state.step;
  const auto& o = state.options;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& w = params.value(p);
    Tensor& g = params.grad(p);
    Tensor& m = state.first_moment[p];
    Tensor& v = state.second_moment[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.epsilon);
    }
    g.fill(0.0);
  }
}

}  // namespace gridgnn
