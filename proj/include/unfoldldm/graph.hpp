#pragma once

// Tape-based reverse-mode differentiation. A Graph is built per forward pass and
// discarded after one backward pass; parameters live in a ParamRegistry and are
// bound to the graph as cached leaves, so a parameter used by several stages is
// a single node whose gradient accumulates over all uses.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "params.hpp"
#include "tensor.hpp"

namespace uldm {

enum class OpKind : int {
  Leaf,
  MatMul,
  BatchedMatMul,
  Conv2d,
  DepthwiseConv2d,
  ConvTranspose2d,
  Transpose,
  Reshape,
  Concat,
  Slice,
  Expand,
  Add,
  Sub,
  Mul,
  Div,
  ScalarMul,
  ScalarTensorMul,
  AddScalar,
  Softmax,
  Gelu,
  Softplus,
  LayerNorm,
  MeanPool,
  Sum,
  L1Sum,
  L2Norm,
};

inline constexpr OpKind kAllOpKinds[] = {
    OpKind::MatMul,   OpKind::BatchedMatMul, OpKind::Conv2d,    OpKind::DepthwiseConv2d, OpKind::ConvTranspose2d,
    OpKind::Transpose, OpKind::Reshape,      OpKind::Concat,    OpKind::Slice,           OpKind::Expand,
    OpKind::Add,      OpKind::Sub,           OpKind::Mul,       OpKind::Div,             OpKind::ScalarMul,
    OpKind::ScalarTensorMul, OpKind::AddScalar, OpKind::Softmax, OpKind::Gelu,           OpKind::Softplus,
    OpKind::LayerNorm, OpKind::MeanPool,     OpKind::Sum,       OpKind::L1Sum,           OpKind::L2Norm,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::BatchedMatMul: return "batched_matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::DepthwiseConv2d: return "depthwise_conv2d";
    case OpKind::ConvTranspose2d: return "conv_transpose2d";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Expand: return "expand";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::ScalarMul: return "scalar_mul";
    case OpKind::ScalarTensorMul: return "scalar_tensor_mul";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Softmax: return "softmax";
    case OpKind::Gelu: return "gelu";
    case OpKind::Softplus: return "softplus";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::MeanPool: return "mean_pool";
    case OpKind::Sum: return "sum";
    case OpKind::L1Sum: return "l1_sum";
    case OpKind::L2Norm: return "l2_norm";
  }
  return "unknown";
}

inline OpKind parse_op_kind(std::string_view name) {
  for (OpKind k : kAllOpKinds)
    if (op_name(k) == name) return k;
  throw FormatError("unknown op kind: " + std::string(name));
}

/// Fault injection for mutation testing: backward rules of the listed op kinds
/// run with a negated upstream gradient.
class BackwardFaults {
 public:
  static void flip(OpKind k) {
    std::lock_guard lock(mu());
    set().insert(k);
  }
  static void clear() {
    std::lock_guard lock(mu());
    set().clear();
  }
  static bool flipped(OpKind k) {
    std::lock_guard lock(mu());
    return set().count(k) != 0;
  }

 private:
  static std::set<OpKind>& set() {
    static std::set<OpKind> s;
    return s;
  }
  static std::mutex& mu() {
    static std::mutex m;
    return m;
  }
};

struct ScopedBackwardFlip {
  explicit ScopedBackwardFlip(OpKind k) { BackwardFaults::flip(k); }
  ~ScopedBackwardFlip() { BackwardFaults::clear(); }
  ScopedBackwardFlip(const ScopedBackwardFlip&) = delete;
  ScopedBackwardFlip& operator=(const ScopedBackwardFlip&) = delete;
};

template <class T>
class Graph;

/// Handle to a value recorded in a Graph.
template <class T>
class DiffTensor {
 public:
  DiffTensor() = default;
  DiffTensor(Graph<T>* g, std::uint32_t id) : g_(g), id_(id) {}

  Graph<T>& graph() const { return *g_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return g_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  Graph<T>* g_ = nullptr;
  std::uint32_t id_ = 0;
};

template <class T>
using GradMap = std::map<std::string, Tensor<T>>;

template <class T>
class Graph {
 public:
  struct Node;
  using BackwardFn = std::function<void(Graph&, const Node&)>;

  struct Node {
    OpKind kind = OpKind::Leaf;
    Tensor<T> value;
    std::vector<T> grad;
    std::vector<std::uint32_t> inputs;
    bool requires_grad = false;
    std::string param_path;
    BackwardFn backward;
  };

  Graph() = default;
  explicit Graph(ParamRegistry<T>& registry) : registry_(&registry) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  DiffTensor<T> constant(Tensor<T> value) { return push(OpKind::Leaf, std::move(value), {}, false, {}); }

  /// Leaf that receives a gradient (used for inputs under test).
  DiffTensor<T> variable(Tensor<T> value) { return push(OpKind::Leaf, std::move(value), {}, true, {}); }

  /// Binds a registry parameter. Repeated calls for the same path return the same node.
  DiffTensor<T> param(const std::string& path) {
    if (!registry_) throw FormatError("graph has no parameter registry");
    if (auto it = param_nodes_.find(path); it != param_nodes_.end()) return {this, it->second};
    const bool trainable = !registry_->is_frozen(path);
    auto h = push(OpKind::Leaf, registry_->get(path), {}, trainable, {});
    nodes_[h.id()].param_path = path;
    param_nodes_.emplace(path, h.id());
    return h;
  }

  /// Records an op output. The backward rule reads `self.grad` and accumulates
  /// into inputs through `accumulate`.
  DiffTensor<T> record(OpKind kind, Tensor<T> value, std::initializer_list<DiffTensor<T>> inputs, BackwardFn fn) {
    return record(kind, std::move(value), std::vector<DiffTensor<T>>(inputs), std::move(fn));
  }
  DiffTensor<T> record(OpKind kind, Tensor<T> value, const std::vector<DiffTensor<T>>& inputs, BackwardFn fn) {
    std::vector<std::uint32_t> ids;
    bool rg = false;
    ids.reserve(inputs.size());
    for (auto& in : inputs) {
      if (&in.graph() != this) throw ShapeError(std::string(op_name(kind)), "operand belongs to another graph");
      ids.push_back(in.id());
      rg = rg || nodes_[in.id()].requires_grad;
    }
    return push(kind, std::move(value), std::move(ids), rg, rg ? std::move(fn) : BackwardFn{});
  }

  const Node& node(std::uint32_t id) const { return nodes_.at(id); }
  const Tensor<T>& value(std::uint32_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::uint32_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  /// Gradient buffer of node `id`, zero-allocated on first touch. Returns
  /// nullptr when the node does not require a gradient.
  T* accumulate(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad.data();
  }

  /// Reverse pass from a scalar loss. Returns one entry per registry path:
  /// accumulated gradient for reachable trainable parameters, zeros otherwise.
  GradMap<T> backward(DiffTensor<T> loss) {
    if (backward_done_) throw FormatError("backward already run on this graph");
    if (loss.size() != 1) throw ShapeError("backward", "loss must be scalar, got " + to_string(loss.shape()));
    backward_done_ = true;
    if (nodes_[loss.id()].requires_grad) {
      nodes_[loss.id()].grad.assign(1, T(1));
      for (std::int64_t i = loss.id(); i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.backward || n.grad.empty()) continue;
        const bool flip = BackwardFaults::flipped(n.kind);
        if (flip)
          for (auto& g : n.grad) g = -g;
        n.backward(*this, n);
        if (flip)
          for (auto& g : n.grad) g = -g;
      }
    }
    GradMap<T> out;
    if (registry_) {
      for (const auto& path : registry_->paths()) {
        auto it = param_nodes_.find(path);
        Tensor<T> g(registry_->get(path).shape());
        if (it != param_nodes_.end() && !nodes_[it->second].grad.empty())
          g.values() = nodes_[it->second].grad;
        out.emplace(path, std::move(g));
      }
    }
    return out;
  }

  /// Gradient of an arbitrary node after backward (zeros if unreached).
  Tensor<T> grad(DiffTensor<T> t) const {
    const Node& n = nodes_.at(t.id());
    Tensor<T> g(n.value.shape());
    if (!n.grad.empty()) g.values() = n.grad;
    return g;
  }

  ParamRegistry<T>* registry() const noexcept { return registry_; }

 private:
  DiffTensor<T> push(OpKind kind, Tensor<T> value, std::vector<std::uint32_t> inputs, bool rg, BackwardFn fn) {
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.inputs = std::move(inputs);
    n.requires_grad = rg;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  ParamRegistry<T>* registry_ = nullptr;
  std::deque<Node> nodes_;
  std::unordered_map<std::string, std::uint32_t> param_nodes_;
  bool backward_done_ = false;
};

template <class T>
const Tensor<T>& DiffTensor<T>::value() const {
  return g_->value(id_);
}

template <class T>
bool DiffTensor<T>::requires_grad() const {
  return g_->requires_grad(id_);
}

}  // namespace uldm
