#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "unimask/tensor.hpp"

namespace unimask {

/// Raised when a computation produces non-finite values.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named, ordered parameter tensors. Names are stable dotted paths such as
/// `encoder.block.0.attn.wq`; insertion order is the canonical order.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value);
  std::optional<std::size_t> find(std::string_view name) const;
  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name).has_value(); }

  Tensor& value(std::size_t i) { return values_.at(i); }
  const Tensor& value(std::size_t i) const { return values_.at(i); }
  Tensor& operator[](std::string_view name) { return values_[index(name)]; }
  const Tensor& operator[](std::string_view name) const { return values_[index(name)]; }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  std::size_t size() const { return names_.size(); }
  std::size_t scalar_count() const;

  /// Drop every parameter whose name starts with `prefix`.
  void erase_prefix(std::string_view prefix);

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  void reindex();

  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Gradient per parameter, aligned with a ParamStore. Parameters that are
/// frozen or absent from the computation carry no gradient.
using Gradients = std::vector<std::optional<Tensor>>;

using NodeId = std::size_t;

/// Tape of computation records in creation (topological) order.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  NodeId constant(Tensor value);
  /// Leaf that participates in differentiation (used for inputs under test).
  NodeId variable(Tensor value);
  /// Leaf bound to a stored parameter; repeated calls return the same node.
  NodeId param(const ParamStore& store, std::size_t index, bool trainable = true);
  NodeId param(const ParamStore& store, std::string_view name, bool trainable = true) {
    return param(store, store.index(name), trainable);
  }

  /// Restrict which parameters may receive gradients (aligned with the store
  /// passed to param()). An empty mask means every parameter is trainable.
  void set_trainable_mask(std::vector<bool> mask) { trainable_mask_ = std::move(mask); }
  /// Inference mode: no node requires a gradient.
  void disable_grad() { grad_enabled_ = false; }

  /// Append an operation node. The backward rule is retained only when some
  /// input requires a gradient.
  NodeId record(std::string_view op, Tensor value, std::vector<NodeId> inputs, BackwardFn fn);

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  const std::string& op(NodeId id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient slot of a node, allocated as zeros on first access.
  Tensor& grad(NodeId id);
  bool has_grad(NodeId id) const { return nodes_.at(id).grad.has_value(); }

  /// Reverse sweep from a scalar loss node; visits each node at most once.
  void run_backward(NodeId loss);

  /// Collect gradients of parameter leaves after run_backward.
  Gradients param_gradients(const ParamStore& store) const;

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    std::optional<std::size_t> param_index;
  };

  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, NodeId> param_nodes_;
  std::vector<bool> trainable_mask_;
  bool grad_enabled_ = true;
};

/// Reverse-mode gradients of `loss` with respect to every trainable parameter
/// reachable from it.
Gradients backward(Graph& graph, NodeId loss, const ParamStore& store);

}  // namespace unimask
