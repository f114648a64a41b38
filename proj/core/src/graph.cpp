#include "unimask/graph.hpp"

namespace unimask {

std::size_t ParamStore::add(std::string name, Tensor value) {
  if (index_.count(name)) throw std::invalid_argument("param store: duplicate name " + name);
  index_.emplace(name, names_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return names_.size() - 1;
}

std::optional<std::size_t> ParamStore::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t ParamStore::index(std::string_view name) const {
  auto i = find(name);
  if (!i) throw std::out_of_range("param store: no parameter named " + std::string(name));
  return *i;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

void ParamStore::erase_prefix(std::string_view prefix) {
  std::vector<std::string> names;
  std::vector<Tensor> values;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i].compare(0, prefix.size(), prefix) == 0) continue;
    names.push_back(std::move(names_[i]));
    values.push_back(std::move(values_[i]));
  }
  names_ = std::move(names);
  values_ = std::move(values);
  reindex();
}

void ParamStore::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < names_.size(); ++i) index_.emplace(names_[i], i);
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

NodeId Graph::variable(Tensor value) {
  Node n;
  n.op = "variable";
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

NodeId Graph::param(const ParamStore& store, std::size_t index, bool trainable) {
  if (auto it = param_nodes_.find(index); it != param_nodes_.end()) return it->second;
  Node n;
  n.op = "param:" + store.name(index);
  n.value = store.value(index);
  n.requires_grad = trainable && grad_enabled_ &&
                    (trainable_mask_.empty() ||
                     (index < trainable_mask_.size() && trainable_mask_[index]));
  n.param_index = index;
  nodes_.push_back(std::move(n));
  param_nodes_.emplace(index, nodes_.size() - 1);
  return nodes_.size() - 1;
}

NodeId Graph::record(std::string_view op, Tensor value, std::vector<NodeId> inputs,
                     BackwardFn fn) {
  if (!value.all_finite()) {
    throw NumericError("non-finite output from primitive '" + std::string(op) + "' with shape " +
                       shape_string(value.shape()));
  }
  Node n;
  n.op = std::string(op);
  n.value = std::move(value);
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw std::out_of_range("graph: dangling input to " + n.op);
    n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return nodes_.size() - 1;
}

Tensor& Graph::grad(NodeId id) {
  Node& n = nodes_.at(id);
  if (!n.grad) n.grad = Tensor(n.value.shape());
  return *n.grad;
}

void Graph::run_backward(NodeId loss) {
  if (nodes_.at(loss).value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_string(nodes_[loss].value.shape()));
  }
  grad(loss).fill(1.0);
  for (NodeId id = loss + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.grad || !n.backward) continue;
    n.backward(*this, id);
  }
}

Gradients Graph::param_gradients(const ParamStore& store) const {
  Gradients out(store.size());
  for (const auto& [index, node] : param_nodes_) {
    const Node& n = nodes_[node];
    if (!n.requires_grad || index >= store.size()) continue;
    out[index] = n.grad ? *n.grad : Tensor(n.value.shape());
  }
  return out;
}

Gradients backward(Graph& graph, NodeId loss, const ParamStore& store) {
  graph.run_backward(loss);
  return graph.param_gradients(store);
}

}  // namespace unimask
