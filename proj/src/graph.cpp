#include "autoadr/graph.hpp"

#include <cmath>

#include "autoadr/errors.hpp"

namespace autoadr {

const Tensor& Var::value() const { return graph->value(id); }

Var Graph::constant(Tensor value) {
  Node node;
  node.op = "constant";
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::param(Parameter& p) {
  Node node;
  node.op = "parameter";
  node.param = &p;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  params_.push_back(&p);
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::make(std::string_view op, Tensor value, std::vector<int> parents,
                BackwardFn backward) {
  require(!backward_done_, "cannot extend a graph after backward()");
  const int self = static_cast<int>(nodes_.size());
  bool tracked = false;
  for (int p : parents) {
    require(p >= 0 && p < self, "op parents must precede the op");
    tracked = tracked || nodes_[static_cast<std::size_t>(p)].requires_grad;
  }
  if (!value.all_finite()) {
    throw NumericFailure("non-finite value produced by node " + std::to_string(self) + " (" +
                         std::string(op) + ")");
  }
  Node node;
  node.op = op;
  node.value = std::move(value);
  node.parents = std::move(parents);
  node.requires_grad = tracked && static_cast<bool>(backward);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, self};
}

const Tensor& Graph::value(int id) const {
  const Node& node = nodes_[static_cast<std::size_t>(id)];
  return node.param != nullptr ? node.param->value : node.value;
}

Tensor& Graph::grad(int id) {
  Node& node = nodes_[static_cast<std::size_t>(id)];
  if (node.param != nullptr) {
    if (node.param->grad.empty()) node.param->grad = Tensor(node.param->value.shape());
    return node.param->grad;
  }
  if (node.grad.empty()) node.grad = Tensor(node.value.shape());
  return node.grad;
}

void Graph::backward(Var loss) {
  require(loss.graph == this, "loss belongs to a different graph");
  require(!backward_done_, "backward() already ran on this graph; rebuild the forward pass");
  require(value(loss.id).size() == 1, "backward() needs a scalar loss, got shape " +
                                          shape_string(value(loss.id).shape()));
  backward_done_ = true;
  if (!nodes_[static_cast<std::size_t>(loss.id)].requires_grad) return;
  grad(loss.id).fill(1.0);
  for (int i = loss.id; i >= 0; --i) {
    Node& node = nodes_[static_cast<std::size_t>(i)];
    if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
    if (!node.grad.all_finite()) {
      throw NumericFailure("non-finite gradient at node " + std::to_string(i) + " (" +
                           std::string(node.op) + ")");
    }
    node.backward(*this, i);
    // Intermediate gradients are no longer needed once propagated.
    node.grad = Tensor();
  }
  for (Parameter* p : params_) {
    if (p->has_grad() && !p->grad.all_finite()) {
      throw NumericFailure("non-finite gradient in parameter " + p->name);
    }
  }
}

}  // namespace autoadr
