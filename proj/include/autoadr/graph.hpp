#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "autoadr/tensor.hpp"

namespace autoadr {

// A named trainable tensor. `grad` is allocated lazily the first time a
// graph routes a gradient into it and stays allocated afterwards.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() {
    if (has_grad()) grad.fill(0.0);
  }
};

class Graph;

// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Tape of primitive operations in creation order. Parents always precede
// children, so backward is a single reverse sweep. A graph can be
// differentiated once; build a new graph for the next forward.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // The parameter must outlive the graph.
  Var param(Parameter& p);

  // Registers an op result. `backward` may be empty for ops with no
  // differentiable parents.
  Var make(std::string_view op, Tensor value, std::vector<int> parents, BackwardFn backward);

  void backward(Var loss);

  const Tensor& value(int id) const;
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  // Gradient slot of a node, zero-initialised on first access. For parameter
  // leaves this is the parameter's own grad tensor.
  Tensor& grad(int id);

  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<Parameter*>& parameters() const { return params_; }
  bool differentiated() const { return backward_done_; }

 private:
  struct Node {
    std::string_view op;
    Tensor value;
    Tensor grad;
    std::vector<int> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<Parameter*> params_;
  bool backward_done_ = false;
};

}  // namespace autoadr
