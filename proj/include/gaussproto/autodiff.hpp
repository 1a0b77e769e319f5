#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gaussproto/errors.hpp"
#include "gaussproto/tensor.hpp"

namespace gaussproto {

// A trainable leaf: its value plus the gradient accumulated by backward().
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::like(value)) {}

  void zero_grad() { grad = Tensor<T>::like(value); }
};

template <class T>
class Graph;

// Handle to a node of a Graph.
template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode recording session. Nodes are appended in evaluation order;
// backward() visits them in exact reverse order. A Graph is single-threaded.
template <class T>
class Graph {
 public:
  // Receives the gradient flowing into the node and accumulates into inputs.
  using BackwardFn = std::function<void(Graph&, const Tensor<T>&)>;
  // Same, but also receives the node's own forward value.
  using BackwardWithOutputFn =
      std::function<void(Graph&, const Tensor<T>& grad, const Tensor<T>& out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) {
    return push("constant", std::move(value), false, nullptr, {});
  }

  Var<T> parameter(Parameter<T>& p) {
    return push("parameter:" + p.name, p.value, true, &p, {});
  }

  // A leaf that requires gradients without being tied to a Parameter; its
  // gradient is read back through grad().
  Var<T> variable(Tensor<T> value) {
    return push("variable", std::move(value), true, nullptr, {});
  }

  Var<T> record(std::string_view op, Tensor<T> value,
                std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    BackwardWithOutputFn wrapped;
    if (needs && fn) {
      wrapped = [f = std::move(fn)](Graph& g, const Tensor<T>& d, const Tensor<T>&) {
        f(g, d);
      };
    }
    return push(std::string(op), std::move(value), needs, nullptr, std::move(wrapped));
  }

  Var<T> record_with_output(std::string_view op, Tensor<T> value,
                            std::initializer_list<Var<T>> inputs,
                            BackwardWithOutputFn fn) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(std::string(op), std::move(value), needs, nullptr,
                needs ? std::move(fn) : BackwardWithOutputFn{});
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient buffer of a node, allocated on first use.
  Tensor<T>& grad_ref(Var<T> v) {
    auto& n = nodes_.at(v.id);
    if (!n.grad) n.grad = std::make_unique<Tensor<T>>(Tensor<T>::like(n.value));
    return *n.grad;
  }

  // Gradient of the last backward() target with respect to `v`; zeros when
  // the node was never reached.
  Tensor<T> grad(Var<T> v) const {
    const auto& n = nodes_.at(v.id);
    return n.grad ? *n.grad : Tensor<T>::like(n.value);
  }

  void accumulate(Var<T> v, const Tensor<T>& g) {
    if (!requires_grad(v)) return;
    auto& dst = grad_ref(v);
    require_same_shape(dst, g, "gradient accumulation");
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  // Seeds d(out)/d(out) = 1 and propagates to every reachable leaf. Parameter
  // leaves add their gradient into Parameter::grad.
  void backward(Var<T> out) {
    if (value(out).size() != 1) {
      throw NonScalarOutput("backward target has shape " +
                            shape_string(value(out).shape()));
    }
    for (auto& n : nodes_) n.grad.reset();
    if (!requires_grad(out)) return;
    grad_ref(out)[0] = T(1);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.grad || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, *n.grad, n.value);
      if (n.param) {
        auto& pg = n.param->grad;
        if (pg.shape() != n.value.shape()) pg = Tensor<T>::like(n.value);
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += (*n.grad)[k];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::string& op_name(Var<T> v) const { return nodes_.at(v.id).op; }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardWithOutputFn backward;
    std::unique_ptr<Tensor<T>> grad;
  };

  Var<T> push(std::string op, Tensor<T> value, bool requires_grad,
              Parameter<T>* param, BackwardWithOutputFn fn) {
    if (!value.all_finite()) {
      throw NotFinite("non-finite value produced by " + op);
    }
    nodes_.push_back(Node{std::move(op), std::move(value), requires_grad, param,
                          std::move(fn), nullptr});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace gaussproto
