#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "despoof/tensor.hpp"

namespace despoof {

/// A named trainable (or state) tensor owned by a network.
///
/// `grad` stays empty until a backward pass reaches the parameter, so a
/// frozen or unused parameter has no gradient at all rather than a zero one.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  bool has_grad() const { return !grad.empty(); }
  void clear_grad() { grad = Tensor<T>(); }
};

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

/// Reverse-mode recording of a forward computation.
///
/// Nodes are appended in execution order; backward() walks them in exactly
/// the reverse order. A node whose inputs do not require gradients records no
/// backward closure, which is how frozen networks stay off the gradient path.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor<T> value) {
    return push("constant", std::move(value), false, nullptr);
  }

  Var input(Tensor<T> value, bool requires_grad = true) {
    return push("input", std::move(value), requires_grad, nullptr);
  }

  /// Records a parameter as a leaf. Gradients are written back to
  /// `param.grad` by backward() only when the parameter is trainable.
  Var param(Parameter<T>& param) {
    auto it = bound_.find(&param);
    if (it != bound_.end()) return Var{it->second};
    Var v = push(param.name, param.value, param.trainable, nullptr);
    bound_.emplace(&param, v.id);
    if (param.trainable) bindings_.push_back({&param, v.id});
    return v;
  }

  /// Appends an operation result. `backward` runs only if some input needs a
  /// gradient.
  Var record(std::string_view op, Tensor<T> value, std::initializer_list<Var> inputs,
             Backward backward) {
    return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var record(std::string_view op, Tensor<T> value, const std::vector<Var>& inputs,
             Backward backward) {
    bool rg = false;
    for (Var in : inputs) rg = rg || requires_grad(in);
    if (!value.all_finite())
      throw NumericError("non-finite value produced by " + std::string(op));
    return push(op, std::move(value), rg, rg ? std::move(backward) : nullptr);
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return value(v).shape(); }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }
  const Tensor<T>& grad(Var v) const { return nodes_.at(v.id).grad; }
  std::string_view op(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator for an input, allocated on first use. Returns
  /// nullptr when the input does not take part in differentiation.
  Tensor<T>* accumulator(Var v) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Trainable parameters recorded
  /// through param() receive their gradient (accumulated into Parameter::grad).
  void backward(Var loss) {
    if (value(loss).size() != 1)
      throw ShapeError("backward() needs a scalar, got shape " + to_string(shape(loss)));
    if (!requires_grad(loss)) return;
    accumulator(loss)->fill(T(1));
    order_.clear();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      order_.push_back(i);
      n.backward(*this, n.grad);
    }
    for (auto& [param, id] : bindings_) {
      const Node& n = nodes_[id];
      if (n.grad.empty()) continue;
      if (param->grad.empty()) {
        param->grad = n.grad;
      } else {
        auto dst = param->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }

  /// Node ids visited by the last backward pass, in visiting order.
  const std::vector<std::size_t>& backward_order() const { return order_; }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(std::string_view op, Tensor<T> value, bool rg, Backward backward) {
    nodes_.push_back(Node{std::string(op), std::move(value), {}, rg, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<Parameter<T>*, std::size_t>> bindings_;
  std::unordered_map<const Parameter<T>*, std::size_t> bound_;
  std::vector<std::size_t> order_;
};

}  // namespace despoof
