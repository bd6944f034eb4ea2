#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "pointvector/params.hpp"
#include "pointvector/tensor.hpp"

namespace pointvector {

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
};

enum class Mode { train, eval };

/// Gradients collected by Tape::backward.
template <class T>
class Gradients {
 public:
  /// Gradient of a parameter; nullptr when the loss did not reach it.
  const Tensor<T>* param(ParamId id) const {
    auto it = params_.find(id);
    return it == params_.end() ? nullptr : &it->second;
  }

  /// Gradient of a parameter, zeros when unreached.
  Tensor<T> param_or_zero(const ParamStore<T>& store, ParamId id) const {
    if (const auto* g = param(id)) return *g;
    return Tensor<T>(store.value(id).shape);
  }

  /// Gradient of a requires_grad leaf created with Tape::leaf.
  const Tensor<T>& leaf(Var v) const { return leaves_.at(v.id); }

  const std::unordered_map<ParamId, Tensor<T>>& params() const { return params_; }

 private:
  template <class>
  friend class Tape;
  std::unordered_map<ParamId, Tensor<T>> params_;
  std::unordered_map<std::uint32_t, Tensor<T>> leaves_;
};

/// Records executed ops and replays them in reverse for gradients.
/// Single-threaded; one tape per forward/backward pass.
template <class T>
class Tape {
 public:
  /// Receives the gradient of the node's output and accumulates into parents.
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  Var leaf(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.needs_grad = requires_grad;
    n.is_leaf = requires_grad;
    value.requires_grad = requires_grad;
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Leaf bound to a stored parameter. Repeated calls return the same Var.
  Var param(const ParamStore<T>& store, ParamId id) {
    auto it = param_vars_.find(id);
    if (it != param_vars_.end()) return it->second;
    const auto& e = store.entry(id);
    Node n;
    n.value = e.value;
    n.needs_grad = e.trainable;
    n.param = id;
    Var v = push(std::move(n));
    param_vars_.emplace(id, v);
    return v;
  }

  /// Adds an op result. `fn` may be empty when no parent needs a gradient.
  Var record(Tensor<T> value, bool needs_grad, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Mutable gradient buffer of `v`, zero-initialised on first access.
  std::span<T> grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
    return n.grad;
  }

  /// Reverse sweep from a scalar loss. Clears the tape.
  Gradients<T> backward(Var loss) {
    if (value(loss).numel() != 1)
      throw ContractError("backward requires a scalar loss, got shape " + to_string(shape(loss)));
    Gradients<T> out;
    if (nodes_[loss.id].needs_grad) {
      grad(loss)[0] = T(1);
      for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty()) continue;
        if (n.backward) n.backward(*this, std::span<const T>(n.grad));
      }
      for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.param) {
          if (!n.needs_grad) continue;
          Tensor<T> g(n.value.shape);
          if (!n.grad.empty()) g.data = std::move(n.grad);
          out.params_.emplace(*n.param, std::move(g));
        } else if (n.is_leaf) {
          Tensor<T> g(n.value.shape);
          if (!n.grad.empty()) g.data = std::move(n.grad);
          out.leaves_.emplace(static_cast<std::uint32_t>(i), std::move(g));
        }
      }
    } else {
      for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.param && n.needs_grad) out.params_.emplace(*n.param, Tensor<T>(n.value.shape));
        if (n.is_leaf) out.leaves_.emplace(static_cast<std::uint32_t>(i), Tensor<T>(n.value.shape));
      }
    }
    clear();
    return out;
  }

  void clear() {
    nodes_.clear();
    param_vars_.clear();
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    BackwardFn backward;
    bool needs_grad = false;
    bool is_leaf = false;
    std::optional<ParamId> param;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::deque<Node> nodes_;  // stable references while ops append
  std::unordered_map<ParamId, Var> param_vars_;
};

/// What a forward pass needs besides its inputs.
template <class T>
struct Context {
  Tape<T>& tape;
  ParamStore<T>& params;
  Mode mode = Mode::train;
  /// Geometry scale: radii are multiplied by it, relative offsets divided.
  double position_scale = 1.0;

  Var param(ParamId id) { return tape.param(params, id); }
};

}  // namespace pointvector
