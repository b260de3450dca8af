#pragma once

#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <deque>
#include <vector>

#include "baaf/parameter_store.hpp"
#include "baaf/tensor.hpp"

namespace baaf {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  scale,
  relu,
  leaky_relu,
  sigmoid,
  dense,
  conv2d,
  maxpool2,
  upsample2,
  concat,
  slice,
  gap,
  reshape,
  batchnorm,
  pair_softmax,
  sum,
  mean,
  bce,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::dense: return "dense";
    case OpKind::conv2d: return "conv2d";
    case OpKind::maxpool2: return "maxpool2";
    case OpKind::upsample2: return "upsample2";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::gap: return "gap";
    case OpKind::reshape: return "reshape";
    case OpKind::batchnorm: return "batchnorm";
    case OpKind::pair_softmax: return "pair_softmax";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::bce: return "bce";
  }
  return "unknown";
}

// Negative control for the gradient checker: when set, the backward rule of
// this op sees its incoming gradient scaled by 1.25.
inline std::optional<OpKind>& corrupted_backward_op() {
  static std::optional<OpKind> op;
  return op;
}

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
};

template <typename T>
struct TapeNode {
  using Backward = std::function<void(Tape<T>&, int)>;

  int id = 0;
  OpKind kind = OpKind::leaf;
  std::vector<int> parents;
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  Backward backward;
};

template <typename T>
struct GradientMap {
  std::map<std::string, Tensor<T>> grads;
  std::vector<std::string> disconnected;
};

/// Linear record of a forward pass. Node ids increase in creation order, so
/// every parent id is smaller than its child's id.
template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var<T> constant(Tensor<T> v) { return push_leaf(std::move(v), false); }
  Var<T> input(Tensor<T> v) { return push_leaf(std::move(v), grad_enabled_); }

  Var<T> parameter(const ParameterStore<T>& store, const std::string& path) {
    if (auto it = param_ids_.find(path); it != param_ids_.end()) return {this, it->second};
    const auto& p = store.at(path);
    Var<T> v = push_leaf(p.value, grad_enabled_ && p.trainable);
    if (p.trainable) param_ids_.emplace(path, v.id);
    return v;
  }

  Var<T> record(OpKind kind, std::vector<int> parents, Tensor<T> value,
                typename TapeNode<T>::Backward backward) {
    TapeNode<T> n;
    n.id = static_cast<int>(nodes_.size());
    n.kind = kind;
    for (int p : parents)
      if (p < 0 || p >= n.id) throw std::logic_error("tape parent id out of order");
    bool rg = false;
    for (int p : parents) rg = rg || nodes_[p].requires_grad;
    n.requires_grad = grad_enabled_ && rg;
    if (n.requires_grad) n.backward = std::move(backward);
    n.parents = std::move(parents);
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.back().id};
  }

  const Tensor<T>& value(int id) const { return nodes_.at(id).value; }
  const TapeNode<T>& node(int id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Zero-initialized gradient buffer of node `id`.
  Tensor<T>& grad(int id) {
    auto& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  bool has_grad(int id) const { return !nodes_.at(id).grad.empty(); }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw std::logic_error("loss belongs to a different tape");
    const auto& lv = value(loss.id);
    if (lv.size() != 1)
      throw ShapeError("backward needs a scalar loss, got shape " + shape_str(lv.shape()));
    grad(loss.id)[0] += T(1);
    for (int id = loss.id; id >= 0; --id) {
      auto& n = nodes_[id];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      if (corrupted_backward_op() && *corrupted_backward_op() == n.kind)
        for (auto& g : n.grad.storage()) g *= T(1.25);
      n.backward(*this, id);
    }
  }

  /// Gradients of every trainable parameter registered on this tape.
  /// Parameters the loss does not reach get an exact zero gradient.
  GradientMap<T> parameter_gradients() const {
    GradientMap<T> out;
    for (const auto& [path, id] : param_ids_) {
      const auto& n = nodes_[id];
      if (n.grad.empty()) {
        out.grads.emplace(path, Tensor<T>(n.value.shape()));
        out.disconnected.push_back(path);
      } else {
        out.grads.emplace(path, n.grad);
      }
    }
    return out;
  }

  /// Gradients for every trainable entry of `store`, including ones never
  /// touched by this tape.
  GradientMap<T> parameter_gradients(const ParameterStore<T>& store) const {
    GradientMap<T> out = parameter_gradients();
    for (const auto& [path, p] : store)
      if (p.trainable && !out.grads.count(path)) {
        out.grads.emplace(path, Tensor<T>(p.value.shape()));
        out.disconnected.push_back(path);
      }
    return out;
  }

 private:
  Var<T> push_leaf(Tensor<T> v, bool rg) {
    TapeNode<T> n;
    n.id = static_cast<int>(nodes_.size());
    n.kind = OpKind::leaf;
    n.value = std::move(v);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return {this, nodes_.back().id};
  }

  bool grad_enabled_;
  std::deque<TapeNode<T>> nodes_;
  std::map<std::string, int> param_ids_;
};

}  // namespace baaf
