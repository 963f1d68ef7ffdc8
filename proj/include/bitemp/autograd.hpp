#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "bitemp/tensor.hpp"

namespace bitemp::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;

  bool has_grad() const { return !grad.empty(); }
  Tensor<T>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape);
    return grad;
  }
  MatMap<T> grad_mat() { return grad_buffer().mat(); }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_var(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

// Reverse-mode tape. Ops evaluate eagerly and append a backward closure only
// when one of their inputs requires a gradient.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> v) { return make_var(std::move(v), false); }

  // With gradients disabled no op records a closure (inference mode).
  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  template <typename F>
  void record(F&& fn) {
    ops_.emplace_back(std::forward<F>(fn));
  }

  void backward(const Var<T>& loss) {
    if (loss->value.size() != 1) throw ShapeError("backward expects a scalar loss");
    if (!loss->requires_grad) return;
    loss->grad_buffer()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

 private:
  std::vector<std::function<void()>> ops_;
  bool grad_enabled_ = true;
};

template <typename T>
bool any_grad(std::initializer_list<const Var<T>*> vs) {
  for (const auto* v : vs)
    if (*v && (*v)->requires_grad) return true;
  return false;
}

}  // namespace bitemp::ag
