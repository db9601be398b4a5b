#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "updseg/tensor.hpp"

namespace upd {

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated during backward, same shape as value
  bool requires_grad = false;
  // Reads this node's grad and accumulates into its parents' grads.
  std::function<void()> backprop;
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

/// Records every op output in creation order so the reverse sweep is a
/// plain reverse iteration (inputs always precede their consumers).
template <class T>
class Tape {
 public:
  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    nodes_.push_back(n);
    return n;
  }

  Var<T> record(Tensor<T> value, std::function<void()> backprop) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->backprop = std::move(backprop);
    nodes_.push_back(n);
    return n;
  }

  /// Reverse sweep from a scalar loss. Every node's grad is populated;
  /// gradients accumulate additively across multiple uses of a tensor.
  void backward(const Var<T>& loss) {
    if (loss->value.size() != 1) throw ShapeError("backward: loss must be a scalar tensor");
    for (auto& n : nodes_) n->grad = Tensor<T>::zeros(n->value.shape);
    loss->grad.data[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if ((*it)->backprop) (*it)->backprop();
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Backprop closures capture their own output node, so each node sits in a
  // shared_ptr cycle with its lambda; clearing the closures here lets the
  // whole graph free when the tape goes out of scope.
  ~Tape() {
    for (auto& n : nodes_) n->backprop = nullptr;
  }

  /// Piecewise-linearity signature: ReLU sign masks, max argmax picks and
  /// loss clamps recorded during the forward pass. Finite-difference checks
  /// compare signatures at x+eps and x-eps and skip coordinates that
  /// straddle a kink, where a two-sided difference is meaningless.
  std::vector<std::uint8_t> kink_sig;

 private:
  std::vector<Var<T>> nodes_;
};

}  // namespace upd
