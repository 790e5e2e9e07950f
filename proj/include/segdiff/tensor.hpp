#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "segdiff/common.hpp"
#include "segdiff/rng.hpp"

namespace segdiff {

/// Dense row-major tensor with an optional link into a reverse-mode tape.
///
/// Copying a Tensor copies a handle; storage and gradient are shared. Ops in
/// ops.hpp attach a tape node to their output whenever gradients are enabled
/// and at least one input requires them. backward() then walks the recorded
/// graph once, in reverse topological order.
template <class T>
class Tensor {
 public:
  struct Impl;

  struct Node {
    std::vector<Tensor> inputs;
    // Receives the output impl (forward values + grad) and accumulates into
    // the inputs' grads.
    std::function<void(const Impl&)> backprop;
  };

  struct Impl {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until backward touches this tensor
    bool requires_grad = false;
    std::shared_ptr<Node> node;  // tape link; null for leaves/constants
  };

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<std::size_t>(count(t.impl_->shape)), T(0));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t = zeros(std::move(shape));
    for (auto& v : t.impl_->data) v = value;
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  static Tensor from(std::vector<int> shape, std::vector<T> data,
                     bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != count(shape))
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randn(Rng& rng, std::vector<int> shape, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.impl_->data) v = static_cast<T>(rng.normal());
    return t;
  }

  // A Tensor is a shared handle: const-ness is shallow, as for shared_ptr.
  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<T> data() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) const { impl_->requires_grad = v; }
  bool recorded() const { return impl_->node != nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() const { return impl_->grad; }
  void clear_grad() const { impl_->grad.clear(); }

  T item() const {
    if (numel() != 1)
      throw std::invalid_argument("item() on non-scalar tensor of shape " +
                                  shape_str(impl_->shape));
    return impl_->data[0];
  }

  Impl& impl() { return *impl_; }
  const Impl& impl() const { return *impl_; }
  Impl* impl_ptr() const { return impl_.get(); }

  static std::int64_t count(std::span<const int> shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("non-positive dimension in shape " +
                                              shape_str(shape));
      n *= d;
    }
    return n;
  }

  // --- tape machinery (used by ops.hpp) ---

  void attach_node(std::shared_ptr<Node> node) const {
    impl_->node = std::move(node);
    impl_->requires_grad = true;
  }

  void ensure_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  }

 private:
  std::shared_ptr<Impl> impl_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {
inline thread_local bool grad_mode_enabled = true;
}

inline bool grad_enabled() { return detail::grad_mode_enabled; }

/// Disables tape recording for its scope (sampling, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Populates grad on every requires_grad tensor reachable from `loss`.
/// Existing grads are overwritten unless `accumulate` is set, in which case
/// leaf grads are added to instead.
template <class T>
void backward(Tensor<T> loss, bool accumulate = false) {
  if (!loss.defined()) throw std::invalid_argument("backward on undefined tensor");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
  if (!loss.recorded())
    throw std::invalid_argument("backward through a tensor with no recorded operations");

  // Reverse topological order via iterative post-order DFS. Traversal follows
  // the per-node input vectors, so the visit order is deterministic.
  using ImplT = typename Tensor<T>::Impl;
  std::vector<Tensor<T>> order;
  std::unordered_set<ImplT*> seen;
  struct Frame {
    Tensor<T> t;
    std::size_t next_input = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({loss});
  seen.insert(loss.impl_ptr());
  while (!stack.empty()) {
    Frame& f = stack.back();
    auto* node = f.t.impl().node.get();
    if (node && f.next_input < node->inputs.size()) {
      Tensor<T> in = node->inputs[f.next_input++];
      if (in.recorded() && seen.insert(in.impl_ptr()).second) stack.push_back({in});
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }

  // Fresh gradient buffers for everything this pass will write. Leaves keep
  // their previous grads in accumulate mode.
  std::unordered_set<ImplT*> interior;
  for (auto& t : order) interior.insert(t.impl_ptr());
  for (auto& t : order) {
    // Interior grads are always re-derived from scratch.
    t.ensure_grad();
    std::fill(t.grad().begin(), t.grad().end(), T(0));
    for (auto& in : t.impl().node->inputs) {
      if (!in.requires_grad() || interior.count(in.impl_ptr())) continue;
      in.ensure_grad();
      if (!accumulate) std::fill(in.grad().begin(), in.grad().end(), T(0));
    }
  }

  loss.grad()[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    it->impl().node->backprop(it->impl());
  }
}

}  // namespace segdiff
