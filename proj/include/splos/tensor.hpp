#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "splos/errors.hpp"

namespace splos {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

// One value in the recorded graph. Leaves have no parents and no backward fn.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into parents' grads.
  std::function<void(Node& self)> backward;

  bool is_leaf() const { return parents.empty(); }

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_mode_enabled() { return detail::no_grad_depth == 0; }

/// Dense row-major tensor of doubles with reverse-mode differentiation.
///
/// Copies are shallow (they alias the same node); use clone() for an
/// independent leaf. Parameters are leaves with requires_grad set; every
/// operation on a tensor that requires grad records a graph node unless a
/// NoGradGuard is active.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node>()) { node_->shape = {0}; }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    detail::require(shape_size(shape) == data.size(),
                    "tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
    if (requires_grad) node_->ensure_grad();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({}, {v}, requires_grad);
  }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    auto n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rows() const {
    detail::require(rank() == 2, "rows() on non-matrix " + shape_str(shape()));
    return node_->shape[0];
  }
  std::size_t cols() const {
    detail::require(rank() == 2, "cols() on non-matrix " + shape_str(shape()));
    return node_->shape[1];
  }

  std::span<const double> data() const { return node_->data; }
  /// In-place access for optimizers and initializers. Only meaningful on leaves.
  std::span<double> mutable_data() { return node_->data; }

  double item() const {
    detail::require(size() == 1, "item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  const std::string& op() const { return node_->op; }

  /// Accumulated gradient; all zeros if the tensor never received one.
  std::vector<double> grad() const {
    if (node_->grad.size() == node_->data.size()) return node_->grad;
    return std::vector<double>(node_->data.size(), 0.0);
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Independent leaf with a copy of the data (and the same requires_grad flag).
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  /// Same data, no graph history, no grad.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Reverse-mode sweep from a scalar. Leaf grads accumulate across calls;
  /// grads of intermediate nodes are recomputed each call.
  void backward() const;

  // Graph construction hooks for operation implementations.
  static Tensor make_result(Shape shape, std::vector<double> data, std::string op,
                            std::vector<Tensor> inputs,
                            std::function<void(detail::Node&)> backward_fn) {
    Tensor out(std::move(shape), std::move(data), false);
    out.node_->op = std::move(op);
    if (!grad_mode_enabled()) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(backward_fn);
    return out;
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  detail::require(size() == 1 && rank() <= 1,
                  "backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!requires_grad()) return;

  // Iterative post-order DFS: parents precede children in `order`.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (n->is_leaf()) continue;
    auto& g = n->ensure_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf() || !n->backward) continue;
    for (auto& p : n->parents) {
      if (p->requires_grad) p->ensure_grad();
    }
    n->backward(*n);
    for (auto& p : n->parents) {
      if (!p->requires_grad) continue;
      for (double g : p->grad) {
        if (!std::isfinite(g)) {
          throw NumericError("non-finite gradient produced by backward of '" + n->op +
                             "' into '" + p->op + "'");
        }
      }
    }
  }
}

}  // namespace splos
