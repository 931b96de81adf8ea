#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ordgaze {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Raised by any primitive whose operand shapes do not satisfy its contract.
/// The message names the op and the offending dimensions.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : std::invalid_argument(op + ": " + detail), op_(op) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const noexcept { return inputs.empty(); }

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major array with reverse-mode gradient participation.
/// Copies share storage; use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(ordgaze::numel(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    if (values.size() != ordgaze::numel(shape)) {
      throw ShapeError("tensor", "shape " + to_string(shape) + " needs " +
                                     std::to_string(ordgaze::numel(shape)) +
                                     " values, got " +
                                     std::to_string(values.size()));
    }
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  std::vector<T>& storage() { return node_->value; }
  const std::vector<T>& storage() const { return node_->value; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item", "tensor of shape " + to_string(shape()) +
                                   " is not a scalar");
    }
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::vector<T>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  const char* op() const { return node_->op; }

  /// Leaf with a copy of the values and no grad history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  /// Deep copy preserving requires_grad; grads are not copied.
  Tensor clone() const {
    return from(shape(), node_->value, node_->requires_grad);
  }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an op result. Inputs and the backward rule are only retained when
/// recording is enabled and at least one input needs a gradient.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->inputs.push_back(in.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto& in : inputs) n->inputs.push_back(in.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

/// Topologically ordered record of the recorded ops reachable from a scalar
/// loss. Replaying it walks the order backwards and accumulates gradients into
/// every tensor with requires_grad set. Intermediate grad buffers are released
/// after replay, so a tape never leaks state into the next step.
template <class T>
class Tape {
 public:
  static Tape record(const Tensor<T>& loss) {
    if (!loss.defined()) throw GraphError("backward: undefined loss");
    if (loss.numel() != 1) {
      throw ShapeError("backward", "loss must be scalar, got shape " +
                                       to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw GraphError(
          "backward: loss is detached from every tensor requiring grad");
    }
    Tape tape;
    tape.root_ = loss.node_ptr();
    // Iterative post-order DFS.
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    seen.insert(loss.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node<T>* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  void replay() {
    root_->ensure_grad()[0] += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* node = *it;
      if (node->is_leaf() || !node->backward || node->grad.empty()) continue;
      node->backward(*node);
    }
    for (Node<T>* node : order_) {
      if (!node->is_leaf()) {
        node->grad.clear();
        node->grad.shrink_to_fit();
      }
    }
  }

  std::size_t size() const noexcept { return order_.size(); }

  std::vector<std::string> op_names() const {
    std::vector<std::string> names;
    for (const Node<T>* n : order_) {
      if (!n->is_leaf()) names.emplace_back(n->op);
    }
    return names;
  }

 private:
  std::shared_ptr<Node<T>> root_;
  std::vector<Node<T>*> order_;
};

template <class T>
void backward(const Tensor<T>& loss) {
  Tape<T>::record(loss).replay();
}

}  // namespace ordgaze
