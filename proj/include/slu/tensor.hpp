#pragma once

// Dense float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node holding shape, values and an
// optional gradient buffer. Ops (see ops.hpp) record a backward closure on the
// thread's active GradientTape whenever one of their inputs requires a
// gradient. Replaying the tape in reverse accumulates gradients additively.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slu/errors.hpp"

namespace slu {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape.empty()) shape = {1};
    for (auto d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != data.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  /// Parameters only: the optimizer and tests write through this.
  std::span<double> mutable_data() { return node_->value; }

  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.back() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy of values; the copy does not share gradient history.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(node_->shape, node_->value, requires_grad);
  }

  const detail::NodePtr& node() const { return node_; }

 private:
  detail::NodePtr node_;
};

/// Ordered log of backward closures. Ops record onto the tape that is active on
/// the calling thread; `backward` replays it once, in reverse, then clears it.
class GradientTape {
 public:
  GradientTape() = default;
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  class Recording {
   public:
    explicit Recording(GradientTape& tape) : previous_(active_slot()) { active_slot() = &tape; }
    ~Recording() { active_slot() = previous_; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    GradientTape* previous_;
  };

  [[nodiscard]] Recording record() {
    replayed_ = false;
    return Recording(*this);
  }

  static GradientTape* active() { return active_slot(); }

  void push(std::function<void()> step) { steps_.push_back(std::move(step)); }
  std::size_t size() const { return steps_.size(); }

  void backward(const Tensor& loss) {
    if (replayed_) throw TapeError("backward() called twice without re-recording the tape");
    if (loss.size() != 1)
      throw DimensionError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    auto node = loss.node();
    node->ensure_grad();
    node->grad[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    steps_.clear();
    replayed_ = true;
  }

  void clear() {
    steps_.clear();
    replayed_ = false;
  }

 private:
  static GradientTape*& active_slot() {
    static thread_local GradientTape* active = nullptr;
    return active;
  }

  std::vector<std::function<void()>> steps_;
  bool replayed_ = false;
};

}  // namespace slu
