#pragma once

// Reverse-mode automatic differentiation over dense double-precision arrays.
//
// Graphs are built define-by-run: every primitive returns a Value that owns a
// Node recording its parents and a backward closure. Calling backward() on a
// scalar Value accumulates gradients into every node that requires them.
// A graph must stay on the thread that built it.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spiboter::ad {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Row-major dense array of doubles.
class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> data);

  static Array scalar(double v) { return Array({}, std::vector<double>{v}); }
  static Array vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Array({n}, std::move(v));
  }
  static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Array({rows, cols}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// 2-D element access.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  /// Value of a single-element array.
  double item() const;

  bool all_finite() const;
  void fill(double v);

  bool operator==(const Array& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct Node {
  Array value;
  Array grad;  // allocated on first accumulation
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  bool trainable = false;

  /// Gradient slot, allocated as zeros if needed.
  Array& grad_slot();
};

/// Handle to a graph node.
class Value {
 public:
  Value() = default;
  explicit Value(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Array& value() const { return node_->value; }
  Array& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  double item() const { return node_->value.item(); }
  const std::string& op() const { return node_->op; }

  bool requires_grad() const { return node_->requires_grad; }
  bool trainable() const { return node_->trainable; }
  /// Toggles a leaf between trainable parameter and constant.
  void set_trainable(bool on);

  /// Gradient of the last backward pass; zeros when the node was unreachable.
  Array grad() const;
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

Value constant(Array a);
Value constant(double v);
Value parameter(Array a);

// Elementwise binary ops broadcast NumPy-style (trailing dimensions aligned,
// size-1 dimensions stretched).
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value div(const Value& a, const Value& b);

Value operator+(const Value& a, const Value& b);
Value operator-(const Value& a, const Value& b);
Value operator*(const Value& a, const Value& b);
Value operator/(const Value& a, const Value& b);

Value scale(const Value& a, double s);
Value add_scalar(const Value& a, double s);

/// (..., m, k) x (k, n) or (..., m, k) x (..., k, n) with equal leading dims.
Value matmul(const Value& a, const Value& b);
/// Swaps the last two axes.
Value transpose(const Value& a);
Value permute(const Value& a, const std::vector<std::size_t>& axes);
Value reshape(const Value& a, Shape shape);
Value concat(const std::vector<Value>& parts, std::size_t axis);

Value relu(const Value& a);
Value exp(const Value& a);
Value log(const Value& a);
Value sqrt(const Value& a);
Value sin(const Value& a);
Value cos(const Value& a);

Value sum(const Value& a);
Value sum(const Value& a, std::size_t axis);
Value mean(const Value& a);
Value mean(const Value& a, std::size_t axis);
/// Gradient flows to the first maximal entry.
Value max(const Value& a);
Value max(const Value& a, std::size_t axis);

/// Sum of squares over the last axis.
Value sq_norm(const Value& a);

inline constexpr double kMaskSentinel = -1e9;

/// Softmax over the last axis with an additive mask. `mask` holds 1 for
/// blocked positions and 0 for visible ones; its shape must match the
/// trailing dimensions of `scores`. Blocked weights come out exactly 0.
Value softmax_masked(const Value& scores, const Array& mask,
                     double sentinel = kMaskSentinel);

/// (x - mean) / sqrt(var + eps) over the last axis, population variance.
Value layer_norm(const Value& x, double eps = 1e-5);

/// N x 3 points -> N x N matrix of squared Euclidean distances.
Value pairwise_sq_dist(const Value& points);

/// Accumulates d(root)/d(node) into every node that requires a gradient.
/// Gradients of reached nodes are reset before accumulation.
void backward(const Value& root);

using GraphBuilder = std::function<Value(std::span<const Value>)>;

/// Compares analytic gradients of `build` against five-point central
/// differences for every entry of every leaf. Entries with
/// |analytic| + |numeric| below `floor` are skipped. Returns the worst
/// relative error.
double grad_check(const GraphBuilder& build, const std::vector<Array>& leaves,
                  double eps, double floor = 1e-10);

}  // namespace spiboter::ad
