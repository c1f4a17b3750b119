#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace melt {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes violate an op's contract. The message names
/// every shape involved.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a value that must be finite is NaN or infinite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string to_string(const Shape& shape);
std::size_t numel(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool is_leaf = true;

  std::vector<double>& ensure_grad();
};

/// Dense row-major tensor of doubles.
///
/// A Tensor is a shared handle: copies alias the same storage, the way
/// parameters are shared between an optimizer and a model. Use clone() for
/// an independent copy. Ops only ever create new tensors; the only in-place
/// mutators are the explicit ones below, which must not be called on a
/// tensor that is recorded on an active tape.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  /// Leading extent of a 2-D tensor; 1 for 1-D and scalar tensors.
  std::size_t rows() const;
  /// Trailing extent; 1 for scalars.
  std::size_t cols() const;

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  double item() const;
  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  std::span<const double> row(std::size_t r) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  void zero_grad();

  Tensor clone() const;
  /// Append rows in place. Only valid for tensors that are not on a tape.
  void append_rows(const Tensor& rows);

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Ordered record of executed ops. Backward replays it in exact reverse.
class Tape {
 public:
  struct Record {
    std::string_view op;
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::shared_ptr<TensorNode> output;
    std::function<void()> backward;
  };

  void record(Record r) { records_.push_back(std::move(r)); }
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  /// Accumulate dloss/dleaf into every requires_grad leaf reached from loss.
  /// Leaf gradients accumulate across calls until zero_grad(); intermediate
  /// gradients are reset at the start of each call.
  void backward(const Tensor& loss);

 private:
  std::vector<Record> records_;
};

/// Makes `tape` the active recording tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the current thread (teacher forwards, evaluation).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

void backward(const Tensor& loss, Tape& tape);

void check_finite(const Tensor& t, std::string_view where);

}  // namespace melt
