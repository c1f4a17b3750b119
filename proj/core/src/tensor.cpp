#include "melt/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace melt {

namespace {

thread_local Tape* g_active_tape = nullptr;

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::vector<double>& TensorNode::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor::Tensor() : node_(std::make_shared<TensorNode>()) {}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<TensorNode>()) {
  node_->value.assign(numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<TensorNode>()) {
  if (numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + to_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.front().size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(v));
}

std::size_t Tensor::rows() const {
  return node_->shape.size() >= 2 ? node_->shape[0] : 1;
}

std::size_t Tensor::cols() const {
  return node_->shape.empty() ? 1 : node_->shape.back();
}

double Tensor::item() const {
  if (node_->value.size() != 1) {
    throw DimensionError("item() on tensor of shape " + to_string(node_->shape));
  }
  return node_->value[0];
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(node_->value).subspan(r * c, c);
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor out(node_->shape, node_->value);
  out.node_->requires_grad = node_->requires_grad;
  return out;
}

void Tensor::append_rows(const Tensor& rows) {
  if (dim() != 2 || rows.dim() != 2 || rows.cols() != cols()) {
    throw DimensionError("append_rows " + to_string(rows.shape()) + " onto " +
                         to_string(shape()));
  }
  node_->value.insert(node_->value.end(), rows.data().begin(), rows.data().end());
  node_->shape[0] += rows.rows();
  node_->grad.clear();
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw DimensionError("backward needs a scalar loss, got " + to_string(loss.shape()));
  }
  const auto& root = loss.node();
  bool found = false;
  for (auto& r : records_) {
    if (r.output == root) found = true;
    if (!r.output->is_leaf) std::fill(r.output->grad.begin(), r.output->grad.end(), 0.0);
  }
  if (!found) throw std::logic_error("backward: loss was not produced on this tape");
  root->ensure_grad()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
}

void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void check_finite(const Tensor& t, std::string_view where) {
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      throw NumericError(std::string(where) + ": non-finite value " + std::to_string(d[i]) +
                         " at flat index " + std::to_string(i) + " of " +
                         to_string(t.shape()));
    }
  }
}

}  // namespace melt
