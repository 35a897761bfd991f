#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ipslt/errors.hpp"

namespace ipslt {

template <typename Real>
struct TensorNode {
  std::vector<int> shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until the tensor joins a recorded op
  bool requires_grad = false;
};

std::string shape_string(const std::vector<int>& shape);

// Dense row-major tensor with shared storage. Copies of a Tensor alias the
// same buffer; clone() and detach() make independent copies.
template <typename Real>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, bool requires_grad = false);
  Tensor(std::vector<int> shape, std::vector<Real> values,
         bool requires_grad = false);

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, Real fill,
                     bool requires_grad = false);
  static Tensor scalar(Real v);

  bool defined() const { return static_cast<bool>(node_); }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return node_->value.size(); }
  std::string shape_str() const { return shape_string(node_->shape); }

  std::vector<Real>& values() { return node_->value; }
  const std::vector<Real>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  // Allocates the gradient buffer (zero-filled) on first use.
  std::vector<Real>& grad();
  const std::vector<Real>& grad() const;
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad();

  Real& at(int i) { return node_->value[static_cast<std::size_t>(i)]; }
  Real at(int i) const { return node_->value[static_cast<std::size_t>(i)]; }
  Real& at(int i, int j);
  Real at(int i, int j) const;

  // The single element of a scalar tensor.
  Real scalar_value() const;

  // Independent copy of the values, cut off from any gradient flow.
  Tensor detach() const;
  // Independent copy preserving requires_grad.
  Tensor clone() const;

  std::shared_ptr<TensorNode<Real>> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<Real>> node_;
};

// Records the gradient rule of every operation in execution order. The
// recording order is a topological order of the graph, so replaying the
// rules back to front propagates d(loss)/d(input) to every input.
template <typename Real>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { rules_.push_back(std::move(fn)); }
  std::size_t size() const { return rules_.size(); }
  void clear() { rules_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays all recorded rules in reverse.
  void backward(Tensor<Real>& loss);

 private:
  std::vector<BackwardFn> rules_;
};

template <typename Real>
Real checked_finite(Real v, const char* what);

}  // namespace ipslt
