#include "ipslt/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace ipslt {

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t checked_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) {
      throw ShapeError("tensor: non-positive dimension in " +
                       shape_string(shape));
    }
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

template <typename Real>
Tensor<Real>::Tensor(std::vector<int> shape, bool requires_grad) {
  std::size_t n = checked_numel(shape);
  node_ = std::make_shared<TensorNode<Real>>();
  node_->shape = std::move(shape);
  node_->value.assign(n, Real(0));
  node_->requires_grad = requires_grad;
}

template <typename Real>
Tensor<Real>::Tensor(std::vector<int> shape, std::vector<Real> values,
                     bool requires_grad) {
  std::size_t n = checked_numel(shape);
  if (values.size() != n) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_string(shape));
  }
  node_ = std::make_shared<TensorNode<Real>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Real>
Tensor<Real> Tensor<Real>::zeros(std::vector<int> shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::full(std::vector<int> shape, Real fill,
                                bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  for (auto& v : t.values()) v = fill;
  return t;
}

template <typename Real>
Tensor<Real> Tensor<Real>::scalar(Real v) {
  Tensor t({1});
  t.values()[0] = v;
  return t;
}

template <typename Real>
std::vector<Real>& Tensor<Real>::grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), Real(0));
  return node_->grad;
}

template <typename Real>
const std::vector<Real>& Tensor<Real>::grad() const {
  if (node_->grad.empty()) {
    throw UsageError("tensor: gradient read before any backward pass");
  }
  return node_->grad;
}

template <typename Real>
void Tensor<Real>::zero_grad() {
  if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), Real(0));
}

template <typename Real>
Real& Tensor<Real>::at(int i, int j) {
  return node_->value[static_cast<std::size_t>(i) * dim(ndim() - 1) + j];
}

template <typename Real>
Real Tensor<Real>::at(int i, int j) const {
  return node_->value[static_cast<std::size_t>(i) * dim(ndim() - 1) + j];
}

template <typename Real>
Real Tensor<Real>::scalar_value() const {
  if (size() != 1) {
    throw UsageError("tensor: scalar_value on non-scalar " + shape_str());
  }
  return node_->value[0];
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const {
  Tensor copy(node_->shape, node_->value, false);
  return copy;
}

template <typename Real>
Tensor<Real> Tensor<Real>::clone() const {
  Tensor copy(node_->shape, node_->value, node_->requires_grad);
  return copy;
}

template <typename Real>
void Tape<Real>::backward(Tensor<Real>& loss) {
  if (loss.size() != 1) {
    throw UsageError("backward: loss must be a scalar, got " +
                     loss.shape_str());
  }
  loss.grad()[0] = Real(1);
  for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
}

template <typename Real>
Real checked_finite(Real v, const char* what) {
  if (!std::isfinite(v)) {
    throw NumericError(std::string(what) + ": non-finite value");
  }
  return v;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template float checked_finite<float>(float, const char*);
template double checked_finite<double>(double, const char*);

}  // namespace ipslt
