#include "nlvt/tensor.hpp"

#include <sstream>

namespace nlvt {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

namespace {

void check_dims(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be >= 1, got " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<TensorImpl<T>>()) {
  check_dims(shape);
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<TensorImpl<T>>()) {
  check_dims(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                     " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(impl_->shape, impl_->data);
}

template <typename T>
void Tape<T>::record(ImplPtr output, BackwardFn fn) {
  if (consumed_) throw ContractError("tape already consumed by backward; reset() before recording");
  nodes_.push_back(Node{std::move(output), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) {
    throw ContractError("backward called twice on the same tape; re-run the forward pass");
  }
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not connected to any differentiable input");
  }
  consumed_ = true;
  loss.impl()->ensure_grad()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // unreachable from loss
    it->backward(*it->output);
  }
  nodes_.clear();
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  consumed_ = false;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace nlvt
