#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nlvt/errors.hpp"

namespace nlvt {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Dense row-major tensor. Copies are shallow handles onto shared storage, the same
// way parameters are shared between a model and its optimizer; use clone() for a
// deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);
  explicit Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Only optimizers, initializers and loaders write through this.
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T operator[](std::size_t flat) const { return impl_->data[flat]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;
  Tensor detach() const { return clone(); }

  const ImplPtr& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  ImplPtr impl_;
};

// Append-only record of differentiable operations for one forward pass.
template <typename T>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;
  // Reads output->grad and accumulates into the captured inputs' grads.
  using BackwardFn = std::function<void(const TensorImpl<T>& output)>;

  void record(ImplPtr output, BackwardFn fn);
  // Populates grads of every requires_grad tensor reachable from `loss`.
  // A tape can be run backward once; reset() before recording the next pass.
  void backward(const Tensor<T>& loss);
  void reset();

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

 private:
  struct Node {
    ImplPtr output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

template <typename T>
inline thread_local Tape<T>* active_tape_ptr = nullptr;

template <typename T>
Tape<T>* active_tape() noexcept {
  return active_tape_ptr<T>;
}

// Makes `tape` the recording target for the current thread while in scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape_ptr<T>) { active_tape_ptr<T> = &tape; }
  ~TapeScope() { active_tape_ptr<T> = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording on the current thread while in scope.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape_ptr<T>) { active_tape_ptr<T> = nullptr; }
  ~NoGradScope() { active_tape_ptr<T> = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Backward over the thread's active tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) throw ContractError("backward: no active tape");
  tape->backward(loss);
}

// True when an op with these inputs must be recorded.
template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Marks `output` as differentiable and appends its backward rule to the active tape.
template <typename T>
void record_op(Tensor<T>& output, typename Tape<T>::BackwardFn fn) {
  output.set_requires_grad(true);
  active_tape<T>()->record(output.impl(), std::move(fn));
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace nlvt
