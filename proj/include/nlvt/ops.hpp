#pragma once

// Differentiable tensor operations. Each op records itself on the active tape
// when any input requires a gradient.

#include <cstddef>
#include <vector>

#include "nlvt/tensor.hpp"

namespace nlvt {

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

// Adds bias[C] broadcast along `axis` of x (shape[axis] == C).
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias, std::size_t axis);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);

// a: [..., M, K]. b: [K, N] (shared across a's leading dims) or [..., K, N] with
// leading dims equal to a's.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a);

// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);

// Throws NumericError naming `op` if any element is NaN or Inf.
template <typename T>
void check_finite(const Tensor<T>& t, const char* op);

}  // namespace nlvt
