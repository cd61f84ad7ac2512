#pragma once

// Token mixers: scaled dot-product multi-head attention, its spatial-reduction
// variant (keys and values average-pooled on the token grid), and multi-head
// convolutional attention.

#include <cstddef>
#include <string>

#include "nlvt/layers.hpp"

namespace nlvt {

// Per-head softmax(Q K^T / sqrt(D_h)) V with heads concatenated back to width D.
// q: [B, N, D], k and v: [B, N', D]. When `probs` is non-null it receives the
// attention weights, shape [B, heads, N, N'].
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, Tensor<T>* probs = nullptr);

template <typename T>
struct Sdpa {
  Linear<T> w_q, w_k, w_v, w_o;
  std::size_t dim = 0, heads = 1;

  Sdpa() = default;
  Sdpa(std::size_t dim, std::size_t heads, Rng& rng);

  std::size_t head_dim() const { return dim / heads; }
  // x: [B, N, D] -> [B, N, D]
  Tensor<T> forward(const Tensor<T>& x, Tensor<T>* probs = nullptr) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct EMhsa {
  Linear<T> w_q, w_k, w_v, w_o;
  std::size_t dim = 0, heads = 1, pool_stride = 1;

  EMhsa() = default;
  EMhsa(std::size_t dim, std::size_t heads, std::size_t pool_stride, Rng& rng);

  std::size_t head_dim() const { return dim / heads; }
  // x: [B, N, D] with N = grid_h * grid_w; keys/values shrink to N / stride^2.
  Tensor<T> forward(const Tensor<T>& x, std::size_t grid_h, std::size_t grid_w,
                    Tensor<T>* probs = nullptr) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Mhca {
  // One group per head: each head's channel slice gets its own k x k inner product
  // over neighbouring positions.
  Conv2d<T> ca;
  BatchNorm2d<T> norm;
  bool use_norm = true;
  Activation activation = Activation::relu;
  Conv2d<T> projection;  // pointwise W^P mixing the heads
  std::size_t channels = 0, heads = 1;

  Mhca() = default;
  Mhca(std::size_t channels, std::size_t heads, std::size_t kernel, bool use_norm,
       Activation activation, Rng& rng);

  // [B, C, H, W] -> [B, C, H, W]
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(ParamList<T>& out, const std::string& prefix) const;
  void collect_buffers(ParamList<T>& out, const std::string& prefix) const;
};

}  // namespace nlvt
