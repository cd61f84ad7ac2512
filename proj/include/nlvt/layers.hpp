#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "nlvt/tensor.hpp"

namespace nlvt {

using Rng = std::mt19937_64;

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

enum class Activation { identity, relu, gelu };

const char* activation_name(Activation a);
Activation parse_activation(const std::string& name);

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation a);

// --- functional forms -------------------------------------------------------

// x: [B, C_in, H, W]; weight: [C_out, C_in/groups, k, k]; bias: [C_out] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding, std::size_t groups);

// x: [..., D_in]; weight: [D_in, D_out]; bias: [D_out] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps);

// Per-channel normalization of [B, C, H, W]. In training mode uses batch statistics
// and updates running_mean/running_var in place (unbiased variance, PyTorch-style
// momentum); otherwise normalizes with the running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, T eps, T momentum,
                     bool training);

// [B, C, H, W] -> [B, C, ceil(H/s), ceil(W/s)]; windows of size s with stride s.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t stride);

// [B, C, H, W] -> [B, C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

// [B, C, H, W] <-> [B, H*W, C]
template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& x);
template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& x, std::size_t height, std::size_t width);

// --- parametric layers ------------------------------------------------------

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [C_out, C_in/groups, k, k]
  Tensor<T> bias;    // [C_out], undefined when the layer has no bias
  std::size_t in_channels = 0, out_channels = 0, kernel = 1, stride = 1, padding = 0, groups = 1;

  Conv2d() = default;
  // Fan-in scaled uniform initialization.
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
         std::size_t padding, std::size_t groups, bool with_bias, Rng& rng);

  bool has_bias() const { return bias.defined(); }
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [D_in, D_out]
  Tensor<T> bias;    // [D_out]
  std::size_t in_features = 0, out_features = 0;

  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, bool with_bias, Rng& rng);

  bool has_bias() const { return bias.defined(); }
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;
  T eps = T(1e-5);

  LayerNorm() = default;
  explicit LayerNorm(std::size_t features);
  std::size_t features() const { return gamma.numel(); }
  Tensor<T> forward(const Tensor<T>& x) const;
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);
  std::size_t channels() const { return gamma.numel(); }
  Tensor<T> forward(const Tensor<T>& x, bool training);
  void collect(ParamList<T>& out, const std::string& prefix) const;
  void collect_buffers(ParamList<T>& out, const std::string& prefix) const;
};

}  // namespace nlvt
