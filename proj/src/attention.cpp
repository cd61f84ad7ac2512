#include "nlvt/attention.hpp"

#include <cmath>

#include "nlvt/ops.hpp"

namespace nlvt {

namespace {

void require_heads(std::size_t dim, std::size_t heads, const char* what) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError(std::string(what) + ": width " + std::to_string(dim) +
                      " is not divisible by head count " + std::to_string(heads));
  }
}

template <typename T>
void require_tokens(const Tensor<T>& x, std::size_t dim, const char* what) {
  if (x.rank() != 3 || x.dim(2) != dim) {
    throw ShapeError(std::string(what) + ": expected [B, N, " + std::to_string(dim) + "], got " +
                     shape_str(x.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, Tensor<T>* probs) {
  if (q.rank() != 3 || k.shape() != v.shape() || k.rank() != 3 || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2)) {
    throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                     shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const std::size_t batch = q.dim(0), n = q.dim(1), n_kv = k.dim(1), dim = q.dim(2);
  require_heads(dim, heads, "attention");
  const std::size_t dh = dim / heads;
  const Tensor<T> qh = permute(reshape(q, Shape{batch, n, heads, dh}), {0, 2, 1, 3});
  const Tensor<T> kt = permute(reshape(k, Shape{batch, n_kv, heads, dh}), {0, 2, 3, 1});
  const Tensor<T> vh = permute(reshape(v, Shape{batch, n_kv, heads, dh}), {0, 2, 1, 3});
  const Tensor<T> scores = scale(matmul(qh, kt), T(1) / std::sqrt(static_cast<T>(dh)));
  Tensor<T> weights = softmax(scores, 3);
  if (probs) *probs = weights;
  const Tensor<T> context = matmul(weights, vh);  // [B, h, N, D_h]
  return reshape(permute(context, {0, 2, 1, 3}), Shape{batch, n, dim});
}

template <typename T>
Sdpa<T>::Sdpa(std::size_t dim_, std::size_t heads_, Rng& rng) : dim(dim_), heads(heads_) {
  require_heads(dim, heads, "sdpa");
  w_q = Linear<T>(dim, dim, true, rng);
  w_k = Linear<T>(dim, dim, true, rng);
  w_v = Linear<T>(dim, dim, true, rng);
  w_o = Linear<T>(dim, dim, true, rng);
}

template <typename T>
Tensor<T> Sdpa<T>::forward(const Tensor<T>& x, Tensor<T>* probs) const {
  require_tokens(x, dim, "sdpa");
  const Tensor<T> q = w_q.forward(x);
  const Tensor<T> k = w_k.forward(x);
  const Tensor<T> v = w_v.forward(x);
  return w_o.forward(multi_head_attention(q, k, v, heads, probs));
}

template <typename T>
void Sdpa<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  w_q.collect(out, prefix + ".q");
  w_k.collect(out, prefix + ".k");
  w_v.collect(out, prefix + ".v");
  w_o.collect(out, prefix + ".o");
}

template <typename T>
EMhsa<T>::EMhsa(std::size_t dim_, std::size_t heads_, std::size_t stride, Rng& rng)
    : dim(dim_), heads(heads_), pool_stride(stride) {
  require_heads(dim, heads, "e-mhsa");
  if (pool_stride == 0) throw ConfigError("e-mhsa: pooling stride must be >= 1");
  w_q = Linear<T>(dim, dim, true, rng);
  w_k = Linear<T>(dim, dim, true, rng);
  w_v = Linear<T>(dim, dim, true, rng);
  w_o = Linear<T>(dim, dim, true, rng);
}

template <typename T>
Tensor<T> EMhsa<T>::forward(const Tensor<T>& x, std::size_t grid_h, std::size_t grid_w,
                            Tensor<T>* probs) const {
  require_tokens(x, dim, "e-mhsa");
  if (x.dim(1) != grid_h * grid_w) {
    throw ShapeError("e-mhsa: " + std::to_string(x.dim(1)) + " tokens do not form a " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
  if (grid_h % pool_stride != 0 || grid_w % pool_stride != 0) {
    throw ConfigError("e-mhsa: pooling stride " + std::to_string(pool_stride) +
                      " does not divide the " + std::to_string(grid_h) + "x" +
                      std::to_string(grid_w) + " token grid");
  }
  const Tensor<T> q = w_q.forward(x);
  Tensor<T> k = w_k.forward(x);
  Tensor<T> v = w_v.forward(x);
  if (pool_stride > 1) {
    k = grid_to_tokens(avg_pool2d(tokens_to_grid(k, grid_h, grid_w), pool_stride));
    v = grid_to_tokens(avg_pool2d(tokens_to_grid(v, grid_h, grid_w), pool_stride));
  }
  return w_o.forward(multi_head_attention(q, k, v, heads, probs));
}

template <typename T>
void EMhsa<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  w_q.collect(out, prefix + ".q");
  w_k.collect(out, prefix + ".k");
  w_v.collect(out, prefix + ".v");
  w_o.collect(out, prefix + ".o");
}

template <typename T>
Mhca<T>::Mhca(std::size_t channels_, std::size_t heads_, std::size_t kernel, bool use_norm_,
              Activation activation_, Rng& rng)
    : use_norm(use_norm_), activation(activation_), channels(channels_), heads(heads_) {
  require_heads(channels, heads, "mhca");
  if (kernel % 2 == 0) throw ConfigError("mhca: kernel size must be odd for same padding");
  ca = Conv2d<T>(channels, channels, kernel, 1, kernel / 2, heads, false, rng);
  if (use_norm) norm = BatchNorm2d<T>(channels);
  projection = Conv2d<T>(channels, channels, 1, 1, 0, 1, true, rng);
}

template <typename T>
Tensor<T> Mhca<T>::forward(const Tensor<T>& x, bool training) {
  if (x.rank() != 4 || x.dim(1) != channels) {
    throw ShapeError("mhca: expected [B, " + std::to_string(channels) + ", H, W], got " +
                     shape_str(x.shape()));
  }
  Tensor<T> h = ca.forward(x);
  if (use_norm) h = norm.forward(h, training);
  h = activate(h, activation);
  return projection.forward(h);
}

template <typename T>
void Mhca<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  ca.collect(out, prefix + ".ca");
  if (use_norm) norm.collect(out, prefix + ".norm");
  projection.collect(out, prefix + ".proj");
}

template <typename T>
void Mhca<T>::collect_buffers(ParamList<T>& out, const std::string& prefix) const {
  if (use_norm) norm.collect_buffers(out, prefix + ".norm");
}

#define NLVT_INSTANTIATE_ATTENTION(T)                                                         \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&,              \
                                             const Tensor<T>&, std::size_t, Tensor<T>*);      \
  template struct Sdpa<T>;                                                                    \
  template struct EMhsa<T>;                                                                   \
  template struct Mhca<T>;

NLVT_INSTANTIATE_ATTENTION(float)
NLVT_INSTANTIATE_ATTENTION(double)

#undef NLVT_INSTANTIATE_ATTENTION

}  // namespace nlvt
