#include "nlvt/layers.hpp"

#include <cmath>
#include <string>

#include "nlvt/kernels.hpp"
#include "nlvt/ops.hpp"

namespace nlvt {

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
Tensor<T> uniform_tensor(Shape shape, T bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound),
                                              static_cast<double>(bound));
  for (T& v : t.mutable_data()) v = static_cast<T>(dist(rng));
  return t;
}

void require_rank(const Shape& shape, std::size_t rank, const char* op) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(shape));
  }
}

}  // namespace

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw ConfigError("unknown activation '" + name + "'");
}

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation a) {
  switch (a) {
    case Activation::relu: return relu(x);
    case Activation::gelu: return gelu(x);
    case Activation::identity: break;
  }
  return x;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding, std::size_t groups) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel = weight.dim(2);
  g.stride = stride;
  g.padding = padding;
  g.groups = groups;
  const auto mismatch = [&](const std::string& why) {
    return ShapeError("conv2d: " + why + " (input " + shape_str(x.shape()) + ", weight " +
                      shape_str(weight.shape()) + ", stride " + std::to_string(stride) +
                      ", padding " + std::to_string(padding) + ", groups " +
                      std::to_string(groups) + ")");
  };
  if (groups == 0 || stride == 0) throw mismatch("stride and groups must be positive");
  if (weight.dim(2) != weight.dim(3)) throw mismatch("kernel must be square");
  if (g.in_channels % groups != 0 || g.out_channels % groups != 0) {
    throw mismatch("channels not divisible by groups");
  }
  if (weight.dim(1) * groups != g.in_channels) throw mismatch("input channels do not match weight");
  if (bias.defined() && bias.numel() != g.out_channels) throw mismatch("bias length mismatch");
  const std::size_t span_h = g.in_h + 2 * padding, span_w = g.in_w + 2 * padding;
  if (span_h < g.kernel || span_w < g.kernel || (span_h - g.kernel) % stride != 0 ||
      (span_w - g.kernel) % stride != 0) {
    throw mismatch("output size (H + 2*pad - k)/stride + 1 is not integral");
  }

  Tensor<T> out(Shape{g.batch, g.out_channels, g.out_h(), g.out_w()});
  const std::span<const T> no_bias;
  kernels::conv2d_forward_omp<T>(g, x.data(), weight.data(), bias.defined() ? bias.data() : no_bias,
                                 out.mutable_data());
  check_finite(out, "conv2d");
  const bool has_bias = bias.defined();
  bool record = should_record<T>({&x, &weight});
  if (has_bias) record = record || should_record<T>({&bias});
  if (record) {
    ImplPtr<T> ix = x.impl(), iw = weight.impl();
    ImplPtr<T> ib = has_bias ? bias.impl() : nullptr;
    record_op(out, [ix, iw, ib, g](const TensorImpl<T>& res) {
      std::span<T> dx, dw, db;
      if (ix->requires_grad) dx = ix->ensure_grad();
      if (iw->requires_grad) dw = iw->ensure_grad();
      if (ib && ib->requires_grad) db = ib->ensure_grad();
      kernels::conv2d_backward_omp<T>(g, ix->data, iw->data, res.grad, dx, dw, db);
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.dim(x.rank() - 1) != weight.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t d_in = weight.dim(0);
  const std::size_t rows = x.numel() / d_in;
  // Flatten leading dims so the product is one [rows, D_in] x [D_in, D_out] GEMM.
  Tensor<T> flat = x.rank() == 2 ? x : reshape(x, Shape{rows, d_in});
  Tensor<T> y = matmul(flat, weight);
  if (bias.defined()) y = add_bias(y, bias, 1);
  if (x.rank() == 2) return y;
  Shape out_shape = x.shape();
  out_shape.back() = weight.dim(1);
  return reshape(y, out_shape);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: affine params of length " + std::to_string(gamma.numel()) +
                     " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel()), inv_std(rows);
  auto in = x.data();
  auto o = out.mutable_data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (row[i] - mu) * is;
      xhat[r * d + i] = h;
      o[r * d + i] = gv[i] * h + bv[i];
    }
  }
  check_finite(out, "layer_norm");
  if (should_record<T>({&x, &gamma, &beta})) {
    ImplPtr<T> ix = x.impl(), ig = gamma.impl(), ibeta = beta.impl();
    record_op(out, [ix, ig, ibeta, xhat = std::move(xhat), inv_std = std::move(inv_std), d,
                    rows](const TensorImpl<T>& res) {
      const auto& g = res.grad;
      if (ig->requires_grad || ibeta->requires_grad) {
        auto gg = ig->ensure_grad();
        auto gb = ibeta->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < d; ++i) {
            gg[i] += g[r * d + i] * xhat[r * d + i];
            gb[i] += g[r * d + i];
          }
        }
      }
      if (!ix->requires_grad) return;
      auto gx = ix->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_g = 0, mean_gh = 0;
        for (std::size_t i = 0; i < d; ++i) {
          const T gh = g[r * d + i] * ig->data[i];
          mean_g += gh;
          mean_gh += gh * xhat[r * d + i];
        }
        mean_g /= static_cast<T>(d);
        mean_gh /= static_cast<T>(d);
        for (std::size_t i = 0; i < d; ++i) {
          const T gh = g[r * d + i] * ig->data[i];
          gx[r * d + i] += inv_std[r] * (gh - mean_g - xhat[r * d + i] * mean_gh);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, T eps, T momentum,
                     bool training) {
  require_rank(x.shape(), 4, "batch_norm");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.numel() != channels || beta.numel() != channels ||
      running_mean.numel() != channels || running_var.numel() != channels) {
    throw ShapeError("batch_norm: parameters of length " + std::to_string(gamma.numel()) +
                     " do not match channels of " + shape_str(x.shape()));
  }
  const std::size_t count = batch * plane;
  std::vector<T> mean_c(channels), inv_std(channels);
  auto in = x.data();
  if (training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < channels; ++c) {
      T mu = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = in.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) mu += p[i];
      }
      mu /= static_cast<T>(count);
      T var = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = in.data() + (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
      }
      const T biased = var / static_cast<T>(count);
      const T unbiased = count > 1 ? var / static_cast<T>(count - 1) : biased;
      mean_c[c] = mu;
      inv_std[c] = T(1) / std::sqrt(biased + eps);
      rm[c] = (T(1) - momentum) * rm[c] + momentum * mu;
      rv[c] = (T(1) - momentum) * rv[c] + momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean_c[c] = running_mean[c];
      inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }

  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * plane;
      const T gc = gamma[c], bc = beta[c];
      for (std::size_t i = 0; i < plane; ++i) {
        const T h = (in[base + i] - mean_c[c]) * inv_std[c];
        xhat[base + i] = h;
        o[base + i] = gc * h + bc;
      }
    }
  }
  check_finite(out, "batch_norm");
  if (should_record<T>({&x, &gamma, &beta})) {
    ImplPtr<T> ix = x.impl(), ig = gamma.impl(), ibeta = beta.impl();
    record_op(out, [ix, ig, ibeta, xhat = std::move(xhat), inv_std = std::move(inv_std), batch,
                    channels, plane, training](const TensorImpl<T>& res) {
      const auto& g = res.grad;
      const T n = static_cast<T>(batch * plane);
      for (std::size_t c = 0; c < channels; ++c) {
        T sum_g = 0, sum_gh = 0;
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = (b * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_g += g[base + i];
            sum_gh += g[base + i] * xhat[base + i];
          }
        }
        if (ig->requires_grad) ig->ensure_grad()[c] += sum_gh;
        if (ibeta->requires_grad) ibeta->ensure_grad()[c] += sum_g;
        if (!ix->requires_grad) continue;
        auto gx = ix->ensure_grad();
        const T scale_c = ig->data[c] * inv_std[c];
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t base = (b * channels + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            gx[base + i] += training
                                ? scale_c * (g[base + i] - sum_g / n - xhat[base + i] * sum_gh / n)
                                : scale_c * g[base + i];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t stride) {
  require_rank(x.shape(), 4, "avg_pool2d");
  if (stride == 0) throw ShapeError("avg_pool2d: stride must be >= 1");
  if (stride == 1) return x;
  kernels::PoolGeometry g{x.dim(0) * x.dim(1), x.dim(2), x.dim(3), stride};
  Tensor<T> out(Shape{x.dim(0), x.dim(1), g.out_h(), g.out_w()});
  kernels::avg_pool2d_forward<T>(g, x.data(), out.mutable_data());
  if (should_record<T>({&x})) {
    ImplPtr<T> ix = x.impl();
    record_op(out, [ix, g](const TensorImpl<T>& res) {
      kernels::avg_pool2d_backward<T>(g, res.grad, ix->ensure_grad());
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t planes = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{x.dim(0), x.dim(1)});
  auto in = x.data();
  auto o = out.mutable_data();
  for (std::size_t p = 0; p < planes; ++p) {
    T s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += in[p * plane + i];
    o[p] = s / static_cast<T>(plane);
  }
  if (should_record<T>({&x})) {
    ImplPtr<T> ix = x.impl();
    record_op(out, [ix, planes, plane](const TensorImpl<T>& res) {
      auto gx = ix->ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        const T share = res.grad[p] / static_cast<T>(plane);
        for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] += share;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> grid_to_tokens(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "grid_to_tokens");
  const std::size_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  return reshape(permute(x, {0, 2, 3, 1}), Shape{b, h * w, c});
}

template <typename T>
Tensor<T> tokens_to_grid(const Tensor<T>& x, std::size_t height, std::size_t width) {
  require_rank(x.shape(), 3, "tokens_to_grid");
  if (x.dim(1) != height * width) {
    throw ShapeError("tokens_to_grid: " + std::to_string(x.dim(1)) + " tokens do not form a " +
                     std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  const std::size_t b = x.dim(0), c = x.dim(2);
  return permute(reshape(x, Shape{b, height, width, c}), {0, 3, 1, 2});
}

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride_,
                  std::size_t padding_, std::size_t groups_, bool with_bias, Rng& rng)
    : in_channels(in_ch),
      out_channels(out_ch),
      kernel(k),
      stride(stride_),
      padding(padding_),
      groups(groups_) {
  if (groups == 0 || in_ch % groups != 0 || out_ch % groups != 0) {
    throw ConfigError("conv2d: channels " + std::to_string(in_ch) + "->" + std::to_string(out_ch) +
                      " not divisible by groups " + std::to_string(groups));
  }
  const std::size_t fan_in = (in_ch / groups) * k * k;
  const T bound = T(1) / std::sqrt(static_cast<T>(fan_in));
  weight = uniform_tensor<T>(Shape{out_ch, in_ch / groups, k, k}, bound, rng);
  weight.set_requires_grad(true);
  if (with_bias) {
    bias = uniform_tensor<T>(Shape{out_ch}, bound, rng);
    bias.set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return conv2d(x, weight, bias, stride, padding, groups);
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (has_bias()) out.push_back({prefix + ".bias", bias});
}

template <typename T>
Linear<T>::Linear(std::size_t in_f, std::size_t out_f, bool with_bias, Rng& rng)
    : in_features(in_f), out_features(out_f) {
  const T bound = T(1) / std::sqrt(static_cast<T>(in_f));
  weight = uniform_tensor<T>(Shape{in_f, out_f}, bound, rng);
  weight.set_requires_grad(true);
  if (with_bias) {
    bias = uniform_tensor<T>(Shape{out_f}, bound, rng);
    bias.set_requires_grad(true);
  }
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return linear(x, weight, bias);
}

template <typename T>
void Linear<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (has_bias()) out.push_back({prefix + ".bias", bias});
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t features)
    : gamma(Shape{features}, T(1)), beta(Shape{features}, T(0)) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) const {
  return layer_norm(x, gamma, beta, eps);
}

template <typename T>
void LayerNorm<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels)
    : gamma(Shape{channels}, T(1)),
      beta(Shape{channels}, T(0)),
      running_mean(Shape{channels}, T(0)),
      running_var(Shape{channels}, T(1)) {
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, bool training) {
  return batch_norm(x, gamma, beta, running_mean, running_var, eps, momentum, training);
}

template <typename T>
void BatchNorm2d<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

template <typename T>
void BatchNorm2d<T>::collect_buffers(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".running_mean", running_mean});
  out.push_back({prefix + ".running_var", running_var});
}

#define NLVT_INSTANTIATE_LAYERS(T)                                                                \
  template Tensor<T> activate<T>(const Tensor<T>&, Activation);                                   \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                               std::size_t, std::size_t);                                          \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                   Tensor<T>&, Tensor<T>&, T, T, bool);                            \
  template Tensor<T> avg_pool2d<T>(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                        \
  template Tensor<T> grid_to_tokens<T>(const Tensor<T>&);                                         \
  template Tensor<T> tokens_to_grid<T>(const Tensor<T>&, std::size_t, std::size_t);               \
  template struct Conv2d<T>;                                                                      \
  template struct Linear<T>;                                                                      \
  template struct LayerNorm<T>;                                                                   \
  template struct BatchNorm2d<T>;

NLVT_INSTANTIATE_LAYERS(float)
NLVT_INSTANTIATE_LAYERS(double)

#undef NLVT_INSTANTIATE_LAYERS

}  // namespace nlvt
