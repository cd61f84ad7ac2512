#include "nlvt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "nlvt/kernels.hpp"

namespace nlvt {

namespace {

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Splits a shape around `axis` into (outer, axis length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape));
  }
}

template <typename T>
Tensor<T> elementwise_binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, int kind) {
  require_same_shape(a, b, op);
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = kind == 0 ? x[i] + y[i] : kind == 1 ? x[i] - y[i] : x[i] * y[i];
  }
  check_finite(out, op);
  if (should_record<T>({&a, &b})) {
    ImplPtr<T> ia = a.impl(), ib = b.impl();
    record_op(out, [ia, ib, kind](const TensorImpl<T>& res) {
      const auto& g = res.grad;
      if (ia->requires_grad) {
        auto ga = ia->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += kind == 2 ? g[i] * ib->data[i] : g[i];
      }
      if (ib->requires_grad) {
        auto gb = ib->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          gb[i] += kind == 0 ? g[i] : kind == 1 ? -g[i] : g[i] * ia->data[i];
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": produced a non-finite value (overflow)");
    }
  }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(a, b, "add", 0);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(a, b, "sub", 1);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise_binary(a, b, "mul", 2);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  check_finite(out, "scale");
  if (should_record<T>({&a})) {
    ImplPtr<T> ia = a.impl();
    record_op(out, [ia, factor](const TensorImpl<T>& res) {
      auto ga = ia->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += res.grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias, std::size_t axis) {
  require_axis(x.shape(), axis, "add_bias");
  const AxisSplit s = split_at(x.shape(), axis);
  if (bias.numel() != s.length) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  auto bv = bias.data();
  for (std::size_t p = 0; p < s.outer; ++p) {
    for (std::size_t c = 0; c < s.length; ++c) {
      const std::size_t base = (p * s.length + c) * s.inner;
      for (std::size_t q = 0; q < s.inner; ++q) o[base + q] = in[base + q] + bv[c];
    }
  }
  check_finite(out, "add_bias");
  if (should_record<T>({&x, &bias})) {
    ImplPtr<T> ix = x.impl(), ibias = bias.impl();
    record_op(out, [ix, ibias, s](const TensorImpl<T>& res) {
      const auto& g = res.grad;
      if (ix->requires_grad) {
        auto gx = ix->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (ibias->requires_grad) {
        auto gb = ibias->ensure_grad();
        for (std::size_t p = 0; p < s.outer; ++p) {
          for (std::size_t c = 0; c < s.length; ++c) {
            const std::size_t base = (p * s.length + c) * s.inner;
            T acc = 0;
            for (std::size_t q = 0; q < s.inner; ++q) acc += g[base + q];
            gb[c] += acc;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  check_finite(out, "sum");
  if (should_record<T>({&a})) {
    ImplPtr<T> ia = a.impl();
    record_op(out, [ia](const TensorImpl<T>& res) {
      auto ga = ia->ensure_grad();
      for (T& g : ga) g += res.grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
  const bool shared_b = b.rank() == 2;
  bool ok = k == kb;
  if (!shared_b) {
    ok = ok && a.rank() == b.rank() &&
         std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin());
  }
  if (!ok) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<T> out(out_shape);
  const kernels::GemmShape fwd{m, n, k, false, false, false};
  for (std::size_t i = 0; i < batch; ++i) {
    kernels::gemm_omp<T>(fwd, a.data().subspan(i * m * k, m * k),
                         shared_b ? b.data() : b.data().subspan(i * k * n, k * n),
                         out.mutable_data().subspan(i * m * n, m * n));
  }
  check_finite(out, "matmul");
  if (should_record<T>({&a, &b})) {
    ImplPtr<T> ia = a.impl(), ib = b.impl();
    record_op(out, [ia, ib, m, n, k, batch, shared_b](const TensorImpl<T>& res) {
      std::span<const T> g = res.grad;
      std::span<const T> av = ia->data, bv = ib->data;
      if (ia->requires_grad) {
        auto ga = ia->ensure_grad();
        // dA = dC * B^T
        const kernels::GemmShape s{m, k, n, false, true, true};
        for (std::size_t i = 0; i < batch; ++i) {
          kernels::gemm_omp<T>(s, g.subspan(i * m * n, m * n),
                               shared_b ? bv : bv.subspan(i * k * n, k * n),
                               ga.subspan(i * m * k, m * k));
        }
      }
      if (ib->requires_grad) {
        auto gb = ib->ensure_grad();
        // dB = A^T * dC, summed over the batch when B is shared.
        const kernels::GemmShape s{k, n, m, true, false, true};
        for (std::size_t i = 0; i < batch; ++i) {
          kernels::gemm_omp<T>(s, av.subspan(i * m * k, m * k), g.subspan(i * m * n, m * n),
                               shared_b ? gb : gb.subspan(i * k * n, k * n));
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last2: rank < 2 for " + shape_str(a.shape()));
  std::vector<std::size_t> order(a.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::swap(order[a.rank() - 2], order[a.rank() - 1]);
  return permute(a, order);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  require_axis(x.shape(), axis, "softmax");
  const AxisSplit s = split_at(x.shape(), axis);
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t p = 0; p < s.outer; ++p) {
    for (std::size_t q = 0; q < s.inner; ++q) {
      const std::size_t base = p * s.length * s.inner + q;
      T mx = in[base];
      for (std::size_t c = 1; c < s.length; ++c) mx = std::max(mx, in[base + c * s.inner]);
      T total = 0;
      for (std::size_t c = 0; c < s.length; ++c) {
        const T e = std::exp(in[base + c * s.inner] - mx);
        o[base + c * s.inner] = e;
        total += e;
      }
      for (std::size_t c = 0; c < s.length; ++c) o[base + c * s.inner] /= total;
    }
  }
  check_finite(out, "softmax");
  if (should_record<T>({&x})) {
    ImplPtr<T> ix = x.impl();
    record_op(out, [ix, s](const TensorImpl<T>& res) {
      auto gx = ix->ensure_grad();
      const auto& y = res.data;
      const auto& g = res.grad;
      for (std::size_t p = 0; p < s.outer; ++p) {
        for (std::size_t q = 0; q < s.inner; ++q) {
          const std::size_t base = p * s.length * s.inner + q;
          T dot = 0;
          for (std::size_t c = 0; c < s.length; ++c) {
            dot += g[base + c * s.inner] * y[base + c * s.inner];
          }
          for (std::size_t c = 0; c < s.length; ++c) {
            const std::size_t i = base + c * s.inner;
            gx[i] += y[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > T(0) ? in[i] : T(0);
  if (should_record<T>({&x})) {
    ImplPtr<T> ix = x.impl();
    record_op(out, [ix](const TensorImpl<T>& res) {
      auto gx = ix->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (ix->data[i] > T(0)) gx[i] += res.grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  Tensor<T> out(x.shape());
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = T(0.5) * in[i] * (T(1) + std::erf(in[i] * inv_sqrt2));
  }
  if (should_record<T>({&x})) {
    ImplPtr<T> ix = x.impl();
    record_op(out, [ix, inv_sqrt2](const TensorImpl<T>& res) {
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      auto gx = ix->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = ix->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += res.grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (should_record<T>({&x})) {
    ImplPtr<T> ix = x.impl();
    record_op(out, [ix](const TensorImpl<T>& res) {
      auto gx = ix->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += res.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  std::vector<std::size_t> seen(rank, 0);
  bool valid = order.size() == rank;
  for (std::size_t ax : order) {
    if (!valid || ax >= rank || seen[ax]++) valid = false;
  }
  if (!valid) throw ShapeError("permute: invalid axis order for " + shape_str(x.shape()));

  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(order[i]);
  // src_strides[i]: input stride of the axis that lands at output position i.
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) src_strides[i] = in_strides[order[i]];

  // index_map[out_flat] = in_flat
  std::vector<std::size_t> index_map(x.numel());
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < index_map.size(); ++flat) {
    index_map[flat] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += src_strides[ax];
        break;
      }
      src -= src_strides[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }

  Tensor<T> out(out_shape);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[index_map[i]];
  if (should_record<T>({&x})) {
    ImplPtr<T> ix = x.impl();
    record_op(out, [ix, map = std::move(index_map)](const TensorImpl<T>& res) {
      auto gx = ix->ensure_grad();
      for (std::size_t i = 0; i < map.size(); ++i) gx[map[i]] += res.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  require_axis(first, axis, "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i) {
      if (i != axis && p.dim(i) != first[i]) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += p.dim(axis);
  }
  const AxisSplit s = split_at(out_shape, axis);
  Tensor<T> out(out_shape);
  auto o = out.mutable_data();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    auto in = p.data();
    for (std::size_t q = 0; q < s.outer; ++q) {
      std::copy_n(in.begin() + q * len * s.inner, len * s.inner,
                  o.begin() + (q * s.length + offset) * s.inner);
    }
    offset += len;
  }
  bool record = false;
  for (const auto& p : parts) record = record || should_record<T>({&p});
  if (record) {
    std::vector<ImplPtr<T>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    record_op(out, [impls, offsets, s](const TensorImpl<T>& res) {
      for (std::size_t k = 0; k < impls.size(); ++k) {
        if (!impls[k]->requires_grad) continue;
        auto gp = impls[k]->ensure_grad();
        const std::size_t len = impls[k]->data.size() / (s.outer * s.inner);
        for (std::size_t q = 0; q < s.outer; ++q) {
          const std::size_t dst = q * len * s.inner;
          const std::size_t src = (q * s.length + offsets[k]) * s.inner;
          for (std::size_t i = 0; i < len * s.inner; ++i) gp[dst + i] += res.grad[src + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_axis(x.shape(), axis, "slice");
  if (length == 0 || start + length > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") outside axis " + std::to_string(axis) +
                     " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t q = 0; q < s.outer; ++q) {
    std::copy_n(in.begin() + (q * s.length + start) * s.inner, length * s.inner,
                o.begin() + q * length * s.inner);
  }
  if (should_record<T>({&x})) {
    ImplPtr<T> ix = x.impl();
    record_op(out, [ix, s, start, length](const TensorImpl<T>& res) {
      auto gx = ix->ensure_grad();
      for (std::size_t q = 0; q < s.outer; ++q) {
        const std::size_t dst = (q * s.length + start) * s.inner;
        const std::size_t src = q * length * s.inner;
        for (std::size_t i = 0; i < length * s.inner; ++i) gx[dst + i] += res.grad[src + i];
      }
    });
  }
  return out;
}

#define NLVT_INSTANTIATE_OPS(T)                                                         \
  template void check_finite<T>(const Tensor<T>&, const char*);                         \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                     \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&, std::size_t);      \
  template Tensor<T> sum<T>(const Tensor<T>&);                                          \
  template Tensor<T> mean<T>(const Tensor<T>&);                                         \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> transpose_last2<T>(const Tensor<T>&);                              \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                         \
  template Tensor<T> relu<T>(const Tensor<T>&);                                         \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                         \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                               \
  template Tensor<T> permute<T>(const Tensor<T>&, const std::vector<std::size_t>&);     \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);             \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);

NLVT_INSTANTIATE_OPS(float)
NLVT_INSTANTIATE_OPS(double)

#undef NLVT_INSTANTIATE_OPS

}  // namespace nlvt
