#pragma once

// Independent reference implementations for the test suites. Everything here is
// written with plain loops over the raw buffers and never calls a library op, so
// agreement with the library is a genuine cross-check.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "nlvt/blocks.hpp"

namespace oracle {

using nlvt::Shape;
using D = nlvt::Tensor<double>;

inline D random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  D t(std::move(shape));
  for (double& v : t.mutable_data()) v = dist(rng);
  return t;
}

inline double max_abs_diff(const D& a, const D& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Zero-padded cross-correlation, seven nested loops.
inline D conv2d(const D& x, const D& w, const D& bias, std::size_t stride, std::size_t pad,
                std::size_t groups) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), Cg = w.dim(1), K = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  const std::size_t cog = Co / groups;
  D y({B, Co, Ho, Wo});
  auto out = y.mutable_data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double s = bias.defined() ? bias[co] : 0.0;
          const std::size_t g = co / cog;
          for (std::size_t ci = 0; ci < Cg; ++ci)
            for (std::size_t u = 0; u < K; ++u)
              for (std::size_t v = 0; v < K; ++v) {
                const long r = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                const long c = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                if (r < 0 || c < 0 || r >= static_cast<long>(H) || c >= static_cast<long>(W)) continue;
                const std::size_t cin = g * Cg + ci;
                s += x[((b * C + cin) * H + r) * W + c] * w[((co * Cg + ci) * K + u) * K + v];
              }
          out[((b * Co + co) * Ho + i) * Wo + j] = s;
        }
  (void)C;
  return y;
}

// Mean over each s x s window, restricted to in-bounds cells.
inline D avg_pool(const D& x, std::size_t s) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Ho = (H + s - 1) / s, Wo = (W + s - 1) / s;
  D y({B, C, Ho, Wo});
  auto out = y.mutable_data();
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t r = i * s; r < std::min(H, i * s + s); ++r)
          for (std::size_t c = j * s; c < std::min(W, j * s + s); ++c) {
            sum += x[(p * H + r) * W + c];
            ++n;
          }
        out[(p * Ho + i) * Wo + j] = sum / static_cast<double>(n);
      }
  return y;
}

inline D matmul(const D& a, const D& b) {
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  D c({M, N});
  auto out = c.mutable_data();
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += a[i * K + k] * b[k * N + j];
      out[i * N + j] = s;
    }
  return c;
}

// x: [..., Din], W: [Din, Dout].
inline D linear(const D& x, const D& w, const D& b) {
  const std::size_t din = w.dim(0), dout = w.dim(1), rows = x.numel() / din;
  Shape shape = x.shape();
  shape.back() = dout;
  D y(shape);
  auto out = y.mutable_data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < dout; ++o) {
      double s = b.defined() ? b[o] : 0.0;
      for (std::size_t i = 0; i < din; ++i) s += x[r * din + i] * w[i * dout + o];
      out[r * dout + o] = s;
    }
  return y;
}

inline D layer_norm(const D& x, const D& gamma, const D& beta, double eps) {
  const std::size_t d = x.shape().back(), rows = x.numel() / d;
  D y(x.shape());
  auto out = y.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += x[r * d + i];
    mu /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) var += (x[r * d + i] - mu) * (x[r * d + i] - mu);
    var /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      out[r * d + i] = (x[r * d + i] - mu) / std::sqrt(var + eps) * gamma[i] + beta[i];
    }
  }
  return y;
}

// Batch statistics (biased variance) in training mode, running statistics otherwise.
inline D batch_norm(const D& x, const nlvt::BatchNorm2d<double>& bn, bool training) {
  const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  D y(x.shape());
  auto out = y.mutable_data();
  for (std::size_t c = 0; c < C; ++c) {
    double mu = bn.running_mean[c], var = bn.running_var[c];
    if (training) {
      mu = 0.0;
      var = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < P; ++i) mu += x[(b * C + c) * P + i];
      mu /= static_cast<double>(B * P);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < P; ++i) {
          const double d = x[(b * C + c) * P + i] - mu;
          var += d * d;
        }
      var /= static_cast<double>(B * P);
    }
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < P; ++i) {
        const std::size_t k = (b * C + c) * P + i;
        out[k] = (x[k] - mu) / std::sqrt(var + bn.eps) * bn.gamma[c] + bn.beta[c];
      }
  }
  return y;
}

inline D activate(const D& x, nlvt::Activation a) {
  D y(x.shape());
  auto out = y.mutable_data();
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x[i];
    switch (a) {
      case nlvt::Activation::identity: out[i] = v; break;
      case nlvt::Activation::relu: out[i] = v > 0.0 ? v : 0.0; break;
      case nlvt::Activation::gelu: out[i] = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); break;
    }
  }
  return y;
}

inline D add(const D& a, const D& b) {
  D y(a.shape());
  auto out = y.mutable_data();
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return y;
}

// [B, C, H, W] -> [B, H*W, C]
inline D to_tokens(const D& x) {
  const std::size_t B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  D y({B, P, C});
  auto out = y.mutable_data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) out[(b * P + p) * C + c] = x[(b * C + c) * P + p];
  return y;
}

inline D to_grid(const D& t, std::size_t H, std::size_t W) {
  const std::size_t B = t.dim(0), P = t.dim(1), C = t.dim(2);
  D y({B, C, H, W});
  auto out = y.mutable_data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) out[(b * C + c) * P + p] = t[(b * P + p) * C + c];
  return y;
}

inline D concat_channels(const D& a, const D& b) {
  const std::size_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), P = a.dim(2) * a.dim(3);
  D y({B, Ca + Cb, a.dim(2), a.dim(3)});
  auto out = y.mutable_data();
  for (std::size_t n = 0; n < B; ++n) {
    for (std::size_t i = 0; i < Ca * P; ++i) out[n * (Ca + Cb) * P + i] = a[n * Ca * P + i];
    for (std::size_t i = 0; i < Cb * P; ++i) out[n * (Ca + Cb) * P + Ca * P + i] = b[n * Cb * P + i];
  }
  return y;
}

// Per head: softmax(Q_h K_h^T / sqrt(D_h)) V_h, heads concatenated.
inline D attention(const D& q, const D& k, const D& v, std::size_t heads) {
  const std::size_t B = q.dim(0), N = q.dim(1), Dm = q.dim(2), M = k.dim(1), dh = Dm / heads;
  D y({B, N, Dm});
  auto out = y.mutable_data();
  std::vector<double> logits(M);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < N; ++i) {
        double top = -INFINITY;
        for (std::size_t j = 0; j < M; ++j) {
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += q[(b * N + i) * Dm + h * dh + d] * k[(b * M + j) * Dm + h * dh + d];
          logits[j] = s / std::sqrt(static_cast<double>(dh));
          top = std::max(top, logits[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < M; ++j) z += std::exp(logits[j] - top);
        for (std::size_t d = 0; d < dh; ++d) {
          double s = 0.0;
          for (std::size_t j = 0; j < M; ++j) s += std::exp(logits[j] - top) / z * v[(b * M + j) * Dm + h * dh + d];
          out[(b * N + i) * Dm + h * dh + d] = s;
        }
      }
  return y;
}

inline D sdpa(const D& x, const nlvt::Sdpa<double>& p) {
  const D q = linear(x, p.w_q.weight, p.w_q.bias);
  const D k = linear(x, p.w_k.weight, p.w_k.bias);
  const D v = linear(x, p.w_v.weight, p.w_v.bias);
  return linear(attention(q, k, v, p.heads), p.w_o.weight, p.w_o.bias);
}

// Keys and values are pooled on the token grid before attention.
inline D e_mhsa(const D& x, std::size_t gh, std::size_t gw, const nlvt::EMhsa<double>& p) {
  const D q = linear(x, p.w_q.weight, p.w_q.bias);
  D k = linear(x, p.w_k.weight, p.w_k.bias);
  D v = linear(x, p.w_v.weight, p.w_v.bias);
  if (p.pool_stride > 1) {
    k = to_tokens(avg_pool(to_grid(k, gh, gw), p.pool_stride));
    v = to_tokens(avg_pool(to_grid(v, gh, gw), p.pool_stride));
  }
  return linear(attention(q, k, v, p.heads), p.w_o.weight, p.w_o.bias);
}

inline D conv(const D& x, const nlvt::Conv2d<double>& c) {
  return conv2d(x, c.weight, c.bias, c.stride, c.padding, c.groups);
}

inline D mhca(const D& x, const nlvt::Mhca<double>& m, bool training) {
  D h = conv(x, m.ca);
  if (m.use_norm) h = batch_norm(h, m.norm, training);
  return conv(activate(h, m.activation), m.projection);
}

inline D mlp(const D& x, const nlvt::Mlp<double>& m) {
  return conv(activate(conv(x, m.fc1), m.activation), m.fc2);
}

inline D lff(const D& x, const nlvt::Lff<double>& m) {
  return conv(activate(conv(conv(x, m.expand), m.depthwise), m.activation), m.project);
}

}  // namespace oracle
