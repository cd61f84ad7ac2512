#include "nlvt/kernels.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nlvt::kernels {

namespace {

using idx = std::int64_t;  // OpenMP loop counters

template <typename T>
void gemm_rows(const GemmShape& s, const T* a, const T* b, T* c, std::size_t row_begin,
               std::size_t row_end) {
  const std::size_t m = s.m, n = s.n, k = s.k;
  for (std::size_t i = row_begin; i < row_end; ++i) {
    T* crow = c + i * n;
    if (s.trans_b) {
      for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T sum = 0;
        if (s.trans_a) {
          for (std::size_t kk = 0; kk < k; ++kk) sum += a[kk * m + i] * brow[kk];
        } else {
          const T* arow = a + i * k;
          for (std::size_t kk = 0; kk < k; ++kk) sum += arow[kk] * brow[kk];
        }
        crow[j] = s.accumulate ? crow[j] + sum : sum;
      }
      continue;
    }
    if (!s.accumulate) std::fill(crow, crow + n, T(0));
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = s.trans_a ? a[kk * m + i] : a[i * k + kk];
      const T* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Column matrix for one (batch, group): rows (ic, kh, kw), columns (oy, ox).
template <typename T>
void im2col(const ConvGeometry& g, const T* x_group, T* col) {
  const std::size_t cin = g.in_per_group(), k = g.kernel;
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t ic = 0; ic < cin; ++ic) {
    const T* plane = x_group + ic * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        T* out = col + ((ic * k + kh) * k + kw) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const idx iy = static_cast<idx>(oy * g.stride + kh) - static_cast<idx>(g.padding);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const idx ix = static_cast<idx>(ox * g.stride + kw) - static_cast<idx>(g.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<idx>(g.in_h) &&
                                ix < static_cast<idx>(g.in_w);
            out[oy * ow + ox] = inside ? plane[iy * g.in_w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* dx_group) {
  const std::size_t cin = g.in_per_group(), k = g.kernel;
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t ic = 0; ic < cin; ++ic) {
    T* plane = dx_group + ic * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        const T* in = col + ((ic * k + kh) * k + kw) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const idx iy = static_cast<idx>(oy * g.stride + kh) - static_cast<idx>(g.padding);
          if (iy < 0 || iy >= static_cast<idx>(g.in_h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const idx ix = static_cast<idx>(ox * g.stride + kw) - static_cast<idx>(g.padding);
            if (ix < 0 || ix >= static_cast<idx>(g.in_w)) continue;
            plane[iy * g.in_w + ix] += in[oy * ow + ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.padding == 0;
}

bool is_depthwise(const ConvGeometry& g) {
  return g.in_per_group() == 1 && g.out_per_group() == 1;
}

template <typename T>
void depthwise_forward(const ConvGeometry& g, const T* x, const T* w, std::span<const T> bias,
                       T* y) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  const idx planes = static_cast<idx>(g.batch * g.in_channels);
#pragma omp parallel for schedule(static)
  for (idx p = 0; p < planes; ++p) {
    const std::size_t c = static_cast<std::size_t>(p) % g.in_channels;
    const T* in = x + p * g.in_h * g.in_w;
    const T* wk = w + c * k * k;
    T* out = y + p * oh * ow;
    const T b0 = bias.empty() ? T(0) : bias[c];
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T sum = 0;
        for (std::size_t kh = 0; kh < k; ++kh) {
          const idx iy = static_cast<idx>(oy * g.stride + kh) - static_cast<idx>(g.padding);
          if (iy < 0 || iy >= static_cast<idx>(g.in_h)) continue;
          for (std::size_t kw = 0; kw < k; ++kw) {
            const idx ix = static_cast<idx>(ox * g.stride + kw) - static_cast<idx>(g.padding);
            if (ix < 0 || ix >= static_cast<idx>(g.in_w)) continue;
            sum += in[iy * g.in_w + ix] * wk[kh * k + kw];
          }
        }
        out[oy * ow + ox] = sum + b0;
      }
    }
  }
}

template <typename T>
void depthwise_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                        T* db) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  const idx channels = static_cast<idx>(g.in_channels);
  const auto in_range = [&](idx iy, idx ix) {
    return iy >= 0 && ix >= 0 && iy < static_cast<idx>(g.in_h) && ix < static_cast<idx>(g.in_w);
  };
#pragma omp parallel for schedule(static)
  for (idx ci = 0; ci < channels; ++ci) {
    const std::size_t c = static_cast<std::size_t>(ci);
    const T* wk = w + c * k * k;
    for (std::size_t b = 0; b < g.batch; ++b) {
      const std::size_t p = b * g.in_channels + c;
      const T* in = x + p * g.in_h * g.in_w;
      const T* gout = dy + p * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T go = gout[oy * ow + ox];
          if (db) db[c] += go;
          for (std::size_t kh = 0; kh < k; ++kh) {
            const idx iy = static_cast<idx>(oy * g.stride + kh) - static_cast<idx>(g.padding);
            for (std::size_t kw = 0; kw < k; ++kw) {
              const idx ix = static_cast<idx>(ox * g.stride + kw) - static_cast<idx>(g.padding);
              if (!in_range(iy, ix)) continue;
              if (dw) dw[c * k * k + kh * k + kw] += go * in[iy * g.in_w + ix];
              if (dx) dx[p * g.in_h * g.in_w + iy * g.in_w + ix] += go * wk[kh * k + kw];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void gemm_serial(const GemmShape& s, std::span<const T> a, std::span<const T> b, std::span<T> c) {
  for (std::size_t i = 0; i < s.m; ++i) {
    for (std::size_t j = 0; j < s.n; ++j) {
      T sum = 0;
      for (std::size_t kk = 0; kk < s.k; ++kk) {
        const T av = s.trans_a ? a[kk * s.m + i] : a[i * s.k + kk];
        const T bv = s.trans_b ? b[j * s.k + kk] : b[kk * s.n + j];
        sum += av * bv;
      }
      c[i * s.n + j] = s.accumulate ? c[i * s.n + j] + sum : sum;
    }
  }
}

template <typename T>
void gemm_omp(const GemmShape& s, std::span<const T> a, std::span<const T> b, std::span<T> c) {
  const idx rows = static_cast<idx>(s.m);
  // Small products are not worth a parallel region.
  if (s.m * s.n * s.k < 32768) {
    gemm_rows(s, a.data(), b.data(), c.data(), 0, s.m);
    return;
  }
#pragma omp parallel for schedule(static)
  for (idx i = 0; i < rows; ++i) {
    gemm_rows(s, a.data(), b.data(), c.data(), static_cast<std::size_t>(i),
              static_cast<std::size_t>(i) + 1);
  }
}

template <typename T>
void conv2d_forward_serial(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                           std::span<const T> bias, std::span<T> y) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  const std::size_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
      const std::size_t grp = oc / cout_g;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T sum = 0;
          for (std::size_t ic = 0; ic < cin_g; ++ic) {
            const std::size_t c = grp * cin_g + ic;
            for (std::size_t kh = 0; kh < k; ++kh) {
              for (std::size_t kw = 0; kw < k; ++kw) {
                const idx iy = static_cast<idx>(oy * g.stride + kh) - static_cast<idx>(g.padding);
                const idx ix = static_cast<idx>(ox * g.stride + kw) - static_cast<idx>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<idx>(g.in_h) ||
                    ix >= static_cast<idx>(g.in_w)) {
                  continue;
                }
                sum += x[((b * g.in_channels + c) * g.in_h + iy) * g.in_w + ix] *
                       w[((oc * cin_g + ic) * k + kh) * k + kw];
              }
            }
          }
          if (!bias.empty()) sum += bias[oc];
          y[((b * g.out_channels + oc) * oh + oy) * ow + ox] = sum;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_serial(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                            std::span<const T> dy, std::span<T> dx, std::span<T> dw,
                            std::span<T> db) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  const std::size_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
      const std::size_t grp = oc / cout_g;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T go = dy[((b * g.out_channels + oc) * oh + oy) * ow + ox];
          if (!db.empty()) db[oc] += go;
          for (std::size_t ic = 0; ic < cin_g; ++ic) {
            const std::size_t c = grp * cin_g + ic;
            for (std::size_t kh = 0; kh < k; ++kh) {
              for (std::size_t kw = 0; kw < k; ++kw) {
                const idx iy = static_cast<idx>(oy * g.stride + kh) - static_cast<idx>(g.padding);
                const idx ix = static_cast<idx>(ox * g.stride + kw) - static_cast<idx>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<idx>(g.in_h) ||
                    ix >= static_cast<idx>(g.in_w)) {
                  continue;
                }
                const std::size_t xi = ((b * g.in_channels + c) * g.in_h + iy) * g.in_w + ix;
                const std::size_t wi = ((oc * cin_g + ic) * k + kh) * k + kw;
                if (!dw.empty()) dw[wi] += go * x[xi];
                if (!dx.empty()) dx[xi] += go * w[wi];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_forward_omp(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                        std::span<const T> bias, std::span<T> y) {
  if (is_depthwise(g)) {
    depthwise_forward(g, x.data(), w.data(), bias, y.data());
    return;
  }
  const std::size_t oh = g.out_h(), ow = g.out_w(), spatial = oh * ow;
  const std::size_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  const std::size_t rows = cin_g * g.kernel * g.kernel;
  const idx units = static_cast<idx>(g.batch * g.groups);
  const bool pointwise = is_pointwise(g);
#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : rows * spatial);
#pragma omp for schedule(static)
    for (idx u = 0; u < units; ++u) {
      const std::size_t b = static_cast<std::size_t>(u) / g.groups;
      const std::size_t grp = static_cast<std::size_t>(u) % g.groups;
      const T* xg = x.data() + (b * g.in_channels + grp * cin_g) * g.in_h * g.in_w;
      const T* src = xg;
      if (!pointwise) {
        im2col(g, xg, col.data());
        src = col.data();
      }
      T* yg = y.data() + (b * g.out_channels + grp * cout_g) * spatial;
      const GemmShape s{cout_g, spatial, rows, false, false, false};
      gemm_rows(s, w.data() + grp * cout_g * rows, src, yg, 0, cout_g);
      if (!bias.empty()) {
        for (std::size_t oc = 0; oc < cout_g; ++oc) {
          const T bv = bias[grp * cout_g + oc];
          for (std::size_t p = 0; p < spatial; ++p) yg[oc * spatial + p] += bv;
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_omp(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                         std::span<const T> dy, std::span<T> dx, std::span<T> dw,
                         std::span<T> db) {
  if (is_depthwise(g)) {
    depthwise_backward(g, x.data(), w.data(), dy.data(), dx.empty() ? nullptr : dx.data(),
                       dw.empty() ? nullptr : dw.data(), db.empty() ? nullptr : db.data());
    return;
  }
  const std::size_t oh = g.out_h(), ow = g.out_w(), spatial = oh * ow;
  const std::size_t cin_g = g.in_per_group(), cout_g = g.out_per_group();
  const std::size_t rows = cin_g * g.kernel * g.kernel;
  const bool pointwise = is_pointwise(g);

  if (!db.empty()) {
    const idx channels = static_cast<idx>(g.out_channels);
#pragma omp parallel for schedule(static)
    for (idx oc = 0; oc < channels; ++oc) {
      T sum = 0;
      for (std::size_t b = 0; b < g.batch; ++b) {
        const T* plane = dy.data() + (b * g.out_channels + oc) * spatial;
        for (std::size_t p = 0; p < spatial; ++p) sum += plane[p];
      }
      db[oc] += sum;
    }
  }

  if (!dx.empty()) {
    const idx units = static_cast<idx>(g.batch * g.groups);
#pragma omp parallel
    {
      std::vector<T> col(rows * spatial);
#pragma omp for schedule(static)
      for (idx u = 0; u < units; ++u) {
        const std::size_t b = static_cast<std::size_t>(u) / g.groups;
        const std::size_t grp = static_cast<std::size_t>(u) % g.groups;
        const T* dyg = dy.data() + (b * g.out_channels + grp * cout_g) * spatial;
        T* dxg = dx.data() + (b * g.in_channels + grp * cin_g) * g.in_h * g.in_w;
        const GemmShape s{rows, spatial, cout_g, true, false, pointwise};
        // Pointwise: col rows coincide with the input planes, so accumulate in place.
        gemm_rows(s, w.data() + grp * cout_g * rows, dyg, pointwise ? dxg : col.data(), 0, rows);
        if (!pointwise) col2im_add(g, col.data(), dxg);
      }
    }
  }

  if (!dw.empty()) {
    // Each group owns a disjoint weight slice; batches accumulate in a fixed order.
    const idx groups = static_cast<idx>(g.groups);
#pragma omp parallel if (g.groups > 1)
    {
      std::vector<T> col(pointwise ? 0 : rows * spatial);
#pragma omp for schedule(static)
      for (idx gi = 0; gi < groups; ++gi) {
        const std::size_t grp = static_cast<std::size_t>(gi);
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* xg = x.data() + (b * g.in_channels + grp * cin_g) * g.in_h * g.in_w;
          const T* src = xg;
          if (!pointwise) {
            im2col(g, xg, col.data());
            src = col.data();
          }
          const T* dyg = dy.data() + (b * g.out_channels + grp * cout_g) * spatial;
          const GemmShape s{cout_g, rows, spatial, false, true, true};
          gemm_rows(s, dyg, src, dw.data() + grp * cout_g * rows, 0, cout_g);
        }
      }
    }
  }
}

template <typename T>
void avg_pool2d_forward(const PoolGeometry& g, std::span<const T> x, std::span<T> y) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), s = g.stride;
  const idx planes = static_cast<idx>(g.planes);
#pragma omp parallel for schedule(static)
  for (idx p = 0; p < planes; ++p) {
    const T* in = x.data() + p * g.in_h * g.in_w;
    T* out = y.data() + p * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::size_t y0 = oy * s, y1 = std::min(y0 + s, g.in_h);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t x0 = ox * s, x1 = std::min(x0 + s, g.in_w);
        T sum = 0;
        for (std::size_t iy = y0; iy < y1; ++iy) {
          for (std::size_t ix = x0; ix < x1; ++ix) sum += in[iy * g.in_w + ix];
        }
        out[oy * ow + ox] = sum / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  }
}

template <typename T>
void avg_pool2d_backward(const PoolGeometry& g, std::span<const T> dy, std::span<T> dx) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), s = g.stride;
  const idx planes = static_cast<idx>(g.planes);
#pragma omp parallel for schedule(static)
  for (idx p = 0; p < planes; ++p) {
    const T* gout = dy.data() + p * oh * ow;
    T* gin = dx.data() + p * g.in_h * g.in_w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const std::size_t y0 = oy * s, y1 = std::min(y0 + s, g.in_h);
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t x0 = ox * s, x1 = std::min(x0 + s, g.in_w);
        const T share = gout[oy * ow + ox] / static_cast<T>((y1 - y0) * (x1 - x0));
        for (std::size_t iy = y0; iy < y1; ++iy) {
          for (std::size_t ix = x0; ix < x1; ++ix) gin[iy * g.in_w + ix] += share;
        }
      }
    }
  }
}

int set_max_threads(int threads) {
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
  return omp_get_max_threads();
#else
  (void)threads;
  return 1;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

#define NLVT_INSTANTIATE_KERNELS(T)                                                              \
  template void gemm_serial<T>(const GemmShape&, std::span<const T>, std::span<const T>,        \
                               std::span<T>);                                                    \
  template void gemm_omp<T>(const GemmShape&, std::span<const T>, std::span<const T>,           \
                            std::span<T>);                                                       \
  template void conv2d_forward_serial<T>(const ConvGeometry&, std::span<const T>,               \
                                         std::span<const T>, std::span<const T>, std::span<T>);  \
  template void conv2d_forward_omp<T>(const ConvGeometry&, std::span<const T>,                  \
                                      std::span<const T>, std::span<const T>, std::span<T>);     \
  template void conv2d_backward_serial<T>(const ConvGeometry&, std::span<const T>,              \
                                          std::span<const T>, std::span<const T>, std::span<T>, \
                                          std::span<T>, std::span<T>);                          \
  template void conv2d_backward_omp<T>(const ConvGeometry&, std::span<const T>,                 \
                                       std::span<const T>, std::span<const T>, std::span<T>,    \
                                       std::span<T>, std::span<T>);                             \
  template void avg_pool2d_forward<T>(const PoolGeometry&, std::span<const T>, std::span<T>);   \
  template void avg_pool2d_backward<T>(const PoolGeometry&, std::span<const T>, std::span<T>);

NLVT_INSTANTIATE_KERNELS(float)
NLVT_INSTANTIATE_KERNELS(double)

#undef NLVT_INSTANTIATE_KERNELS

}  // namespace nlvt::kernels
