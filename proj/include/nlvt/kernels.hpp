#pragma once

// Raw compute kernels over contiguous row-major buffers.
//
// Each kernel comes in two flavours: a naive `serial` reference and an OpenMP
// `omp` version used by the tensor ops. The omp versions never reduce across
// threads, so their results do not depend on the thread count.

#include <cstddef>
#include <span>

namespace nlvt::kernels {

// C[M x N] (+)= op(A) * op(B), where op(A) is M x K and op(B) is K x N.
// With trans_a, A is stored K x M; with trans_b, B is stored N x K.
struct GemmShape {
  std::size_t m = 0, n = 0, k = 0;
  bool trans_a = false;
  bool trans_b = false;
  bool accumulate = false;  // C += ... instead of C = ...
};

template <typename T>
void gemm_serial(const GemmShape& s, std::span<const T> a, std::span<const T> b, std::span<T> c);
template <typename T>
void gemm_omp(const GemmShape& s, std::span<const T> a, std::span<const T> b, std::span<T> c);

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1, in_h = 1, in_w = 1;
  std::size_t out_channels = 1, kernel = 1, stride = 1, padding = 0, groups = 1;

  std::size_t out_h() const { return (in_h + 2 * padding - kernel) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * padding - kernel) / stride + 1; }
  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
  std::size_t weight_size() const { return out_channels * in_per_group() * kernel * kernel; }
};

// Cross-correlation. `bias` may be empty.
template <typename T>
void conv2d_forward_serial(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                           std::span<const T> bias, std::span<T> y);
template <typename T>
void conv2d_forward_omp(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                        std::span<const T> bias, std::span<T> y);

// Accumulates into dx, dw and db; any of them may be empty to skip that gradient.
template <typename T>
void conv2d_backward_serial(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                            std::span<const T> dy, std::span<T> dx, std::span<T> dw,
                            std::span<T> db);
template <typename T>
void conv2d_backward_omp(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                         std::span<const T> dy, std::span<T> dx, std::span<T> dw, std::span<T> db);

// Non-overlapping s x s window means; edge windows average only their in-bounds cells.
struct PoolGeometry {
  std::size_t planes = 1, in_h = 1, in_w = 1, stride = 1;
  std::size_t out_h() const { return (in_h + stride - 1) / stride; }
  std::size_t out_w() const { return (in_w + stride - 1) / stride; }
};

template <typename T>
void avg_pool2d_forward(const PoolGeometry& g, std::span<const T> x, std::span<T> y);
template <typename T>
void avg_pool2d_backward(const PoolGeometry& g, std::span<const T> dy, std::span<T> dx);

// Applies `threads` (if > 0) as the OpenMP team size cap. Returns the effective cap.
int set_max_threads(int threads);
int max_threads();

}  // namespace nlvt::kernels
