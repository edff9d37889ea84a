#pragma once

#include <cstddef>
#include <vector>

// Dense kernels shared by the differentiable ops. Every reduction accumulates
// in double and visits terms in a fixed order, so results are bit-identical
// from run to run.
namespace care::ad::kernels {

// C[m x n] (+)= A[m x k] * B[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    double* accp = acc.data();
    T* crow = c + i * n;
    if (accumulate) {
      for (std::size_t j = 0; j < n; ++j) accp[j] = static_cast<double>(crow[j]);
    } else {
      for (std::size_t j = 0; j < n; ++j) accp[j] = 0.0;
    }
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = static_cast<double>(arow[p]);
      if (av == 0.0) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) accp[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(accp[j]);
  }
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
  }
  return out;
}

// C[m x n] (+)= A[m x k] * B^T, with B stored [n x k]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  std::vector<T> bt = transpose(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

// C[m x n] (+)= A^T * B, with A stored [k x m] and B [k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  std::vector<T> at = transpose(a, k, m);
  gemm_nn(at.data(), b, c, m, k, n, accumulate);
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, pad;
  std::size_t out_h() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch() const { return channels * kernel * kernel; }
};

// Unfolds one image [C,H,W] into columns [C*k*k, out_h*out_w].
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* dst = cols + ((c * g.kernel + ky) * g.kernel + kx) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            dst[y * ow + x] =
                inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                             static_cast<std::size_t>(ix)]
                       : T{0};
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back into [C,H,W].
template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* src = cols + ((c * g.kernel + ky) * g.kernel + kx) * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                static_cast<std::size_t>(ix)] += src[y * ow + x];
          }
        }
      }
    }
  }
}

}  // namespace care::ad::kernels
