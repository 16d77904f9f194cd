#ifndef DCSAU_KERNELS_HPP
#define DCSAU_KERNELS_HPP

#include <algorithm>
#include <cstddef>
#include <vector>

// Low-level loops shared by the convolution primitives. All reductions run in
// double and in a fixed order, so results are identical from run to run.

namespace dcsau::kernels {

/// C[M x N] += A[M x K] * B[K x N], row-major, with double accumulators.
/// Rows of A are processed four at a time against column tiles of B.
template <typename TA, typename TB>
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const TA* a, std::size_t lda, const TB* b,
              std::size_t ldb, double* c, std::size_t ldc) {
  constexpr std::size_t kTile = 256;
  for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
    const std::size_t jn = std::min(kTile, n - j0);
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      double* c0 = c + (i + 0) * ldc + j0;
      double* c1 = c + (i + 1) * ldc + j0;
      double* c2 = c + (i + 2) * ldc + j0;
      double* c3 = c + (i + 3) * ldc + j0;
      for (std::size_t p = 0; p < k; ++p) {
        const double a0 = static_cast<double>(a[(i + 0) * lda + p]);
        const double a1 = static_cast<double>(a[(i + 1) * lda + p]);
        const double a2 = static_cast<double>(a[(i + 2) * lda + p]);
        const double a3 = static_cast<double>(a[(i + 3) * lda + p]);
        const TB* brow = b + p * ldb + j0;
        for (std::size_t j = 0; j < jn; ++j) {
          const double bv = static_cast<double>(brow[j]);
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i < m; ++i) {
      double* ci = c + i * ldc + j0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = static_cast<double>(a[i * lda + p]);
        const TB* brow = b + p * ldb + j0;
        for (std::size_t j = 0; j < jn; ++j) ci[j] += av * static_cast<double>(brow[j]);
      }
    }
  }
}

/// Unfold one image [C, H, W] into columns [C*kh*kw, Hout*Wout].
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t hout, std::size_t wout, T* col) {
  const std::size_t plane = hout * wout;
  for (std::size_t ci = 0; ci < c; ++ci) {
    const T* xc = x + ci * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = col + ((ci * kh + ky) * kw + kx) * plane;
        for (std::size_t oy = 0; oy < hout; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          T* out = row + oy * wout;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(out, out + wout, T(0));
            continue;
          }
          const T* xr = xc + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < wout; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            out[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : xr[ix];
          }
        }
      }
    }
  }
}

/// Fold columns back onto an image, summing overlapping contributions.
inline void col2im_add(const double* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t hout, std::size_t wout, double* x) {
  const std::size_t plane = hout * wout;
  for (std::size_t ci = 0; ci < c; ++ci) {
    double* xc = x + ci * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const double* row = col + ((ci * kh + ky) * kw + kx) * plane;
        for (std::size_t oy = 0; oy < hout; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          double* xr = xc + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < wout; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) xr[ix] += row[oy * wout + ox];
          }
        }
      }
    }
  }
}

/// out[cols x rows] = transpose(in[rows x cols]).
template <typename T>
void transpose(const T* in, std::size_t rows, std::size_t cols, T* out) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
}

/// Source taps for 1-D linear interpolation with half-pixel centers
/// (align-corners = false), as used by upsampling and image resizing.
struct LinearTap {
  std::size_t i0;
  std::size_t i1;
  double w0;
  double w1;
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l1 = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - l1, l1};
  }
  return taps;
}

}  // namespace dcsau::kernels

#endif  // DCSAU_KERNELS_HPP
