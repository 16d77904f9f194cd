#ifndef DCSAU_OPS_HPP
#define DCSAU_OPS_HPP

#include <atomic>
#include <cmath>
#include <memory>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "dcsau/autograd.hpp"
#include "dcsau/kernels.hpp"

namespace dcsau {

enum class Mode { kTrain, kEval };

/// Test hooks for exercising the self-test harness. Never set in normal runs.
namespace fault {
inline std::atomic<bool>& conv_sign_flip() {
  static std::atomic<bool> flag{false};
  return flag;
}
}  // namespace fault

namespace detail {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                                   const char* op, const char* axis) {
  if (in + 2 * pad < k) {
    throw ShapeError(std::string(op) + ": kernel extent " + std::to_string(k) + " exceeds padded input " +
                     std::to_string(in + 2 * pad) + " on axis " + axis);
  }
  return (in + 2 * pad - k) / stride + 1;
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  const char* axis = a.n != b.n ? "N" : a.c != b.c ? "C" : a.h != b.h ? "H" : a.w != b.w ? "W" : nullptr;
  if (axis != nullptr) {
    throw ShapeError(std::string(op) + ": extent mismatch on axis " + axis + " (" + a.str() + " vs " + b.str() +
                     ")");
  }
}

template <typename T>
void add_into(BasicTensor<T>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += static_cast<T>(src[i]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

/// Dense 2-D cross-correlation. `w` is [Cout, Cin, Kh, Kw]; `b` is [1, Cout, 1, 1].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::optional<std::type_identity_t<Var<T>>> b, std::size_t stride, std::size_t pad) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (ws.c != xs.c) {
    throw ShapeError("conv2d: weight in-channel extent " + std::to_string(ws.c) + " does not match input axis C = " +
                     std::to_string(xs.c));
  }
  if (b && b->shape().numel() != ws.n) {
    throw ShapeError("conv2d: bias length " + std::to_string(b->shape().numel()) + " does not match Cout = " +
                     std::to_string(ws.n));
  }
  const std::size_t hout = detail::conv_out_extent(xs.h, ws.h, stride, pad, "conv2d", "H");
  const std::size_t wout = detail::conv_out_extent(xs.w, ws.w, stride, pad, "conv2d", "W");
  const std::size_t kdim = ws.c * ws.h * ws.w;
  const std::size_t plane = hout * wout;
  const bool direct = ws.h == 1 && ws.w == 1 && stride == 1 && pad == 0;

  BasicTensor<T> y(Shape{xs.n, ws.n, hout, wout});
  std::vector<T> col(direct ? 0 : kdim * plane);
  std::vector<double> acc(ws.n * plane);
  const bool flip = fault::conv_sign_flip().load();
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* xn = x.value().plane(n, 0);
    const T* src = xn;
    if (!direct) {
      kernels::im2col(xn, xs.c, xs.h, xs.w, ws.h, ws.w, stride, pad, hout, wout, col.data());
      src = col.data();
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    kernels::gemm_acc(ws.n, plane, kdim, w.value().data(), kdim, src, plane, acc.data(), plane);
    T* yn = y.plane(n, 0);
    for (std::size_t co = 0; co < ws.n; ++co) {
      const double bias = b ? static_cast<double>(b->value()[co]) : 0.0;
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = acc[co * plane + p] + bias;
        yn[co * plane + p] = static_cast<T>(flip ? -v : v);
      }
    }
  }

  std::vector<std::size_t> inputs{x.id(), w.id()};
  if (b) inputs.push_back(b->id());
  const std::size_t xid = x.id(), wid = w.id();
  const std::optional<std::size_t> bid = b ? std::optional<std::size_t>(b->id()) : std::nullopt;
  return x.graph().record(
      "conv2d", std::move(y), std::move(inputs),
      [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
        const BasicTensor<T>& xv = g.value(xid);
        const BasicTensor<T>& wv = g.value(wid);
        const bool need_x = g.wants_grad(xid), need_w = g.wants_grad(wid);
        std::vector<T> colbuf(direct ? 0 : kdim * plane);
        std::vector<T> colt(need_w ? kdim * plane : 0);
        std::vector<double> dw(need_w ? ws.n * kdim : 0);
        std::vector<T> wt;
        std::vector<double> dcol, dx;
        if (need_x) {
          wt.resize(kdim * ws.n);
          kernels::transpose(wv.data(), ws.n, kdim, wt.data());
          dcol.resize(kdim * plane);
          dx.assign(xs.c * xs.plane(), 0.0);
        }
        for (std::size_t n = 0; n < xs.n; ++n) {
          const T* gyn = gy.plane(n, 0);
          if (need_w) {
            const T* src = xv.plane(n, 0);
            if (!direct) {
              kernels::im2col(src, xs.c, xs.h, xs.w, ws.h, ws.w, stride, pad, hout, wout, colbuf.data());
              src = colbuf.data();
            }
            kernels::transpose(src, kdim, plane, colt.data());
            kernels::gemm_acc(ws.n, kdim, plane, gyn, plane, colt.data(), kdim, dw.data(), kdim);
          }
          if (need_x) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            kernels::gemm_acc(kdim, plane, ws.n, wt.data(), ws.n, gyn, plane, dcol.data(), plane);
            BasicTensor<T>& gx = g.grad_buffer(xid);
            T* gxn = gx.plane(n, 0);
            if (direct) {
              for (std::size_t i = 0; i < dcol.size(); ++i) gxn[i] += static_cast<T>(dcol[i]);
            } else {
              std::fill(dx.begin(), dx.end(), 0.0);
              kernels::col2im_add(dcol.data(), xs.c, xs.h, xs.w, ws.h, ws.w, stride, pad, hout, wout, dx.data());
              for (std::size_t i = 0; i < dx.size(); ++i) gxn[i] += static_cast<T>(dx[i]);
            }
          }
        }
        if (need_w) detail::add_into(g.grad_buffer(wid), dw);
        if (bid && g.wants_grad(*bid)) {
          BasicTensor<T>& gb = g.grad_buffer(*bid);
          for (std::size_t co = 0; co < ws.n; ++co) {
            double s = 0.0;
            for (std::size_t n = 0; n < xs.n; ++n) {
              const T* p = gy.plane(n, co);
              for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(p[i]);
            }
            gb[co] += static_cast<T>(s);
          }
        }
      });
}

/// Per-channel convolution. `w` is [C, 1, K, K]; channel c of the output reads
/// only channel c of the input.
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, std::optional<std::type_identity_t<Var<T>>> b, std::size_t stride,
                        std::size_t pad) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  if (stride == 0) throw ShapeError("depthwise_conv2d: stride must be positive");
  if (ws.n != xs.c || ws.c != 1) {
    throw ShapeError("depthwise_conv2d: weight " + ws.str() + " incompatible with input axis C = " +
                     std::to_string(xs.c) + " (expected [C,1,K,K])");
  }
  if (b && b->shape().numel() != xs.c) throw ShapeError("depthwise_conv2d: bias length does not match axis C");
  const std::size_t kh = ws.h, kw = ws.w;
  const std::size_t hout = detail::conv_out_extent(xs.h, kh, stride, pad, "depthwise_conv2d", "H");
  const std::size_t wout = detail::conv_out_extent(xs.w, kw, stride, pad, "depthwise_conv2d", "W");
  const long lpad = static_cast<long>(pad);

  BasicTensor<T> y(Shape{xs.n, xs.c, hout, wout});
  const bool flip = fault::conv_sign_flip().load();
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* xp = x.value().plane(n, c);
      const T* k = w.value().plane(c, 0);
      const double bias = b ? static_cast<double>(b->value()[c]) : 0.0;
      T* yp = y.plane(n, c);
      for (std::size_t oy = 0; oy < hout; ++oy) {
        for (std::size_t ox = 0; ox < wout; ++ox) {
          double s = 0.0;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - lpad;
            if (iy < 0 || iy >= static_cast<long>(xs.h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - lpad;
              if (ix < 0 || ix >= static_cast<long>(xs.w)) continue;
              s += static_cast<double>(k[ky * kw + kx]) * static_cast<double>(xp[iy * static_cast<long>(xs.w) + ix]);
            }
          }
          s += bias;
          yp[oy * wout + ox] = static_cast<T>(flip ? -s : s);
        }
      }
    }
  }

  std::vector<std::size_t> inputs{x.id(), w.id()};
  if (b) inputs.push_back(b->id());
  const std::size_t xid = x.id(), wid = w.id();
  const std::optional<std::size_t> bid = b ? std::optional<std::size_t>(b->id()) : std::nullopt;
  return x.graph().record(
      "depthwise_conv2d", std::move(y), std::move(inputs), [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
        const BasicTensor<T>& xv = g.value(xid);
        const BasicTensor<T>& wv = g.value(wid);
        const bool need_x = g.wants_grad(xid), need_w = g.wants_grad(wid);
        const bool need_b = bid && g.wants_grad(*bid);
        std::vector<double> dx(need_x ? xs.plane() : 0);
        std::vector<double> dw(kh * kw);
        for (std::size_t c = 0; c < xs.c; ++c) {
          std::fill(dw.begin(), dw.end(), 0.0);
          double db = 0.0;
          const T* k = wv.plane(c, 0);
          for (std::size_t n = 0; n < xs.n; ++n) {
            const T* xp = xv.plane(n, c);
            const T* gp = gy.plane(n, c);
            if (need_x) std::fill(dx.begin(), dx.end(), 0.0);
            for (std::size_t oy = 0; oy < hout; ++oy) {
              for (std::size_t ox = 0; ox < wout; ++ox) {
                const double go = static_cast<double>(gp[oy * wout + ox]);
                db += go;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const long iy = static_cast<long>(oy * stride + ky) - lpad;
                  if (iy < 0 || iy >= static_cast<long>(xs.h)) continue;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const long ix = static_cast<long>(ox * stride + kx) - lpad;
                    if (ix < 0 || ix >= static_cast<long>(xs.w)) continue;
                    const std::size_t xi = static_cast<std::size_t>(iy) * xs.w + static_cast<std::size_t>(ix);
                    if (need_w) dw[ky * kw + kx] += go * static_cast<double>(xp[xi]);
                    if (need_x) dx[xi] += go * static_cast<double>(k[ky * kw + kx]);
                  }
                }
              }
            }
            if (need_x) {
              T* gx = g.grad_buffer(xid).plane(n, c);
              for (std::size_t i = 0; i < dx.size(); ++i) gx[i] += static_cast<T>(dx[i]);
            }
          }
          if (need_w) {
            T* gw = g.grad_buffer(wid).plane(c, 0);
            for (std::size_t i = 0; i < dw.size(); ++i) gw[i] += static_cast<T>(dw[i]);
          }
          if (need_b) g.grad_buffer(*bid)[c] += static_cast<T>(db);
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling and resampling

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// element in scan order.
template <typename T>
Var<T> maxpool2d(const Var<T>& x) {
  const Shape xs = x.shape();
  if (xs.h % 2 != 0 || xs.w % 2 != 0) {
    throw ShapeError("maxpool2d: spatial extents must be even, got H=" + std::to_string(xs.h) +
                     " W=" + std::to_string(xs.w));
  }
  const std::size_t ho = xs.h / 2, wo = xs.w / 2;
  BasicTensor<T> y(Shape{xs.n, xs.c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::size_t>>(y.numel());
  std::size_t o = 0;
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* xp = x.value().plane(n, c);
      const std::size_t base = (n * xs.c + c) * xs.plane();
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
          std::size_t best = (2 * oy) * xs.w + 2 * ox;
          for (std::size_t idx : {best + 1, best + xs.w, best + xs.w + 1}) {
            if (xp[idx] > xp[best]) best = idx;
          }
          y[o] = xp[best];
          (*argmax)[o] = base + best;
        }
      }
    }
  }
  const std::size_t xid = x.id();
  return x.graph().record("maxpool2d", std::move(y), {xid}, [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
    BasicTensor<T>& gx = g.grad_buffer(xid);
    for (std::size_t i = 0; i < gy.numel(); ++i) gx[(*argmax)[i]] += gy[i];
  });
}

/// Bilinear 2x upsampling, align-corners = false.
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  const Shape xs = x.shape();
  const std::size_t ho = 2 * xs.h, wo = 2 * xs.w;
  const auto ty = kernels::linear_taps(xs.h, ho);
  const auto tx = kernels::linear_taps(xs.w, wo);
  BasicTensor<T> y(Shape{xs.n, xs.c, ho, wo});
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* xp = x.value().plane(n, c);
      T* yp = y.plane(n, c);
      for (std::size_t oy = 0; oy < ho; ++oy) {
        const auto& a = ty[oy];
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const auto& b = tx[ox];
          const double v = a.w0 * (b.w0 * xp[a.i0 * xs.w + b.i0] + b.w1 * xp[a.i0 * xs.w + b.i1]) +
                           a.w1 * (b.w0 * xp[a.i1 * xs.w + b.i0] + b.w1 * xp[a.i1 * xs.w + b.i1]);
          yp[oy * wo + ox] = static_cast<T>(v);
        }
      }
    }
  }
  const std::size_t xid = x.id();
  return x.graph().record("upsample2x", std::move(y), {xid}, [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
    BasicTensor<T>& gx = g.grad_buffer(xid);
    std::vector<double> acc(xs.plane());
    for (std::size_t n = 0; n < xs.n; ++n) {
      for (std::size_t c = 0; c < xs.c; ++c) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const T* gp = gy.plane(n, c);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto& a = ty[oy];
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto& b = tx[ox];
            const double v = static_cast<double>(gp[oy * wo + ox]);
            acc[a.i0 * xs.w + b.i0] += a.w0 * b.w0 * v;
            acc[a.i0 * xs.w + b.i1] += a.w0 * b.w1 * v;
            acc[a.i1 * xs.w + b.i0] += a.w1 * b.w0 * v;
            acc[a.i1 * xs.w + b.i1] += a.w1 * b.w1 * v;
          }
        }
        T* gxp = gx.plane(n, c);
        for (std::size_t i = 0; i < acc.size(); ++i) gxp[i] += static_cast<T>(acc[i]);
      }
    }
  });
}

/// Per-channel spatial mean: [N,C,H,W] -> [N,C,1,1].
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape xs = x.shape();
  BasicTensor<T> y(Shape{xs.n, xs.c, 1, 1});
  const double inv = 1.0 / static_cast<double>(xs.plane());
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const T* p = x.value().plane(n, c);
      double s = 0.0;
      for (std::size_t i = 0; i < xs.plane(); ++i) s += static_cast<double>(p[i]);
      y.at(n, c, 0, 0) = static_cast<T>(s * inv);
    }
  }
  const std::size_t xid = x.id();
  return x.graph().record("global_avg_pool", std::move(y), {xid},
                          [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
                            BasicTensor<T>& gx = g.grad_buffer(xid);
                            for (std::size_t n = 0; n < xs.n; ++n) {
                              for (std::size_t c = 0; c < xs.c; ++c) {
                                const T v = static_cast<T>(static_cast<double>(gy.at(n, c, 0, 0)) * inv);
                                T* p = gx.plane(n, c);
                                for (std::size_t i = 0; i < xs.plane(); ++i) p[i] += v;
                              }
                            }
                          });
}

// ---------------------------------------------------------------------------
// Normalization

/// Running statistics of a batch-norm layer, each [1, C, 1, 1].
template <typename T>
struct BatchNormStats {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;

  explicit BatchNormStats(std::size_t c = 0)
      : running_mean(Shape{1, c, 1, 1}, T(0)), running_var(Shape{1, c, 1, 1}, T(1)) {}
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Batch normalization over (N, H, W) per channel. Train mode normalizes with
/// batch statistics and updates `stats` (new = (1 - momentum) * old +
/// momentum * batch, unbiased variance); eval mode uses `stats` as-is.
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats, Mode mode,
                   BatchNormOptions opt = {}) {
  const Shape xs = x.shape();
  const std::size_t c = xs.c;
  if (gamma.shape().numel() != c || beta.shape().numel() != c || stats.running_mean.numel() != c) {
    throw ShapeError("batchnorm2d: parameter length does not match axis C = " + std::to_string(c));
  }
  const std::size_t count = xs.n * xs.plane();
  if (mode == Mode::kTrain && count < 2) {
    throw ShapeError("batchnorm2d: train mode needs N*H*W >= 2 values per channel, got " + std::to_string(count));
  }
  std::vector<double> mean(c), invstd(c);
  if (mode == Mode::kTrain) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t n = 0; n < xs.n; ++n) {
        const T* p = x.value().plane(n, ch);
        for (std::size_t i = 0; i < xs.plane(); ++i) s += static_cast<double>(p[i]);
      }
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t n = 0; n < xs.n; ++n) {
        const T* p = x.value().plane(n, ch);
        for (std::size_t i = 0; i < xs.plane(); ++i) {
          const double d = static_cast<double>(p[i]) - m;
          v += d * d;
        }
      }
      const double biased = v / static_cast<double>(count);
      const double unbiased = v / static_cast<double>(count - 1);
      mean[ch] = m;
      invstd[ch] = 1.0 / std::sqrt(biased + opt.eps);
      stats.running_mean[ch] =
          static_cast<T>((1.0 - opt.momentum) * static_cast<double>(stats.running_mean[ch]) + opt.momentum * m);
      stats.running_var[ch] = static_cast<T>((1.0 - opt.momentum) * static_cast<double>(stats.running_var[ch]) +
                                             opt.momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = static_cast<double>(stats.running_mean[ch]);
      invstd[ch] = 1.0 / std::sqrt(static_cast<double>(stats.running_var[ch]) + opt.eps);
    }
  }
  BasicTensor<T> y(xs);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double gm = static_cast<double>(gamma.value()[ch]);
      const double bt = static_cast<double>(beta.value()[ch]);
      const T* p = x.value().plane(n, ch);
      T* q = y.plane(n, ch);
      for (std::size_t i = 0; i < xs.plane(); ++i) {
        q[i] = static_cast<T>(gm * ((static_cast<double>(p[i]) - mean[ch]) * invstd[ch]) + bt);
      }
    }
  }
  const std::size_t xid = x.id(), gid = gamma.id(), bid = beta.id();
  const bool train = mode == Mode::kTrain;
  return x.graph().record(
      "batchnorm2d", std::move(y), {xid, gid, bid}, [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
        const BasicTensor<T>& xv = g.value(xid);
        const BasicTensor<T>& gv = g.value(gid);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t n = 0; n < xs.n; ++n) {
            const T* p = xv.plane(n, ch);
            const T* d = gy.plane(n, ch);
            for (std::size_t i = 0; i < xs.plane(); ++i) {
              const double xhat = (static_cast<double>(p[i]) - mean[ch]) * invstd[ch];
              sum_dy += static_cast<double>(d[i]);
              sum_dy_xhat += static_cast<double>(d[i]) * xhat;
            }
          }
          if (g.wants_grad(gid)) g.grad_buffer(gid)[ch] += static_cast<T>(sum_dy_xhat);
          if (g.wants_grad(bid)) g.grad_buffer(bid)[ch] += static_cast<T>(sum_dy);
          if (!g.wants_grad(xid)) continue;
          const double scale = static_cast<double>(gv[ch]) * invstd[ch];
          const double mdy = sum_dy / static_cast<double>(count);
          const double mdyx = sum_dy_xhat / static_cast<double>(count);
          BasicTensor<T>& gx = g.grad_buffer(xid);
          for (std::size_t n = 0; n < xs.n; ++n) {
            const T* p = xv.plane(n, ch);
            const T* d = gy.plane(n, ch);
            T* q = gx.plane(n, ch);
            for (std::size_t i = 0; i < xs.plane(); ++i) {
              const double dy = static_cast<double>(d[i]);
              if (train) {
                const double xhat = (static_cast<double>(p[i]) - mean[ch]) * invstd[ch];
                q[i] += static_cast<T>(scale * (dy - mdy - xhat * mdyx));
              } else {
                q[i] += static_cast<T>(scale * dy);
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pointwise

/// Subgradient at 0 is 0.
template <typename T>
Var<T> relu(const Var<T>& x) {
  BasicTensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  const std::size_t xid = x.id();
  return x.graph().record("relu", std::move(y), {xid}, [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
    const auto& xv2 = g.value(xid);
    BasicTensor<T>& gx = g.grad_buffer(xid);
    for (std::size_t i = 0; i < gy.numel(); ++i)
      if (xv2[i] > T(0)) gx[i] += gy[i];
  });
}

namespace detail {
/// Pointwise ops whose derivative is expressed through their own output.
template <typename T, typename F, typename D>
Var<T> unary_from_output(const char* name, const Var<T>& x, F f, D dfdy) {
  BasicTensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = static_cast<T>(f(static_cast<double>(xv[i])));
  auto yv = std::make_shared<BasicTensor<T>>(y);
  const std::size_t xid = x.id();
  return x.graph().record(name, std::move(y), {xid}, [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
    BasicTensor<T>& gx = g.grad_buffer(xid);
    for (std::size_t i = 0; i < gy.numel(); ++i)
      gx[i] += static_cast<T>(static_cast<double>(gy[i]) * dfdy(static_cast<double>((*yv)[i])));
  });
}
}  // namespace detail

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary_from_output(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double y) { return y * (1.0 - y); });
}

/// Softmax across `groups` channel groups: channel g * (C / groups) + c is
/// entry g of the distribution for (c, pixel).
template <typename T>
Var<T> softmax_over_groups(const Var<T>& x, std::size_t groups) {
  const Shape xs = x.shape();
  if (groups == 0 || xs.c % groups != 0) {
    throw ShapeError("softmax_over_groups: axis C = " + std::to_string(xs.c) + " not divisible by " +
                     std::to_string(groups) + " groups");
  }
  const std::size_t cg = xs.c / groups;
  const std::size_t plane = xs.plane();
  BasicTensor<T> y(xs);
  std::vector<double> e(groups);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < cg; ++c) {
      for (std::size_t i = 0; i < plane; ++i) {
        double mx = -INFINITY;
        for (std::size_t k = 0; k < groups; ++k)
          mx = std::max(mx, static_cast<double>(x.value().plane(n, k * cg + c)[i]));
        double s = 0.0;
        for (std::size_t k = 0; k < groups; ++k) {
          e[k] = std::exp(static_cast<double>(x.value().plane(n, k * cg + c)[i]) - mx);
          s += e[k];
        }
        for (std::size_t k = 0; k < groups; ++k) y.plane(n, k * cg + c)[i] = static_cast<T>(e[k] / s);
      }
    }
  }
  auto yv = std::make_shared<BasicTensor<T>>(y);
  const std::size_t xid = x.id();
  return x.graph().record("softmax_over_groups", std::move(y), {xid},
                          [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
                            BasicTensor<T>& gx = g.grad_buffer(xid);
                            for (std::size_t n = 0; n < xs.n; ++n) {
                              for (std::size_t c = 0; c < cg; ++c) {
                                for (std::size_t i = 0; i < plane; ++i) {
                                  double dot = 0.0;
                                  for (std::size_t k = 0; k < groups; ++k) {
                                    dot += static_cast<double>(yv->plane(n, k * cg + c)[i]) *
                                           static_cast<double>(gy.plane(n, k * cg + c)[i]);
                                  }
                                  for (std::size_t k = 0; k < groups; ++k) {
                                    const double yk = static_cast<double>(yv->plane(n, k * cg + c)[i]);
                                    const double gk = static_cast<double>(gy.plane(n, k * cg + c)[i]);
                                    gx.plane(n, k * cg + c)[i] += static_cast<T>(yk * (gk - dot));
                                  }
                                }
                              }
                            }
                          });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  BasicTensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a.value()[i] + b.value()[i];
  const std::size_t aid = a.id(), bid = b.id();
  return a.graph().record("add", std::move(y), {aid, bid}, [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
    if (g.wants_grad(aid)) g.grad_buffer(aid) += gy;
    if (g.wants_grad(bid)) g.grad_buffer(bid) += gy;
  });
}

/// Stack along the channel axis, `a` first.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape as = a.shape(), bs = b.shape();
  if (as.n != bs.n || as.h != bs.h || as.w != bs.w) {
    const char* axis = as.n != bs.n ? "N" : as.h != bs.h ? "H" : "W";
    throw ShapeError(std::string("concat_channels: extent mismatch on axis ") + axis + " (" + as.str() + " vs " +
                     bs.str() + ")");
  }
  BasicTensor<T> y(Shape{as.n, as.c + bs.c, as.h, as.w});
  const std::size_t plane = as.plane();
  for (std::size_t n = 0; n < as.n; ++n) {
    std::copy_n(a.value().plane(n, 0), as.c * plane, y.plane(n, 0));
    std::copy_n(b.value().plane(n, 0), bs.c * plane, y.plane(n, as.c));
  }
  const std::size_t aid = a.id(), bid = b.id();
  return a.graph().record("concat_channels", std::move(y), {aid, bid},
                          [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
                            for (std::size_t n = 0; n < as.n; ++n) {
                              if (g.wants_grad(aid)) {
                                T* d = g.grad_buffer(aid).plane(n, 0);
                                const T* s = gy.plane(n, 0);
                                for (std::size_t i = 0; i < as.c * plane; ++i) d[i] += s[i];
                              }
                              if (g.wants_grad(bid)) {
                                T* d = g.grad_buffer(bid).plane(n, 0);
                                const T* s = gy.plane(n, as.c);
                                for (std::size_t i = 0; i < bs.c * plane; ++i) d[i] += s[i];
                              }
                            }
                          });
}

/// Split the channel axis into `pieces` equal consecutive slices.
template <typename T>
std::vector<Var<T>> split_channels(const Var<T>& x, std::size_t pieces) {
  const Shape xs = x.shape();
  if (pieces == 0 || xs.c % pieces != 0) {
    throw ShapeError("split_channels: axis C = " + std::to_string(xs.c) + " not divisible into " +
                     std::to_string(pieces) + " pieces");
  }
  const std::size_t cp = xs.c / pieces;
  const std::size_t plane = xs.plane();
  std::vector<Var<T>> out;
  for (std::size_t k = 0; k < pieces; ++k) {
    BasicTensor<T> y(Shape{xs.n, cp, xs.h, xs.w});
    for (std::size_t n = 0; n < xs.n; ++n) std::copy_n(x.value().plane(n, k * cp), cp * plane, y.plane(n, 0));
    const std::size_t xid = x.id();
    out.push_back(x.graph().record("split_channels", std::move(y), {xid},
                                   [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
                                     BasicTensor<T>& gx = g.grad_buffer(xid);
                                     for (std::size_t n = 0; n < xs.n; ++n) {
                                       T* d = gx.plane(n, k * cp);
                                       const T* s = gy.plane(n, 0);
                                       for (std::size_t i = 0; i < cp * plane; ++i) d[i] += s[i];
                                     }
                                   }));
  }
  return out;
}

/// Broadcast multiply of per-channel weights [N, C, 1, 1] onto maps [N, C, H, W].
template <typename T>
Var<T> channel_scale(const Var<T>& weights, const Var<T>& maps) {
  const Shape ws = weights.shape(), ms = maps.shape();
  if (ws.n != ms.n || ws.c != ms.c || ws.h != 1 || ws.w != 1) {
    throw ShapeError("channel_scale: weights " + ws.str() + " do not broadcast onto " + ms.str());
  }
  BasicTensor<T> y(ms);
  for (std::size_t n = 0; n < ms.n; ++n) {
    for (std::size_t c = 0; c < ms.c; ++c) {
      const T a = weights.value()[n * ms.c + c];
      const T* p = maps.value().plane(n, c);
      T* q = y.plane(n, c);
      for (std::size_t i = 0; i < ms.plane(); ++i) q[i] = a * p[i];
    }
  }
  const std::size_t wid = weights.id(), mid = maps.id();
  return weights.graph().record(
      "channel_scale", std::move(y), {wid, mid}, [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
        const auto& wv = g.value(wid);
        const auto& mv = g.value(mid);
        for (std::size_t n = 0; n < ms.n; ++n) {
          for (std::size_t c = 0; c < ms.c; ++c) {
            const T* gp = gy.plane(n, c);
            if (g.wants_grad(wid)) {
              const T* p = mv.plane(n, c);
              double s = 0.0;
              for (std::size_t i = 0; i < ms.plane(); ++i) s += static_cast<double>(gp[i]) * static_cast<double>(p[i]);
              g.grad_buffer(wid)[n * ms.c + c] += static_cast<T>(s);
            }
            if (g.wants_grad(mid)) {
              const T a = wv[n * ms.c + c];
              T* q = g.grad_buffer(mid).plane(n, c);
              for (std::size_t i = 0; i < ms.plane(); ++i) q[i] += a * gp[i];
            }
          }
        }
      });
}

/// Scalar sum of all elements, as a [1,1,1,1] tensor.
template <typename T>
Var<T> sum(const Var<T>& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.value().numel(); ++i) s += static_cast<double>(x.value()[i]);
  const std::size_t xid = x.id();
  return x.graph().record("sum", BasicTensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(s)), {xid},
                          [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
                            BasicTensor<T>& gx = g.grad_buffer(xid);
                            for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gy[0];
                          });
}

/// Scalar sum of x * r for a fixed tensor r. Used to project outputs onto a
/// random direction in gradient checks.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, BasicTensor<T> r) {
  detail::require_same(x.shape(), r.shape(), "weighted_sum");
  double s = 0.0;
  for (std::size_t i = 0; i < r.numel(); ++i) s += static_cast<double>(x.value()[i]) * static_cast<double>(r[i]);
  const std::size_t xid = x.id();
  auto rp = std::make_shared<BasicTensor<T>>(std::move(r));
  return x.graph().record("weighted_sum", BasicTensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(s)), {xid},
                          [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
                            BasicTensor<T>& gx = g.grad_buffer(xid);
                            for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += gy[0] * (*rp)[i];
                          });
}

template <typename T>
Var<T> scale(const Var<T>& x, double s) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = static_cast<T>(static_cast<double>(x.value()[i]) * s);
  const std::size_t xid = x.id();
  return x.graph().record("scale", std::move(y), {xid}, [=](BasicGraph<T>& g, const BasicTensor<T>& gy) {
    BasicTensor<T>& gx = g.grad_buffer(xid);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += static_cast<T>(static_cast<double>(gy[i]) * s);
  });
}

}  // namespace dcsau

#endif  // DCSAU_OPS_HPP
