#include "parsegrid/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

// Determinism contract: every parallel loop assigns each output element
// (or whole plane/channel) to exactly one thread, and the reduction order
// within an element is a fixed serial loop. No floating-point OpenMP
// reductions anywhere.
namespace pg::kern {

namespace {
// Tight output-index bounds such that in-coordinate = o*stride + k*dil - pad
// stays inside [0, limit).
inline void conv_bounds(i64 k, i64 dil, i64 pad, i64 stride, i64 limit,
                        i64 out_limit, i64& lo, i64& hi) {
  const i64 a = pad - k * dil;             // o*stride >= a
  const i64 b = limit - 1 + pad - k * dil; // o*stride <= b
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  hi = b < 0 ? -1 : std::min(b / stride, out_limit - 1);
}
}  // namespace

template <typename T>
void conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, const T* bias,
                Tensor<T>& y, const ConvSpec& g) {
  const Shape xs = x.shape(), ws = w.shape(), ys = y.shape();
  const T* xp = x.data();
  const T* wp = w.data();
  T* yp = y.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < ys.n; ++n) {
    for (i64 co = 0; co < ys.c; ++co) {
      T* plane = yp + (n * ys.c + co) * ys.h * ys.w;
      const T binit = bias ? bias[co] : T(0);
      for (i64 i = 0; i < ys.h * ys.w; ++i) plane[i] = binit;
      for (i64 ci = 0; ci < ws.c; ++ci) {
        const T* xplane = xp + (n * xs.c + ci) * xs.h * xs.w;
        const T* wk = wp + (co * ws.c + ci) * ws.h * ws.w;
        for (i64 kh = 0; kh < ws.h; ++kh) {
          i64 oh_lo, oh_hi;
          conv_bounds(kh, g.dilation, g.padding, g.stride, xs.h, ys.h, oh_lo, oh_hi);
          for (i64 kw = 0; kw < ws.w; ++kw) {
            i64 ow_lo, ow_hi;
            conv_bounds(kw, g.dilation, g.padding, g.stride, xs.w, ys.w, ow_lo, ow_hi);
            const T wv = wk[kh * ws.w + kw];
            for (i64 oh = oh_lo; oh <= oh_hi; ++oh) {
              const i64 ih = oh * g.stride - g.padding + kh * g.dilation;
              const T* xrow = xplane + ih * xs.w;
              T* yrow = plane + oh * ys.w;
              for (i64 ow = ow_lo; ow <= ow_hi; ++ow) {
                const i64 iw = ow * g.stride - g.padding + kw * g.dilation;
                yrow[ow] += wv * xrow[iw];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_bwd_x(T* gx, const Shape& xs, const Tensor<T>& w, const T* gy,
                  const Shape& ys, const ConvSpec& g) {
  const Shape ws = w.shape();
  const T* wp = w.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < xs.n; ++n) {
    for (i64 ci = 0; ci < xs.c; ++ci) {
      T* gxplane = gx + (n * xs.c + ci) * xs.h * xs.w;
      for (i64 co = 0; co < ys.c; ++co) {
        const T* gyplane = gy + (n * ys.c + co) * ys.h * ys.w;
        const T* wk = wp + (co * ws.c + ci) * ws.h * ws.w;
        for (i64 kh = 0; kh < ws.h; ++kh) {
          i64 oh_lo, oh_hi;
          conv_bounds(kh, g.dilation, g.padding, g.stride, xs.h, ys.h, oh_lo, oh_hi);
          for (i64 kw = 0; kw < ws.w; ++kw) {
            i64 ow_lo, ow_hi;
            conv_bounds(kw, g.dilation, g.padding, g.stride, xs.w, ys.w, ow_lo, ow_hi);
            const T wv = wk[kh * ws.w + kw];
            for (i64 oh = oh_lo; oh <= oh_hi; ++oh) {
              const i64 ih = oh * g.stride - g.padding + kh * g.dilation;
              T* gxrow = gxplane + ih * xs.w;
              const T* gyrow = gyplane + oh * ys.w;
              for (i64 ow = ow_lo; ow <= ow_hi; ++ow) {
                const i64 iw = ow * g.stride - g.padding + kw * g.dilation;
                gxrow[iw] += wv * gyrow[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv2d_bwd_w(const Tensor<T>& x, T* gw, const Shape& ws, const T* gy,
                  const Shape& ys, const ConvSpec& g) {
  const Shape xs = x.shape();
  const T* xp = x.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 co = 0; co < ws.n; ++co) {
    for (i64 ci = 0; ci < ws.c; ++ci) {
      T* gwk = gw + (co * ws.c + ci) * ws.h * ws.w;
      for (i64 kh = 0; kh < ws.h; ++kh) {
        i64 oh_lo, oh_hi;
        conv_bounds(kh, g.dilation, g.padding, g.stride, xs.h, ys.h, oh_lo, oh_hi);
        for (i64 kw = 0; kw < ws.w; ++kw) {
          i64 ow_lo, ow_hi;
          conv_bounds(kw, g.dilation, g.padding, g.stride, xs.w, ys.w, ow_lo, ow_hi);
          T acc = T(0);
          for (i64 n = 0; n < ys.n; ++n) {
            const T* xplane = xp + (n * xs.c + ci) * xs.h * xs.w;
            const T* gyplane = gy + (n * ys.c + co) * ys.h * ys.w;
            for (i64 oh = oh_lo; oh <= oh_hi; ++oh) {
              const i64 ih = oh * g.stride - g.padding + kh * g.dilation;
              const T* xrow = xplane + ih * xs.w;
              const T* gyrow = gyplane + oh * ys.w;
              for (i64 ow = ow_lo; ow <= ow_hi; ++ow) {
                const i64 iw = ow * g.stride - g.padding + kw * g.dilation;
                acc += xrow[iw] * gyrow[ow];
              }
            }
          }
          gwk[kh * ws.w + kw] += acc;
        }
      }
    }
  }
}

template <typename T>
void conv2d_bwd_b(T* gb, const T* gy, const Shape& ys) {
#pragma omp parallel for schedule(static)
  for (i64 co = 0; co < ys.c; ++co) {
    T acc = T(0);
    for (i64 n = 0; n < ys.n; ++n) {
      const T* plane = gy + (n * ys.c + co) * ys.h * ys.w;
      for (i64 i = 0; i < ys.h * ys.w; ++i) acc += plane[i];
    }
    gb[co] += acc;
  }
}

template <typename T>
void convt2d_fwd(const Tensor<T>& x, const Tensor<T>& w, Tensor<T>& y,
                 const ConvTSpec& g) {
  const Shape xs = x.shape(), ws = w.shape(), ys = y.shape();
  const T* xp = x.data();
  const T* wp = w.data();
  T* yp = y.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < ys.n; ++n) {
    for (i64 co = 0; co < ys.c; ++co) {
      T* plane = yp + (n * ys.c + co) * ys.h * ys.w;
      std::memset(plane, 0, sizeof(T) * ys.h * ys.w);
      for (i64 ci = 0; ci < xs.c; ++ci) {
        const T* xplane = xp + (n * xs.c + ci) * xs.h * xs.w;
        const T* wk = wp + (ci * ws.c + co) * ws.h * ws.w;
        for (i64 kh = 0; kh < ws.h; ++kh) {
          for (i64 kw = 0; kw < ws.w; ++kw) {
            const T wv = wk[kh * ws.w + kw];
            for (i64 ih = 0; ih < xs.h; ++ih) {
              const i64 oh = ih * g.stride - g.padding + kh;
              if (oh < 0 || oh >= ys.h) continue;
              const T* xrow = xplane + ih * xs.w;
              T* yrow = plane + oh * ys.w;
              for (i64 iw = 0; iw < xs.w; ++iw) {
                const i64 ow = iw * g.stride - g.padding + kw;
                if (ow < 0 || ow >= ys.w) continue;
                yrow[ow] += wv * xrow[iw];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void convt2d_bwd_x(T* gx, const Shape& xs, const Tensor<T>& w, const T* gy,
                   const Shape& ys, const ConvTSpec& g) {
  const Shape ws = w.shape();
  const T* wp = w.data();
  // The input gradient of a transposed conv is a plain convolution of the
  // output gradient; each input element gathers its own sum.
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < xs.n; ++n) {
    for (i64 ci = 0; ci < xs.c; ++ci) {
      T* gxplane = gx + (n * xs.c + ci) * xs.h * xs.w;
      for (i64 co = 0; co < ys.c; ++co) {
        const T* gyplane = gy + (n * ys.c + co) * ys.h * ys.w;
        const T* wk = wp + (ci * ws.c + co) * ws.h * ws.w;
        for (i64 kh = 0; kh < ws.h; ++kh) {
          for (i64 kw = 0; kw < ws.w; ++kw) {
            const T wv = wk[kh * ws.w + kw];
            for (i64 ih = 0; ih < xs.h; ++ih) {
              const i64 oh = ih * g.stride - g.padding + kh;
              if (oh < 0 || oh >= ys.h) continue;
              T* gxrow = gxplane + ih * xs.w;
              const T* gyrow = gyplane + oh * ys.w;
              for (i64 iw = 0; iw < xs.w; ++iw) {
                const i64 ow = iw * g.stride - g.padding + kw;
                if (ow < 0 || ow >= ys.w) continue;
                gxrow[iw] += wv * gyrow[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void convt2d_bwd_w(const Tensor<T>& x, T* gw, const Shape& ws, const T* gy,
                   const Shape& ys, const ConvTSpec& g) {
  const Shape xs = x.shape();
  const T* xp = x.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 ci = 0; ci < ws.n; ++ci) {
    for (i64 co = 0; co < ws.c; ++co) {
      T* gwk = gw + (ci * ws.c + co) * ws.h * ws.w;
      for (i64 kh = 0; kh < ws.h; ++kh) {
        for (i64 kw = 0; kw < ws.w; ++kw) {
          T acc = T(0);
          for (i64 n = 0; n < xs.n; ++n) {
            const T* xplane = xp + (n * xs.c + ci) * xs.h * xs.w;
            const T* gyplane = gy + (n * ys.c + co) * ys.h * ys.w;
            for (i64 ih = 0; ih < xs.h; ++ih) {
              const i64 oh = ih * g.stride - g.padding + kh;
              if (oh < 0 || oh >= ys.h) continue;
              const T* xrow = xplane + ih * xs.w;
              const T* gyrow = gyplane + oh * ys.w;
              for (i64 iw = 0; iw < xs.w; ++iw) {
                const i64 ow = iw * g.stride - g.padding + kw;
                if (ow < 0 || ow >= ys.w) continue;
                acc += xrow[iw] * gyrow[ow];
              }
            }
          }
          gwk[kh * ws.w + kw] += acc;
        }
      }
    }
  }
}

template <typename T>
void bn_fwd_train(const Tensor<T>& x, const T* gamma, const T* beta,
                  Tensor<T>& y, std::vector<T>& saved_mean,
                  std::vector<T>& saved_invstd, T* running_mean,
                  T* running_var, T momentum, T eps) {
  const Shape xs = x.shape();
  const i64 plane = xs.h * xs.w;
  const i64 count = xs.n * plane;
  const T* xp = x.data();
  T* yp = y.data();
  saved_mean.assign(xs.c, T(0));
  saved_invstd.assign(xs.c, T(0));
#pragma omp parallel for schedule(static)
  for (i64 c = 0; c < xs.c; ++c) {
    double s = 0.0;
    for (i64 n = 0; n < xs.n; ++n) {
      const T* p = xp + (n * xs.c + c) * plane;
      for (i64 i = 0; i < plane; ++i) s += p[i];
    }
    const double mean = s / count;
    double v = 0.0;
    for (i64 n = 0; n < xs.n; ++n) {
      const T* p = xp + (n * xs.c + c) * plane;
      for (i64 i = 0; i < plane; ++i) {
        const double d = p[i] - mean;
        v += d * d;
      }
    }
    const double var = v / count;
    const double invstd = 1.0 / std::sqrt(var + (double)eps);
    saved_mean[c] = (T)mean;
    saved_invstd[c] = (T)invstd;
    const T g = gamma[c], b = beta[c];
    for (i64 n = 0; n < xs.n; ++n) {
      const T* p = xp + (n * xs.c + c) * plane;
      T* q = yp + (n * xs.c + c) * plane;
      for (i64 i = 0; i < plane; ++i)
        q[i] = g * (T)((p[i] - mean) * invstd) + b;
    }
    running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * (T)mean;
    running_var[c] = (T(1) - momentum) * running_var[c] + momentum * (T)var;
  }
}

template <typename T>
void bn_fwd_eval(const Tensor<T>& x, const T* gamma, const T* beta,
                 Tensor<T>& y, const T* running_mean, const T* running_var,
                 T eps) {
  const Shape xs = x.shape();
  const i64 plane = xs.h * xs.w;
  const T* xp = x.data();
  T* yp = y.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < xs.n; ++n) {
    for (i64 c = 0; c < xs.c; ++c) {
      const T invstd = T(1) / std::sqrt(running_var[c] + eps);
      const T g = gamma[c], b = beta[c], m = running_mean[c];
      const T* p = xp + (n * xs.c + c) * plane;
      T* q = yp + (n * xs.c + c) * plane;
      for (i64 i = 0; i < plane; ++i) q[i] = g * (p[i] - m) * invstd + b;
    }
  }
}

template <typename T>
void bn_bwd(const Tensor<T>& x, const T* gamma, const T* gy,
            const std::vector<T>& saved_mean, const std::vector<T>& saved_invstd,
            T* gx, T* ggamma, T* gbeta) {
  const Shape xs = x.shape();
  const i64 plane = xs.h * xs.w;
  const i64 count = xs.n * plane;
  const T* xp = x.data();
#pragma omp parallel for schedule(static)
  for (i64 c = 0; c < xs.c; ++c) {
    const double mean = saved_mean[c], invstd = saved_invstd[c];
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (i64 n = 0; n < xs.n; ++n) {
      const T* p = xp + (n * xs.c + c) * plane;
      const T* gyp = gy + (n * xs.c + c) * plane;
      for (i64 i = 0; i < plane; ++i) {
        const double xhat = (p[i] - mean) * invstd;
        sum_gy += gyp[i];
        sum_gy_xhat += gyp[i] * xhat;
      }
    }
    if (ggamma) ggamma[c] += (T)sum_gy_xhat;
    if (gbeta) gbeta[c] += (T)sum_gy;
    if (gx) {
      const double g = gamma[c];
      const double k1 = sum_gy / count, k2 = sum_gy_xhat / count;
      for (i64 n = 0; n < xs.n; ++n) {
        const T* p = xp + (n * xs.c + c) * plane;
        const T* gyp = gy + (n * xs.c + c) * plane;
        T* gxp = gx + (n * xs.c + c) * plane;
        for (i64 i = 0; i < plane; ++i) {
          const double xhat = (p[i] - mean) * invstd;
          gxp[i] += (T)(g * invstd * (gyp[i] - k1 - xhat * k2));
        }
      }
    }
  }
}

template <typename T>
void maxpool_fwd(const Tensor<T>& x, Tensor<T>& y, std::vector<i64>& argmax,
                 const PoolSpec& g) {
  const Shape xs = x.shape(), ys = y.shape();
  const T* xp = x.data();
  T* yp = y.data();
  argmax.assign(y.numel(), -1);
  i64* am = argmax.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < ys.n; ++n) {
    for (i64 c = 0; c < ys.c; ++c) {
      const T* xplane = xp + (n * xs.c + c) * xs.h * xs.w;
      const i64 xbase = (n * xs.c + c) * xs.h * xs.w;
      T* yplane = yp + (n * ys.c + c) * ys.h * ys.w;
      i64* aplane = am + (n * ys.c + c) * ys.h * ys.w;
      for (i64 oh = 0; oh < ys.h; ++oh) {
        for (i64 ow = 0; ow < ys.w; ++ow) {
          T best = -std::numeric_limits<T>::infinity();
          i64 besti = -1;
          for (i64 kh = 0; kh < g.kernel; ++kh) {
            const i64 ih = oh * g.stride - g.padding + kh;
            if (ih < 0 || ih >= xs.h) continue;
            for (i64 kw = 0; kw < g.kernel; ++kw) {
              const i64 iw = ow * g.stride - g.padding + kw;
              if (iw < 0 || iw >= xs.w) continue;
              const T v = xplane[ih * xs.w + iw];
              if (v > best) {  // first occurrence wins on ties
                best = v;
                besti = xbase + ih * xs.w + iw;
              }
            }
          }
          yplane[oh * ys.w + ow] = besti < 0 ? T(0) : best;
          aplane[oh * ys.w + ow] = besti;
        }
      }
    }
  }
}

template <typename T>
void maxpool_bwd(T* gx, const T* gy, const Shape& ys,
                 const std::vector<i64>& argmax) {
  const i64* am = argmax.data();
  const i64 plane = ys.h * ys.w;
  // Overlapping windows can share an argmax, so scatter serially within
  // each (n,c) plane; planes touch disjoint regions of gx.
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < ys.n; ++n) {
    for (i64 c = 0; c < ys.c; ++c) {
      const i64 base = (n * ys.c + c) * plane;
      for (i64 i = 0; i < plane; ++i) {
        const i64 src = am[base + i];
        if (src >= 0) gx[src] += gy[base + i];
      }
    }
  }
}

template <typename T>
void gap_fwd(const Tensor<T>& x, Tensor<T>& y) {
  const Shape xs = x.shape();
  const i64 plane = xs.h * xs.w;
  const T* xp = x.data();
  T* yp = y.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < xs.n; ++n) {
    for (i64 c = 0; c < xs.c; ++c) {
      const T* p = xp + (n * xs.c + c) * plane;
      double s = 0.0;
      for (i64 i = 0; i < plane; ++i) s += p[i];
      yp[n * xs.c + c] = (T)(s / plane);
    }
  }
}

template <typename T>
void gap_bwd(T* gx, const Shape& xs, const T* gy) {
  const i64 plane = xs.h * xs.w;
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < xs.n; ++n) {
    for (i64 c = 0; c < xs.c; ++c) {
      const T g = gy[n * xs.c + c] / (T)plane;
      T* p = gx + (n * xs.c + c) * plane;
      for (i64 i = 0; i < plane; ++i) p[i] += g;
    }
  }
}

namespace {
struct LerpCoord {
  i64 lo, hi;
  double frac;
};
inline LerpCoord bilinear_coord(i64 o, i64 in, i64 out) {
  double s = ((double)o + 0.5) * ((double)in / (double)out) - 0.5;
  if (s < 0.0) s = 0.0;
  if (s > (double)(in - 1)) s = (double)(in - 1);
  const i64 lo = (i64)s;
  const i64 hi = std::min(lo + 1, in - 1);
  return {lo, hi, s - (double)lo};
}
}  // namespace

template <typename T>
void bilinear_fwd(const Tensor<T>& x, Tensor<T>& y) {
  const Shape xs = x.shape(), ys = y.shape();
  if (xs.h == ys.h && xs.w == ys.w) {
    std::memcpy(y.data(), x.data(), sizeof(T) * x.numel());
    return;
  }
  const T* xp = x.data();
  T* yp = y.data();
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < ys.n; ++n) {
    for (i64 c = 0; c < ys.c; ++c) {
      const T* xplane = xp + (n * xs.c + c) * xs.h * xs.w;
      T* yplane = yp + (n * ys.c + c) * ys.h * ys.w;
      for (i64 oh = 0; oh < ys.h; ++oh) {
        const LerpCoord cy = bilinear_coord(oh, xs.h, ys.h);
        for (i64 ow = 0; ow < ys.w; ++ow) {
          const LerpCoord cx = bilinear_coord(ow, xs.w, ys.w);
          const double v00 = xplane[cy.lo * xs.w + cx.lo];
          const double v01 = xplane[cy.lo * xs.w + cx.hi];
          const double v10 = xplane[cy.hi * xs.w + cx.lo];
          const double v11 = xplane[cy.hi * xs.w + cx.hi];
          const double top = v00 + (v01 - v00) * cx.frac;
          const double bot = v10 + (v11 - v10) * cx.frac;
          yplane[oh * ys.w + ow] = (T)(top + (bot - top) * cy.frac);
        }
      }
    }
  }
}

template <typename T>
void bilinear_bwd(T* gx, const Shape& xs, const T* gy, const Shape& ys) {
  if (xs.h == ys.h && xs.w == ys.w) {
    const i64 n = ys.numel();
#pragma omp parallel for schedule(static)
    for (i64 i = 0; i < n; ++i) gx[i] += gy[i];
    return;
  }
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < ys.n; ++n) {
    for (i64 c = 0; c < ys.c; ++c) {
      const T* gyplane = gy + (n * ys.c + c) * ys.h * ys.w;
      T* gxplane = gx + (n * xs.c + c) * xs.h * xs.w;
      for (i64 oh = 0; oh < ys.h; ++oh) {
        const LerpCoord cy = bilinear_coord(oh, xs.h, ys.h);
        for (i64 ow = 0; ow < ys.w; ++ow) {
          const LerpCoord cx = bilinear_coord(ow, xs.w, ys.w);
          const double g = gyplane[oh * ys.w + ow];
          gxplane[cy.lo * xs.w + cx.lo] += (T)(g * (1.0 - cy.frac) * (1.0 - cx.frac));
          gxplane[cy.lo * xs.w + cx.hi] += (T)(g * (1.0 - cy.frac) * cx.frac);
          gxplane[cy.hi * xs.w + cx.lo] += (T)(g * cy.frac * (1.0 - cx.frac));
          gxplane[cy.hi * xs.w + cx.hi] += (T)(g * cy.frac * cx.frac);
        }
      }
    }
  }
}

template <typename T>
T softmax_ce_fwd(const Tensor<T>& logits, const LabelMap& labels,
                 std::int32_t ignore_value, Tensor<T>& probs, i64& counted) {
  const Shape ls = logits.shape();
  const i64 K = ls.c, plane = ls.h * ls.w;
  const T* lp = logits.data();
  T* pp = probs.data();
  std::vector<double> pixel_loss(ls.n * plane, 0.0);
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < ls.n; ++n) {
    for (i64 px = 0; px < plane; ++px) {
      const T* lpix = lp + n * K * plane + px;
      T* ppix = pp + n * K * plane + px;
      double mx = lpix[0];
      for (i64 k = 1; k < K; ++k) mx = std::max(mx, (double)lpix[k * plane]);
      double se = 0.0;
      for (i64 k = 0; k < K; ++k) se += std::exp((double)lpix[k * plane] - mx);
      const double lse = std::log(se);
      for (i64 k = 0; k < K; ++k)
        ppix[k * plane] = (T)std::exp((double)lpix[k * plane] - mx - lse);
      const std::int32_t lab = labels.v[n * plane + px];
      if (lab != ignore_value)
        pixel_loss[n * plane + px] = -((double)lpix[lab * plane] - mx - lse);
    }
  }
  double total = 0.0;
  i64 cnt = 0;
  for (i64 i = 0; i < ls.n * plane; ++i)
    if (labels.v[i] != ignore_value) {
      total += pixel_loss[i];
      ++cnt;
    }
  counted = cnt;
  return cnt == 0 ? T(0) : (T)(total / cnt);
}

template <typename T>
void softmax_ce_bwd(T* glogits, const Tensor<T>& probs, const LabelMap& labels,
                    std::int32_t ignore_value, i64 counted, T loss_grad) {
  if (counted == 0) return;
  const Shape ls = probs.shape();
  const i64 K = ls.c, plane = ls.h * ls.w;
  const T* pp = probs.data();
  const T scale = loss_grad / (T)counted;
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 n = 0; n < ls.n; ++n) {
    for (i64 px = 0; px < plane; ++px) {
      const std::int32_t lab = labels.v[n * plane + px];
      if (lab == ignore_value) continue;
      const T* ppix = pp + n * K * plane + px;
      T* gpix = glogits + n * K * plane + px;
      for (i64 k = 0; k < K; ++k) {
        T g = ppix[k * plane];
        if (k == lab) g -= T(1);
        gpix[k * plane] += scale * g;
      }
    }
  }
}

template <typename T>
void relu_fwd(const Tensor<T>& x, Tensor<T>& y) {
  const T* xp = x.data();
  T* yp = y.data();
  const i64 n = x.numel();
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < n; ++i) yp[i] = xp[i] > T(0) ? xp[i] : T(0);
}

template <typename T>
void relu_bwd(T* gx, const T* xvals, const T* gy, i64 n) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < n; ++i)
    if (xvals[i] > T(0)) gx[i] += gy[i];
}

template <typename T>
void add_fwd(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y) {
  const T* ap = a.data();
  const T* bp = b.data();
  T* yp = y.data();
  const i64 n = a.numel();
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < n; ++i) yp[i] = ap[i] + bp[i];
}

template <typename T>
void mul_fwd(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y) {
  const T* ap = a.data();
  const T* bp = b.data();
  T* yp = y.data();
  const i64 n = a.numel();
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < n; ++i) yp[i] = ap[i] * bp[i];
}

template <typename T>
void axpy_acc(T* acc, const T* src, i64 n, T alpha) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < n; ++i) acc[i] += alpha * src[i];
}

template <typename T>
void mul_acc(T* acc, const T* a, const T* b, i64 n) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < n; ++i) acc[i] += a[i] * b[i];
}

template <typename T>
T sum_all(const Tensor<T>& x) {
  const T* xp = x.data();
  double s = 0.0;
  for (i64 i = 0; i < x.numel(); ++i) s += xp[i];
  return (T)s;
}

template <typename T>
void fill_acc(T* acc, i64 n, T v) {
#pragma omp parallel for schedule(static)
  for (i64 i = 0; i < n; ++i) acc[i] += v;
}

#define PG_INSTANTIATE(T)                                                        \
  template void conv2d_fwd<T>(const Tensor<T>&, const Tensor<T>&, const T*,      \
                              Tensor<T>&, const ConvSpec&);                      \
  template void conv2d_bwd_x<T>(T*, const Shape&, const Tensor<T>&, const T*,    \
                                const Shape&, const ConvSpec&);                  \
  template void conv2d_bwd_w<T>(const Tensor<T>&, T*, const Shape&, const T*,    \
                                const Shape&, const ConvSpec&);                  \
  template void conv2d_bwd_b<T>(T*, const T*, const Shape&);                     \
  template void convt2d_fwd<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&,   \
                               const ConvTSpec&);                                \
  template void convt2d_bwd_x<T>(T*, const Shape&, const Tensor<T>&, const T*,   \
                                 const Shape&, const ConvTSpec&);                \
  template void convt2d_bwd_w<T>(const Tensor<T>&, T*, const Shape&, const T*,   \
                                 const Shape&, const ConvTSpec&);                \
  template void bn_fwd_train<T>(const Tensor<T>&, const T*, const T*,            \
                                Tensor<T>&, std::vector<T>&, std::vector<T>&,    \
                                T*, T*, T, T);                                   \
  template void bn_fwd_eval<T>(const Tensor<T>&, const T*, const T*, Tensor<T>&, \
                               const T*, const T*, T);                           \
  template void bn_bwd<T>(const Tensor<T>&, const T*, const T*,                  \
                          const std::vector<T>&, const std::vector<T>&, T*, T*,  \
                          T*);                                                   \
  template void maxpool_fwd<T>(const Tensor<T>&, Tensor<T>&, std::vector<i64>&,  \
                               const PoolSpec&);                                 \
  template void maxpool_bwd<T>(T*, const T*, const Shape&,                       \
                               const std::vector<i64>&);                         \
  template void gap_fwd<T>(const Tensor<T>&, Tensor<T>&);                        \
  template void gap_bwd<T>(T*, const Shape&, const T*);                          \
  template void bilinear_fwd<T>(const Tensor<T>&, Tensor<T>&);                   \
  template void bilinear_bwd<T>(T*, const Shape&, const T*, const Shape&);       \
  template T softmax_ce_fwd<T>(const Tensor<T>&, const LabelMap&, std::int32_t,  \
                               Tensor<T>&, i64&);                                \
  template void softmax_ce_bwd<T>(T*, const Tensor<T>&, const LabelMap&,         \
                                  std::int32_t, i64, T);                         \
  template void relu_fwd<T>(const Tensor<T>&, Tensor<T>&);                       \
  template void relu_bwd<T>(T*, const T*, const T*, i64);                        \
  template void add_fwd<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);      \
  template void mul_fwd<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>&);      \
  template void axpy_acc<T>(T*, const T*, i64, T);                               \
  template void mul_acc<T>(T*, const T*, const T*, i64);                         \
  template T sum_all<T>(const Tensor<T>&);                                       \
  template void fill_acc<T>(T*, i64, T);

PG_INSTANTIATE(float)
PG_INSTANTIATE(double)
#undef PG_INSTANTIATE

}  // namespace pg::kern
