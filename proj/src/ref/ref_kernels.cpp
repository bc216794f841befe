#include "parsegrid/ref_kernels.hpp"

#include <algorithm>
#include <cmath>

namespace pg::ref {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const T* bias,
                 const kern::ConvSpec& g) {
  const Shape xs = x.shape(), ws = w.shape();
  const i64 Ho = kern::conv_out_dim(xs.h, ws.h, g);
  const i64 Wo = kern::conv_out_dim(xs.w, ws.w, g);
  Tensor<T> y(Shape{xs.n, ws.n, Ho, Wo});
  for (i64 n = 0; n < xs.n; ++n)
    for (i64 co = 0; co < ws.n; ++co)
      for (i64 oh = 0; oh < Ho; ++oh)
        for (i64 ow = 0; ow < Wo; ++ow) {
          double acc = bias ? (double)bias[co] : 0.0;
          for (i64 ci = 0; ci < ws.c; ++ci)
            for (i64 kh = 0; kh < ws.h; ++kh)
              for (i64 kw = 0; kw < ws.w; ++kw) {
                const i64 ih = oh * g.stride - g.padding + kh * g.dilation;
                const i64 iw = ow * g.stride - g.padding + kw * g.dilation;
                if (ih < 0 || ih >= xs.h || iw < 0 || iw >= xs.w) continue;
                acc += (double)x.at(n, ci, ih, iw) * (double)w.at(co, ci, kh, kw);
              }
          y.at(n, co, oh, ow) = (T)acc;
        }
  return y;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w,
                           const kern::ConvTSpec& g) {
  const Shape xs = x.shape(), ws = w.shape();
  const i64 Ho = kern::convt_out_dim(xs.h, ws.h, g);
  const i64 Wo = kern::convt_out_dim(xs.w, ws.w, g);
  Tensor<T> y(Shape{xs.n, ws.c, Ho, Wo});
  // Scatter-add: every input pixel stamps the kernel onto the output.
  for (i64 n = 0; n < xs.n; ++n)
    for (i64 ci = 0; ci < xs.c; ++ci)
      for (i64 ih = 0; ih < xs.h; ++ih)
        for (i64 iw = 0; iw < xs.w; ++iw) {
          const double v = x.at(n, ci, ih, iw);
          for (i64 co = 0; co < ws.c; ++co)
            for (i64 kh = 0; kh < ws.h; ++kh)
              for (i64 kw = 0; kw < ws.w; ++kw) {
                const i64 oh = ih * g.stride - g.padding + kh;
                const i64 ow = iw * g.stride - g.padding + kw;
                if (oh < 0 || oh >= Ho || ow < 0 || ow >= Wo) continue;
                y.at(n, co, oh, ow) += (T)(v * (double)w.at(ci, co, kh, kw));
              }
        }
  return y;
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, i64 out_h, i64 out_w) {
  const Shape xs = x.shape();
  Tensor<T> y(Shape{xs.n, xs.c, out_h, out_w});
  for (i64 n = 0; n < xs.n; ++n)
    for (i64 c = 0; c < xs.c; ++c)
      for (i64 oh = 0; oh < out_h; ++oh)
        for (i64 ow = 0; ow < out_w; ++ow) {
          double sy = ((double)oh + 0.5) * ((double)xs.h / out_h) - 0.5;
          double sx = ((double)ow + 0.5) * ((double)xs.w / out_w) - 0.5;
          sy = std::clamp(sy, 0.0, (double)(xs.h - 1));
          sx = std::clamp(sx, 0.0, (double)(xs.w - 1));
          const i64 y0 = (i64)sy, x0 = (i64)sx;
          const i64 y1 = std::min(y0 + 1, xs.h - 1);
          const i64 x1 = std::min(x0 + 1, xs.w - 1);
          const double fy = sy - y0, fx = sx - x0;
          const double v =
              (1 - fy) * ((1 - fx) * x.at(n, c, y0, x0) + fx * x.at(n, c, y0, x1)) +
              fy * ((1 - fx) * x.at(n, c, y1, x0) + fx * x.at(n, c, y1, x1));
          y.at(n, c, oh, ow) = (T)v;
        }
  return y;
}

template <typename T>
double cross_entropy_2d(const Tensor<T>& logits, const LabelMap& labels,
                        std::int32_t ignore_value) {
  const Shape ls = logits.shape();
  double total = 0.0;
  i64 count = 0;
  for (i64 n = 0; n < ls.n; ++n)
    for (i64 h = 0; h < ls.h; ++h)
      for (i64 w = 0; w < ls.w; ++w) {
        const std::int32_t lab = labels.at(n, h, w);
        if (lab == ignore_value) continue;
        double mx = logits.at(n, 0, h, w);
        for (i64 k = 1; k < ls.c; ++k)
          mx = std::max(mx, (double)logits.at(n, k, h, w));
        double se = 0.0;
        for (i64 k = 0; k < ls.c; ++k)
          se += std::exp((double)logits.at(n, k, h, w) - mx);
        total += -((double)logits.at(n, lab, h, w) - mx - std::log(se));
        ++count;
      }
  return count == 0 ? 0.0 : total / count;
}

template <typename T>
void bn_stats(const Tensor<T>& x, std::vector<double>& mean,
              std::vector<double>& var) {
  const Shape xs = x.shape();
  mean.assign(xs.c, 0.0);
  var.assign(xs.c, 0.0);
  const i64 count = xs.n * xs.h * xs.w;
  for (i64 c = 0; c < xs.c; ++c) {
    double s = 0.0;
    for (i64 n = 0; n < xs.n; ++n)
      for (i64 h = 0; h < xs.h; ++h)
        for (i64 w = 0; w < xs.w; ++w) s += x.at(n, c, h, w);
    mean[c] = s / count;
    double v = 0.0;
    for (i64 n = 0; n < xs.n; ++n)
      for (i64 h = 0; h < xs.h; ++h)
        for (i64 w = 0; w < xs.w; ++w) {
          const double d = x.at(n, c, h, w) - mean[c];
          v += d * d;
        }
    var[c] = v / count;
  }
}

#define PG_REF_INSTANTIATE(T)                                                  \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const T*,   \
                               const kern::ConvSpec&);                         \
  template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&,   \
                                         const kern::ConvTSpec&);              \
  template Tensor<T> bilinear_resize<T>(const Tensor<T>&, i64, i64);           \
  template double cross_entropy_2d<T>(const Tensor<T>&, const LabelMap&,       \
                                      std::int32_t);                           \
  template void bn_stats<T>(const Tensor<T>&, std::vector<double>&,            \
                            std::vector<double>&);

PG_REF_INSTANTIATE(float)
PG_REF_INSTANTIATE(double)
#undef PG_REF_INSTANTIATE

}  // namespace pg::ref
