#include "parsegrid/ops.hpp"

#include <cmath>
#include <cstring>

namespace pg::ops {

namespace {

inline bool recording() { return Tape::current() != nullptr; }

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b,
                 i64 stride, i64 padding, i64 dilation) {
  const Shape xs = x.shape(), ws = w.shape();
  check(stride >= 1 && dilation >= 1 && padding >= 0,
        strf("conv2d: need stride>=1, dilation>=1, padding>=0, got s=%lld p=%lld d=%lld",
             (long long)stride, (long long)padding, (long long)dilation));
  check(xs.c == ws.c, "conv2d: input channels " + std::to_string(xs.c) +
                          " do not match weight Cin " + std::to_string(ws.c) +
                          " (x " + xs.str() + ", w " + ws.str() + ")");
  if (b)
    check(b->numel() == ws.n, "conv2d: bias length " + std::to_string(b->numel()) +
                                  " does not match Cout " + std::to_string(ws.n));
  const kern::ConvSpec g{stride, padding, dilation};
  const i64 Ho = kern::conv_out_dim(xs.h, ws.h, g);
  const i64 Wo = kern::conv_out_dim(xs.w, ws.w, g);
  check(Ho >= 1 && Wo >= 1,
        "conv2d: invalid geometry, output would be " + std::to_string(Ho) + "x" +
            std::to_string(Wo) + " for input " + xs.str() + " kernel " + ws.str());
  Tensor<T> y(Shape{xs.n, ws.n, Ho, Wo});
  kern::conv2d_fwd(x, w, b ? b->data() : nullptr, y, g);

  const bool need = x.grad_path() || w.grad_path() || (b && b->grad_path());
  if (recording() && need) {
    y.mark_on_tape();
    Tensor<T> xc = x, wc = w, yc = y;
    std::optional<Tensor<T>> bc;
    if (b) bc = *b;
    Tape::current()->record([xc, wc, yc, bc, g]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad_ptr();
      if (xc.grad_path())
        kern::conv2d_bwd_x(xc.grad(), xc.shape(), wc, gy, yc.shape(), g);
      if (wc.grad_path())
        kern::conv2d_bwd_w(xc, wc.grad(), wc.shape(), gy, yc.shape(), g);
      if (bc && bc->grad_path()) kern::conv2d_bwd_b(bc->grad(), gy, yc.shape());
    });
  }
  return y;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, i64 stride,
                           i64 padding, i64 output_padding) {
  const Shape xs = x.shape(), ws = w.shape();
  check(stride >= 1 && padding >= 0 && output_padding >= 0 &&
            output_padding < stride + 1,
        strf("conv_transpose2d: bad geometry s=%lld p=%lld op=%lld",
             (long long)stride, (long long)padding, (long long)output_padding));
  check(xs.c == ws.n, "conv_transpose2d: input channels " + std::to_string(xs.c) +
                          " do not match weight Cin " + std::to_string(ws.n) +
                          " (x " + xs.str() + ", w " + ws.str() + ")");
  const kern::ConvTSpec g{stride, padding, output_padding};
  const i64 Ho = kern::convt_out_dim(xs.h, ws.h, g);
  const i64 Wo = kern::convt_out_dim(xs.w, ws.w, g);
  check(Ho >= 1 && Wo >= 1,
        "conv_transpose2d: invalid geometry, output would be " +
            std::to_string(Ho) + "x" + std::to_string(Wo));
  Tensor<T> y(Shape{xs.n, ws.c, Ho, Wo});
  kern::convt2d_fwd(x, w, y, g);

  if (recording() && (x.grad_path() || w.grad_path())) {
    y.mark_on_tape();
    Tensor<T> xc = x, wc = w, yc = y;
    Tape::current()->record([xc, wc, yc, g]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad_ptr();
      if (xc.grad_path())
        kern::convt2d_bwd_x(xc.grad(), xc.shape(), wc, gy, yc.shape(), g);
      if (wc.grad_path())
        kern::convt2d_bwd_w(xc, wc.grad(), wc.shape(), gy, yc.shape(), g);
    });
  }
  return y;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BnState<T>& state, bool train,
                     T momentum, T eps) {
  const Shape xs = x.shape();
  check(gamma.numel() == xs.c && beta.numel() == xs.c,
        strf("batch_norm: gamma/beta length (%lld/%lld) must equal C=%lld",
             (long long)gamma.numel(), (long long)beta.numel(), (long long)xs.c));
  check(state.running_mean.numel() == xs.c && state.running_var.numel() == xs.c,
        "batch_norm: running stats sized for " +
            std::to_string(state.running_mean.numel()) + " channels, input has " +
            std::to_string(xs.c));
  Tensor<T> y(xs);
  if (!train) {
    kern::bn_fwd_eval(x, gamma.data(), beta.data(), y,
                      state.running_mean.data(), state.running_var.data(), eps);
    return y;  // eval mode is never recorded
  }
  std::vector<T> saved_mean, saved_invstd;
  kern::bn_fwd_train(x, gamma.data(), beta.data(), y, saved_mean, saved_invstd,
                     state.running_mean.data(), state.running_var.data(),
                     momentum, eps);
  if (recording() && (x.grad_path() || gamma.grad_path() || beta.grad_path())) {
    y.mark_on_tape();
    Tensor<T> xc = x, gc = gamma, bc = beta, yc = y;
    Tape::current()->record([xc, gc, bc, yc, sm = std::move(saved_mean),
                             si = std::move(saved_invstd)]() mutable {
      if (!yc.has_grad()) return;
      kern::bn_bwd(xc, gc.data(), yc.grad_ptr(), sm, si,
                   xc.grad_path() ? xc.grad() : nullptr,
                   gc.grad_path() ? gc.grad() : nullptr,
                   bc.grad_path() ? bc.grad() : nullptr);
    });
  }
  return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  kern::relu_fwd(x, y);
  if (recording() && x.grad_path()) {
    y.mark_on_tape();
    Tensor<T> xc = x, yc = y;
    Tape::current()->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      kern::relu_bwd(xc.grad(), xc.data(), yc.grad_ptr(), xc.numel());
    });
  }
  return y;
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, i64 k, i64 stride, i64 padding) {
  const Shape xs = x.shape();
  check(k >= 1 && stride >= 1 && padding >= 0 && padding < k,
        strf("max_pool2d: bad geometry k=%lld s=%lld p=%lld", (long long)k,
             (long long)stride, (long long)padding));
  const kern::PoolSpec g{k, stride, padding};
  const i64 Ho = kern::pool_out_dim(xs.h, g);
  const i64 Wo = kern::pool_out_dim(xs.w, g);
  check(Ho >= 1 && Wo >= 1, "max_pool2d: invalid geometry, output would be " +
                                std::to_string(Ho) + "x" + std::to_string(Wo) +
                                " for input " + xs.str());
  Tensor<T> y(Shape{xs.n, xs.c, Ho, Wo});
  std::vector<i64> argmax;
  kern::maxpool_fwd(x, y, argmax, g);
  if (recording() && x.grad_path()) {
    y.mark_on_tape();
    Tensor<T> xc = x, yc = y;
    Tape::current()->record([xc, yc, am = std::move(argmax)]() mutable {
      if (!yc.has_grad()) return;
      kern::maxpool_bwd(xc.grad(), yc.grad_ptr(), yc.shape(), am);
    });
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const Shape xs = x.shape();
  Tensor<T> y(Shape{xs.n, xs.c, 1, 1});
  kern::gap_fwd(x, y);
  if (recording() && x.grad_path()) {
    y.mark_on_tape();
    Tensor<T> xc = x, yc = y;
    Tape::current()->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      kern::gap_bwd(xc.grad(), xc.shape(), yc.grad_ptr());
    });
  }
  return y;
}

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) {
  check(x.shape() == y.shape(),
        "add: shapes differ, " + x.shape().str() + " vs " + y.shape().str());
  Tensor<T> z(x.shape());
  kern::add_fwd(x, y, z);
  if (recording() && (x.grad_path() || y.grad_path())) {
    z.mark_on_tape();
    Tensor<T> xc = x, yc = y, zc = z;
    Tape::current()->record([xc, yc, zc]() mutable {
      if (!zc.has_grad()) return;
      const T* gz = zc.grad_ptr();
      if (xc.grad_path()) kern::axpy_acc(xc.grad(), gz, xc.numel(), T(1));
      if (yc.grad_path()) kern::axpy_acc(yc.grad(), gz, yc.numel(), T(1));
    });
  }
  return z;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y) {
  check(x.shape() == y.shape(),
        "mul: shapes differ, " + x.shape().str() + " vs " + y.shape().str());
  Tensor<T> z(x.shape());
  kern::mul_fwd(x, y, z);
  if (recording() && (x.grad_path() || y.grad_path())) {
    z.mark_on_tape();
    Tensor<T> xc = x, yc = y, zc = z;
    Tape::current()->record([xc, yc, zc]() mutable {
      if (!zc.has_grad()) return;
      const T* gz = zc.grad_ptr();
      if (xc.grad_path()) kern::mul_acc(xc.grad(), gz, yc.data(), xc.numel());
      if (yc.grad_path()) kern::mul_acc(yc.grad(), gz, xc.data(), yc.numel());
    });
  }
  return z;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T alpha) {
  Tensor<T> y(x.shape());
  const T* xp = x.data();
  T* yp = y.data();
  for (i64 i = 0; i < x.numel(); ++i) yp[i] = alpha * xp[i];
  if (recording() && x.grad_path()) {
    y.mark_on_tape();
    Tensor<T> xc = x, yc = y;
    Tape::current()->record([xc, yc, alpha]() mutable {
      if (!yc.has_grad()) return;
      kern::axpy_acc(xc.grad(), yc.grad_ptr(), xc.numel(), alpha);
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> y = Tensor<T>::scalar(kern::sum_all(x));
  if (recording() && x.grad_path()) {
    y.mark_on_tape();
    Tensor<T> xc = x, yc = y;
    Tape::current()->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      kern::fill_acc(xc.grad(), xc.numel(), yc.grad_ptr()[0]);
    });
  }
  return y;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  check(!xs.empty(), "concat_channels: empty input list");
  const Shape s0 = xs[0].shape();
  i64 ctotal = 0;
  for (const auto& t : xs) {
    const Shape s = t.shape();
    check(s.n == s0.n && s.h == s0.h && s.w == s0.w,
          "concat_channels: mismatched N/H/W, " + s.str() + " vs " + s0.str());
    ctotal += s.c;
  }
  Tensor<T> y(Shape{s0.n, ctotal, s0.h, s0.w});
  const i64 plane = s0.h * s0.w;
  T* yp = y.data();
  bool need = false;
  i64 coff = 0;
  for (const auto& t : xs) {
    const i64 c = t.shape().c;
    const T* tp = t.data();
    for (i64 n = 0; n < s0.n; ++n)
      std::memcpy(yp + (n * ctotal + coff) * plane, tp + n * c * plane,
                  sizeof(T) * c * plane);
    coff += c;
    need = need || t.grad_path();
  }
  if (recording() && need) {
    y.mark_on_tape();
    std::vector<Tensor<T>> xc = xs;
    Tensor<T> yc = y;
    Tape::current()->record([xc, yc, ctotal, plane]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad_ptr();
      const i64 N = yc.shape().n;
      i64 off = 0;
      for (auto& t : xc) {
        const i64 c = t.shape().c;
        if (t.grad_path()) {
          T* gx = t.grad();
          for (i64 n = 0; n < N; ++n)
            kern::axpy_acc(gx + n * c * plane, gy + (n * ctotal + off) * plane,
                           c * plane, T(1));
        }
        off += c;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, i64 out_h, i64 out_w) {
  check(out_h >= 1 && out_w >= 1,
        strf("bilinear_resize: target %lldx%lld must be >=1", (long long)out_h,
             (long long)out_w));
  const Shape xs = x.shape();
  Tensor<T> y(Shape{xs.n, xs.c, out_h, out_w});
  kern::bilinear_fwd(x, y);
  if (recording() && x.grad_path()) {
    y.mark_on_tape();
    Tensor<T> xc = x, yc = y;
    Tape::current()->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      kern::bilinear_bwd(xc.grad(), xc.shape(), yc.grad_ptr(), yc.shape());
    });
  }
  return y;
}

template <typename T>
Tensor<T> cross_entropy_2d(const Tensor<T>& logits, const LabelMap& labels,
                           std::int32_t ignore_value, bool* all_ignored) {
  const Shape ls = logits.shape();
  check(labels.n == ls.n && labels.h == ls.h && labels.w == ls.w,
        strf("cross_entropy_2d: labels (%lld,%lld,%lld) do not match logits %s",
             (long long)labels.n, (long long)labels.h, (long long)labels.w,
             ls.str().c_str()));
  for (i64 i = 0; i < labels.numel(); ++i) {
    const std::int32_t lab = labels.v[i];
    check(lab == ignore_value || (lab >= 0 && lab < ls.c),
          strf("cross_entropy_2d: label %d at flat index %lld outside [0,%lld) "
               "and not the ignore value %d",
               lab, (long long)i, (long long)ls.c, ignore_value));
  }
  Tensor<T> probs(ls);
  i64 counted = 0;
  const T loss = kern::softmax_ce_fwd(logits, labels, ignore_value, probs, counted);
  if (all_ignored) *all_ignored = (counted == 0);
  Tensor<T> y = Tensor<T>::scalar(loss);
  if (recording() && logits.grad_path()) {
    y.mark_on_tape();
    Tensor<T> lc = logits, yc = y;
    LabelMap labc = labels;
    Tape::current()->record([lc, yc, probs, labc, ignore_value, counted]() mutable {
      if (!yc.has_grad()) return;
      kern::softmax_ce_bwd(lc.grad(), probs, labc, ignore_value, counted,
                           yc.grad_ptr()[0]);
    });
  }
  return y;
}

template <typename T>
void validate_finite(const Tensor<T>& t, const std::string& name) {
  const T* p = t.data();
  for (i64 i = 0; i < t.numel(); ++i)
    if (!std::isfinite((double)p[i]))
      throw ShapeError(strf("%s: non-finite value %g at flat index %lld",
                            name.c_str(), (double)p[i], (long long)i));
}

template <typename T>
double finite_diff_check(const TensorFn<T>& f, Tensor<T>& x, double eps) {
  x.set_requires_grad(true);
  x.grad();
  x.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor<T> y = f(x);
    check(y.numel() == 1, "finite_diff_check: f must be scalar-valued, got " +
                              y.shape().str());
    backward(y, tape);
  }
  std::vector<T> analytic(x.grad(), x.grad() + x.numel());

  double max_err = 0.0;
  T* xp = x.data();
  for (i64 i = 0; i < x.numel(); ++i) {
    const T v = xp[i];
    xp[i] = v + (T)eps;
    const double fp = (double)f(x).item();
    xp[i] = v - (T)eps;
    const double fm = (double)f(x).item();
    xp[i] = v;
    const double fd = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double err = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
    max_err = std::max(max_err, err);
  }
  return max_err;
}

#define PG_OPS_INSTANTIATE(T)                                                   \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&,              \
                               const Tensor<T>*, i64, i64, i64);                \
  template Tensor<T> conv_transpose2d<T>(const Tensor<T>&, const Tensor<T>&,    \
                                         i64, i64, i64);                        \
  template Tensor<T> batch_norm<T>(const Tensor<T>&, const Tensor<T>&,          \
                                   const Tensor<T>&, BnState<T>&, bool, T, T);  \
  template Tensor<T> relu<T>(const Tensor<T>&);                                 \
  template Tensor<T> max_pool2d<T>(const Tensor<T>&, i64, i64, i64);            \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                      \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                             \
  template Tensor<T> sum<T>(const Tensor<T>&);                                  \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);         \
  template Tensor<T> bilinear_resize<T>(const Tensor<T>&, i64, i64);            \
  template Tensor<T> cross_entropy_2d<T>(const Tensor<T>&, const LabelMap&,     \
                                         std::int32_t, bool*);                  \
  template void validate_finite<T>(const Tensor<T>&, const std::string&);       \
  template double finite_diff_check<T>(const TensorFn<T>&, Tensor<T>&, double);

PG_OPS_INSTANTIATE(float)
PG_OPS_INSTANTIATE(double)
#undef PG_OPS_INSTANTIATE

}  // namespace pg::ops
