#pragma once

#include <vector>

#include "parsegrid/common.hpp"
#include "parsegrid/tensor.hpp"

// Raw compute kernels. Forward kernels operate on tensors (values only);
// backward kernels accumulate into raw gradient buffers passed alongside
// their shapes. Nothing here knows about the tape; ops.cpp wires kernels
// into autograd. All kernels are OpenMP-parallel over independent output
// elements or planes with a fixed serial reduction order per element, so
// results are bit-identical for any worker count.
namespace pg::kern {

struct ConvSpec {
  i64 stride = 1;
  i64 padding = 0;
  i64 dilation = 1;
};

struct ConvTSpec {
  i64 stride = 1;
  i64 padding = 0;
  i64 output_padding = 0;
};

struct PoolSpec {
  i64 kernel = 2;
  i64 stride = 2;
  i64 padding = 0;
};

inline i64 conv_out_dim(i64 in, i64 k, const ConvSpec& g) {
  return (in + 2 * g.padding - g.dilation * (k - 1) - 1) / g.stride + 1;
}
inline i64 convt_out_dim(i64 in, i64 k, const ConvTSpec& g) {
  return (in - 1) * g.stride - 2 * g.padding + k + g.output_padding;
}
inline i64 pool_out_dim(i64 in, const PoolSpec& g) {
  return (in + 2 * g.padding - g.kernel) / g.stride + 1;
}

// ---- convolution ----
// x (N,Ci,H,W), w (Co,Ci,kh,kw), bias optional length Co, y (N,Co,Ho,Wo)
template <typename T>
void conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, const T* bias,
                Tensor<T>& y, const ConvSpec& g);
template <typename T>
void conv2d_bwd_x(T* gx, const Shape& xs, const Tensor<T>& w, const T* gy,
                  const Shape& ys, const ConvSpec& g);
template <typename T>
void conv2d_bwd_w(const Tensor<T>& x, T* gw, const Shape& ws, const T* gy,
                  const Shape& ys, const ConvSpec& g);
template <typename T>
void conv2d_bwd_b(T* gb, const T* gy, const Shape& ys);

// ---- transposed convolution ----
// x (N,Ci,H,W), w (Ci,Co,kh,kw), y (N,Co,Ho,Wo)
template <typename T>
void convt2d_fwd(const Tensor<T>& x, const Tensor<T>& w, Tensor<T>& y,
                 const ConvTSpec& g);
template <typename T>
void convt2d_bwd_x(T* gx, const Shape& xs, const Tensor<T>& w, const T* gy,
                   const Shape& ys, const ConvTSpec& g);
template <typename T>
void convt2d_bwd_w(const Tensor<T>& x, T* gw, const Shape& ws, const T* gy,
                   const Shape& ys, const ConvTSpec& g);

// ---- batch norm ----
// Per-channel batch statistics in double, biased variance. Saved mean and
// inverse stddev feed the backward pass.
template <typename T>
void bn_fwd_train(const Tensor<T>& x, const T* gamma, const T* beta,
                  Tensor<T>& y, std::vector<T>& saved_mean,
                  std::vector<T>& saved_invstd, T* running_mean,
                  T* running_var, T momentum, T eps);
template <typename T>
void bn_fwd_eval(const Tensor<T>& x, const T* gamma, const T* beta,
                 Tensor<T>& y, const T* running_mean, const T* running_var,
                 T eps);
template <typename T>
void bn_bwd(const Tensor<T>& x, const T* gamma, const T* gy,
            const std::vector<T>& saved_mean, const std::vector<T>& saved_invstd,
            T* gx, T* ggamma, T* gbeta);

// ---- pooling ----
template <typename T>
void maxpool_fwd(const Tensor<T>& x, Tensor<T>& y, std::vector<i64>& argmax,
                 const PoolSpec& g);
template <typename T>
void maxpool_bwd(T* gx, const T* gy, const Shape& ys,
                 const std::vector<i64>& argmax);
template <typename T>
void gap_fwd(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void gap_bwd(T* gx, const Shape& xs, const T* gy);

// ---- bilinear resize (align-corners-false, edge clamp) ----
template <typename T>
void bilinear_fwd(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void bilinear_bwd(T* gx, const Shape& xs, const T* gy, const Shape& ys);

// ---- softmax cross-entropy over (N,K,H,W) vs labels (N,H,W) ----
// probs caches softmax for backward; returns mean loss over non-ignored
// pixels (0 when every pixel is ignored) and sets the non-ignored count.
template <typename T>
T softmax_ce_fwd(const Tensor<T>& logits, const LabelMap& labels,
                 std::int32_t ignore_value, Tensor<T>& probs, i64& counted);
template <typename T>
void softmax_ce_bwd(T* glogits, const Tensor<T>& probs, const LabelMap& labels,
                    std::int32_t ignore_value, i64 counted, T loss_grad);

// ---- elementwise / reductions ----
template <typename T>
void relu_fwd(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void relu_bwd(T* gx, const T* xvals, const T* gy, i64 n);
template <typename T>
void add_fwd(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y);
template <typename T>
void mul_fwd(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& y);
template <typename T>
void axpy_acc(T* acc, const T* src, i64 n, T alpha);  // acc += alpha*src
template <typename T>
void mul_acc(T* acc, const T* a, const T* b, i64 n);  // acc += a*b
template <typename T>
T sum_all(const Tensor<T>& x);  // serial double accumulator
template <typename T>
void fill_acc(T* acc, i64 n, T v);  // acc += v everywhere

}  // namespace pg::kern
