#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "parsegrid/kernels.hpp"
#include "parsegrid/tensor.hpp"

// Differentiable operations. Each op validates shapes, runs the forward
// kernel, and when a tape is active and a gradient path exists, records a
// backward closure. Gradients accumulate across fan-out because every
// closure adds into its inputs' grad buffers.
namespace pg::ops {

// Running statistics for batch_norm; lives in the owning layer and is
// serialized with checkpoints.
template <typename T>
struct BnState {
  Tensor<T> running_mean;  // (1,C,1,1)
  Tensor<T> running_var;   // (1,C,1,1), initialized to 1
  explicit BnState(i64 c = 1)
      : running_mean(Shape{1, c, 1, 1}),
        running_var(Tensor<T>::full(Shape{1, c, 1, 1}, T(1))) {}
};

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b,
                 i64 stride, i64 padding, i64 dilation);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::nullptr_t,
                 i64 stride, i64 padding, i64 dilation) {
  return conv2d(x, w, static_cast<const Tensor<T>*>(nullptr), stride, padding,
                dilation);
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, i64 stride,
                           i64 padding, i64 output_padding = 0);

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, BnState<T>& state, bool train,
                     T momentum = T(0.1), T eps = T(1e-5));

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, i64 k, i64 stride, i64 padding);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y);

template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T alpha);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, i64 out_h, i64 out_w);

// Mean cross-entropy over non-ignored pixels. When every pixel carries
// ignore_value the result is a zero-gradient 0 and *all_ignored is set.
template <typename T>
Tensor<T> cross_entropy_2d(const Tensor<T>& logits, const LabelMap& labels,
                           std::int32_t ignore_value = 255,
                           bool* all_ignored = nullptr);

// Throws ShapeError when t contains NaN/Inf.
template <typename T>
void validate_finite(const Tensor<T>& t, const std::string& name);

// Central finite differences against the analytic gradient of f at x.
// Returns max over coordinates of |analytic - fd| / max(|analytic|, |fd|, 1e-8).
template <typename T>
using TensorFn = std::function<Tensor<T>(Tensor<T>&)>;

template <typename T>
double finite_diff_check(const TensorFn<T>& f, Tensor<T>& x, double eps);

}  // namespace pg::ops
