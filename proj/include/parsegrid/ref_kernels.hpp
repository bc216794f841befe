#pragma once

#include "parsegrid/kernels.hpp"
#include "parsegrid/tensor.hpp"

// Deliberately naive serial reference implementations. They share nothing
// with the production kernels beyond the tensor type: direct nested loops,
// double-precision accumulation, no OpenMP, no bounds tricks. Tests and
// the benchmark compare the fast path against these.
namespace pg::ref {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const T* bias,
                 const kern::ConvSpec& g);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::nullptr_t,
                 const kern::ConvSpec& g) {
  return conv2d(x, w, static_cast<const T*>(nullptr), g);
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w,
                           const kern::ConvTSpec& g);

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, i64 out_h, i64 out_w);

// Mean of -log softmax(logits)[label] over non-ignored pixels.
template <typename T>
double cross_entropy_2d(const Tensor<T>& logits, const LabelMap& labels,
                        std::int32_t ignore_value);

// Direct per-channel batch statistics (biased variance).
template <typename T>
void bn_stats(const Tensor<T>& x, std::vector<double>& mean,
              std::vector<double>& var);

}  // namespace pg::ref
