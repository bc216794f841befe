#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "parsegrid/common.hpp"

namespace pg {

// Dense NCHW shape. All tensors in this project are 4-D; vectors are
// (1,C,1,1) and scalars (1,1,1,1).
struct Shape {
  i64 n = 0, c = 0, h = 0, w = 0;
  i64 numel() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const { return strf("(%lld,%lld,%lld,%lld)", (long long)n, (long long)c, (long long)h, (long long)w); }
};

namespace detail {
template <typename T>
struct TensorStorage {
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first backward accumulation
  bool requires_grad = false;
  bool on_tape = false;  // produced by a recorded op
};
}  // namespace detail

// Value-semantics handle over shared storage. Copies alias the same data
// and gradient buffers, so a registry entry and the layer that owns the
// parameter always observe the same values.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape s, bool requires_grad = false) : shape_(s) {
    check(s.n > 0 && s.c > 0 && s.h > 0 && s.w > 0,
          "tensor shape must be positive, got " + s.str());
    st_ = std::make_shared<detail::TensorStorage<T>>();
    st_->data.assign(s.numel(), T(0));
    st_->requires_grad = requires_grad;
  }

  static Tensor full(Shape s, T v) {
    Tensor t(s);
    for (auto& x : t.st_->data) x = v;
    return t;
  }
  static Tensor scalar(T v) { return full(Shape{1, 1, 1, 1}, v); }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  i64 numel() const { return shape_.numel(); }

  T* data() { return st_->data.data(); }
  const T* data() const { return st_->data.data(); }
  std::vector<T>& vec() { return st_->data; }
  const std::vector<T>& vec() const { return st_->data; }

  i64 index(i64 n, i64 c, i64 h, i64 w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(i64 n, i64 c, i64 h, i64 w) { return st_->data[index(n, c, h, w)]; }
  const T& at(i64 n, i64 c, i64 h, i64 w) const { return st_->data[index(n, c, h, w)]; }
  T item() const {
    check(numel() == 1, "item() requires a scalar tensor, got " + shape_.str());
    return st_->data[0];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  void set_requires_grad(bool v) { st_->requires_grad = v; }
  bool on_tape() const { return st_ && st_->on_tape; }
  void mark_on_tape() { st_->on_tape = true; }
  // True when gradients must flow through/into this tensor.
  bool grad_path() const { return requires_grad() || on_tape(); }

  bool has_grad() const { return st_ && !st_->grad.empty(); }
  // Accumulation target; allocates a zero buffer on first use.
  T* grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), T(0));
    return st_->grad.data();
  }
  const T* grad_ptr() const { return st_->grad.empty() ? nullptr : st_->grad.data(); }
  std::vector<T>& grad_vec() {
    grad();
    return st_->grad;
  }
  void zero_grad() {
    if (st_ && !st_->grad.empty()) st_->grad.assign(st_->data.size(), T(0));
  }

  // Deep copy of values only (fresh storage, no grad, no flags).
  Tensor clone_data() const {
    Tensor t(shape_);
    t.st_->data = st_->data;
    return t;
  }

 private:
  Shape shape_;
  std::shared_ptr<detail::TensorStorage<T>> st_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename U, typename T>
Tensor<U> cast_tensor(const Tensor<T>& x) {
  Tensor<U> y(x.shape());
  const T* a = x.data();
  U* b = y.data();
  for (i64 i = 0; i < x.numel(); ++i) b[i] = static_cast<U>(a[i]);
  return y;
}

// Integer label map, (N,H,W). 255 is the conventional ignore value.
struct LabelMap {
  i64 n = 0, h = 0, w = 0;
  std::vector<std::int32_t> v;
  LabelMap() = default;
  LabelMap(i64 n_, i64 h_, i64 w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), v(static_cast<size_t>(n_ * h_ * w_), fill) {}
  i64 numel() const { return n * h * w; }
  std::int32_t& at(i64 ni, i64 y, i64 x) { return v[(ni * h + y) * w + x]; }
  std::int32_t at(i64 ni, i64 y, i64 x) const { return v[(ni * h + y) * w + x]; }
};

// Recorded-operation tape for reverse-mode differentiation. Ops append a
// closure per recorded node; backward() replays them in reverse order, so
// every node runs exactly once and fan-out gradients accumulate.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  size_t size() const { return nodes_.size(); }
  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }
  void clear() { nodes_.clear(); }

  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

// RAII: makes `t` the recording tape for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& t) : prev_(Tape::current()) { Tape::current() = &t; }
  ~TapeScope() { Tape::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

template <typename T>
void backward(Tensor<T>& loss, Tape& tape) {
  check(loss.numel() == 1, "backward requires a scalar loss, got " + loss.shape().str());
  loss.grad()[0] = T(1);
  tape.run_backward();
}

// Deterministic, portable RNG utilities. std::mt19937_64 output is fully
// specified by the standard; the gaussian below is a hand-rolled
// Box-Muller so values do not depend on the stdlib's distribution code.
class Rng {
 public:
  explicit Rng(u64 seed) : eng_(seed) {}
  u64 next() { return eng_(); }
  // uniform in [0,1)
  double uniform() { return (eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  i64 uniform_int(i64 lo, i64 hi) {  // inclusive bounds
    check(lo <= hi, "uniform_int bounds");
    return lo + static_cast<i64>(eng_() % static_cast<u64>(hi - lo + 1));
  }
  bool bernoulli(double p) { return uniform() < p; }
  double gauss() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Gaussian fill used by parameter init and tests. Values are computed in
// float and widened, so Tensor<double> twins are bitwise-compatible with
// their float counterparts.
template <typename T>
void fill_randn(Tensor<T>& t, Rng& rng, float stdev, float mean = 0.f) {
  T* p = t.data();
  for (i64 i = 0; i < t.numel(); ++i) {
    float v = mean + stdev * static_cast<float>(rng.gauss());
    p[i] = static_cast<T>(v);
  }
}

}  // namespace pg
