#include "parsegrid/gradcheck.hpp"

#include <cmath>

#include "parsegrid/model.hpp"
#include "parsegrid/ops.hpp"

namespace pg {

namespace {

constexpr double kOpTol = 1e-3;
constexpr double kModelTol = 5e-3;

Tensor<double> rand_tensor(Shape s, Rng& rng, double lo = -1.0,
                           double hi = 1.0) {
  Tensor<double> t(s);
  for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// Keeps values away from zero so relu-style kinks cannot flip under the
// finite-difference step.
Tensor<double> rand_offzero(Shape s, Rng& rng) {
  Tensor<double> t(s);
  for (i64 i = 0; i < t.numel(); ++i) {
    const double v = rng.uniform(0.2, 1.0);
    t.data()[i] = rng.bernoulli(0.5) ? v : -v;
  }
  return t;
}

}  // namespace

std::vector<GradCheckEntry> gradcheck_ops(u64 seed) {
  std::vector<GradCheckEntry> out;
  Rng rng(splitmix64(seed));
  const double eps = 1e-5;
  auto add = [&](const std::string& name, double err) {
    out.push_back({name, err, kOpTol});
  };

  {  // convolution wrt input, weight, bias
    auto x = rand_tensor(Shape{2, 3, 9, 9}, rng);
    auto w = rand_tensor(Shape{4, 3, 3, 3}, rng);
    auto b = rand_tensor(Shape{1, 4, 1, 1}, rng);
    auto fx = [&](Tensor<double>& v) {
      return ops::sum(ops::mul(ops::conv2d(v, w, &b, 2, 1, 1),
                               ops::conv2d(v, w, &b, 2, 1, 1)));
    };
    add("conv2d/input", ops::finite_diff_check<double>(fx, x, eps));
    auto fw = [&](Tensor<double>& v) {
      return ops::sum(ops::mul(ops::conv2d(x, v, &b, 1, 2, 2),
                               ops::conv2d(x, v, &b, 1, 2, 2)));
    };
    add("conv2d/weight", ops::finite_diff_check<double>(fw, w, eps));
    auto fb = [&](Tensor<double>& v) {
      return ops::sum(ops::mul(ops::conv2d(x, w, &v, 1, 1, 1),
                               ops::conv2d(x, w, &v, 1, 1, 1)));
    };
    add("conv2d/bias", ops::finite_diff_check<double>(fb, b, eps));
  }

  {  // transposed convolution wrt input and weight
    auto x = rand_tensor(Shape{1, 3, 5, 5}, rng);
    auto w = rand_tensor(Shape{3, 2, 3, 3}, rng);
    auto fx = [&](Tensor<double>& v) {
      auto y = ops::conv_transpose2d(v, w, 2, 1, 1);
      return ops::sum(ops::mul(y, y));
    };
    add("conv_transpose2d/input", ops::finite_diff_check<double>(fx, x, eps));
    auto fw = [&](Tensor<double>& v) {
      auto y = ops::conv_transpose2d(x, v, 2, 1, 1);
      return ops::sum(ops::mul(y, y));
    };
    add("conv_transpose2d/weight", ops::finite_diff_check<double>(fw, w, eps));
  }

  {  // batch norm wrt input, gamma, beta
    auto x = rand_tensor(Shape{2, 3, 5, 5}, rng);
    auto gamma = rand_tensor(Shape{1, 3, 1, 1}, rng, 0.5, 1.5);
    auto beta = rand_tensor(Shape{1, 3, 1, 1}, rng);
    // Random fixed weighting: an unweighted quadratic in the normalized
    // output is constant by construction and checks nothing.
    auto r = rand_tensor(x.shape(), rng);
    auto fx = [&](Tensor<double>& v) {
      ops::BnState<double> st(3);
      auto y = ops::batch_norm(v, gamma, beta, st, true);
      return ops::sum(ops::add(ops::mul(y, r), ops::mul(y, y)));
    };
    add("batch_norm/input", ops::finite_diff_check<double>(fx, x, eps));
    auto fg = [&](Tensor<double>& v) {
      ops::BnState<double> st(3);
      auto y = ops::batch_norm(x, v, beta, st, true);
      return ops::sum(ops::add(ops::mul(y, r), ops::mul(y, y)));
    };
    add("batch_norm/gamma", ops::finite_diff_check<double>(fg, gamma, eps));
    auto fb = [&](Tensor<double>& v) {
      ops::BnState<double> st(3);
      auto y = ops::batch_norm(x, gamma, v, st, true);
      return ops::sum(ops::add(ops::mul(y, r), ops::mul(y, y)));
    };
    add("batch_norm/beta", ops::finite_diff_check<double>(fb, beta, eps));
  }

  {  // relu away from its kink
    auto x = rand_offzero(Shape{2, 4, 6, 6}, rng);
    auto f = [&](Tensor<double>& v) {
      auto y = ops::relu(v);
      return ops::sum(ops::mul(y, y));
    };
    add("relu", ops::finite_diff_check<double>(f, x, eps));
  }

  {  // max pooling
    auto x = rand_tensor(Shape{1, 2, 8, 8}, rng);
    auto f = [&](Tensor<double>& v) {
      auto y = ops::max_pool2d(v, 3, 2, 1);
      return ops::sum(ops::mul(y, y));
    };
    add("max_pool2d", ops::finite_diff_check<double>(f, x, eps));
  }

  {  // global average pooling
    auto x = rand_tensor(Shape{2, 3, 5, 7}, rng);
    auto f = [&](Tensor<double>& v) {
      auto y = ops::global_avg_pool(v);
      return ops::sum(ops::mul(y, y));
    };
    add("global_avg_pool", ops::finite_diff_check<double>(f, x, eps));
  }

  {  // elementwise add / mul / scale
    auto x = rand_tensor(Shape{2, 2, 3, 3}, rng);
    auto o = rand_tensor(Shape{2, 2, 3, 3}, rng);
    auto fa = [&](Tensor<double>& v) {
      auto y = ops::add(v, o);
      return ops::sum(ops::mul(y, y));
    };
    add("add", ops::finite_diff_check<double>(fa, x, eps));
    auto fm = [&](Tensor<double>& v) {
      auto y = ops::mul(v, o);
      return ops::sum(ops::mul(y, y));
    };
    add("mul", ops::finite_diff_check<double>(fm, x, eps));
    auto fs = [&](Tensor<double>& v) {
      auto y = ops::scale(v, 2.5);
      return ops::sum(ops::mul(y, y));
    };
    add("scale", ops::finite_diff_check<double>(fs, x, eps));
  }

  {  // channel concat
    auto x = rand_tensor(Shape{1, 2, 4, 4}, rng);
    auto o = rand_tensor(Shape{1, 3, 4, 4}, rng);
    auto f = [&](Tensor<double>& v) {
      auto y = ops::concat_channels(std::vector<Tensor<double>>{v, o});
      return ops::sum(ops::mul(y, y));
    };
    add("concat_channels", ops::finite_diff_check<double>(f, x, eps));
  }

  {  // bilinear resize up and down
    auto x = rand_tensor(Shape{1, 2, 6, 5}, rng);
    auto fu = [&](Tensor<double>& v) {
      auto y = ops::bilinear_resize(v, 13, 11);
      return ops::sum(ops::mul(y, y));
    };
    add("bilinear_resize/up", ops::finite_diff_check<double>(fu, x, eps));
    auto fd = [&](Tensor<double>& v) {
      auto y = ops::bilinear_resize(v, 3, 3);
      return ops::sum(ops::mul(y, y));
    };
    add("bilinear_resize/down", ops::finite_diff_check<double>(fd, x, eps));
  }

  {  // cross entropy wrt logits, with some ignored pixels
    auto x = rand_tensor(Shape{2, 5, 4, 4}, rng, -2.0, 2.0);
    LabelMap lm(2, 4, 4);
    for (auto& v : lm.v) v = (std::int32_t)rng.uniform_int(0, 4);
    lm.v[3] = 255;
    lm.v[17] = 255;
    auto f = [&](Tensor<double>& v) {
      return ops::cross_entropy_2d(v, lm, 255);
    };
    add("cross_entropy_2d/logits", ops::finite_diff_check<double>(f, x, eps));
  }

  return out;
}

std::vector<GradCheckEntry> gradcheck_model(i64 base_width, i64 hw, u64 seed) {
  ModelConfig cfg;
  cfg.num_classes = 5;
  cfg.base_width = base_width;
  cfg.encoder_blocks = {1, 1, 1, 1};
  cfg.input_h = hw;
  cfg.input_w = hw;

  // The shadow model holds bitwise-widened copies of the float model's
  // parameters (covered by its own test), so checking the 64-bit twin
  // certifies the shared backward code without float cancellation noise.
  // Float-precision difference quotients at usable steps would drown in
  // rounding; normalization also makes the loss exactly flat along some
  // parameter directions, where only 64-bit evaluation keeps both sides
  // of the comparison near zero.
  Model<double> md(cfg, seed);

  Rng rng(splitmix64(mix_seed(seed, 0x9e3779b97f4a7c15ull)));
  Tensor<double> xd(Shape{1, 3, hw, hw});
  for (i64 i = 0; i < xd.numel(); ++i) xd.data()[i] = rng.uniform(-1.0, 1.0);
  LabelMap lm(1, hw, hw);
  for (auto& v : lm.v) v = (std::int32_t)rng.uniform_int(0, 4);

  md.registry().zero_grads();
  Tape tape;
  {
    TapeScope scope(tape);
    auto out = md.forward(xd, true);
    auto loss = total_loss(out, lm, 255, 0.5);
    backward(loss, tape);
  }

  auto loss_d = [&]() {
    auto out = md.forward(xd, true);
    return total_loss(out, lm, 255, 0.5, nullptr).item();
  };

  const double eps = 1e-5;
  std::vector<GradCheckEntry> out;
  for (auto& p : md.registry().params()) {
    double worst = 0.0;
    double* v = p.tensor.data();
    for (i64 i = 0; i < p.tensor.numel(); ++i) {
      const double keep = v[i];
      v[i] = keep + eps;
      const double fp = loss_d();
      v[i] = keep - eps;
      const double fm = loss_d();
      v[i] = keep;
      const double fd = (fp - fm) / (2 * eps);
      const double an = p.tensor.grad()[i];
      const double rel =
          std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
      worst = std::max(worst, rel);
    }
    out.push_back({p.name, worst, kModelTol});
  }
  return out;
}

}  // namespace pg
