#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <omp.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "parsegrid/ops.hpp"
#include "parsegrid/ref_kernels.hpp"
#include "parsegrid/tensor.hpp"

using namespace pg;

namespace {

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  T* p = t.data();
  for (i64 i = 0; i < t.numel(); ++i) p[i] = (T)rng.uniform(lo, hi);
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (i64 i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs((double)a.data()[i] - (double)b.data()[i]));
  return m;
}

template <typename T>
bool bitwise_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0.0;
  for (i64 i = 0; i < a.numel(); ++i)
    s += (double)a.data()[i] * (double)b.data()[i];
  return s;
}

}  // namespace

TEST_CASE("tensor basics and invariants") {
  Tensor<float> t(Shape{2, 3, 4, 5});
  CHECK(t.numel() == 120);
  CHECK(t.index(1, 2, 3, 4) == 119);
  t.at(1, 2, 3, 4) = 7.f;
  CHECK(t.data()[119] == 7.f);
  CHECK(t.grad_vec().size() == (size_t)t.numel());

  CHECK_THROWS_AS(Tensor<float>(Shape{0, 1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(t.item(), ShapeError);
  CHECK(Tensor<float>::scalar(3.f).item() == 3.f);

  Tensor<float> alias = t;
  alias.at(0, 0, 0, 0) = 9.f;
  CHECK(t.at(0, 0, 0, 0) == 9.f);  // handles share storage
}

TEST_CASE("tape runs nodes once in reverse order") {
  Tape tape;
  std::vector<int> order;
  tape.record([&] { order.push_back(1); });
  tape.record([&] { order.push_back(2); });
  tape.record([&] { order.push_back(3); });
  tape.run_backward();
  CHECK(order == std::vector<int>{3, 2, 1});
}

TEST_CASE("conv2d identity and constant-field cases") {
  Rng rng(1);
  Tensor<float> x(Shape{1, 1, 4, 4});
  fill_uniform(x, rng);
  Tensor<float> w1 = Tensor<float>::full(Shape{1, 1, 1, 1}, 1.f);
  auto y = ops::conv2d(x, w1, nullptr, 1, 0, 1);
  CHECK(max_abs_diff(x, y) == 0.0);

  Tensor<float> ones = Tensor<float>::full(Shape{1, 1, 5, 5}, 1.f);
  Tensor<float> w3 = Tensor<float>::full(Shape{1, 1, 3, 3}, 1.f);
  auto z = ops::conv2d(ones, w3, nullptr, 1, 0, 1);
  CHECK(z.shape() == Shape{1, 1, 3, 3});
  for (i64 i = 0; i < z.numel(); ++i) CHECK(z.data()[i] == doctest::Approx(9.f));
}

TEST_CASE("conv2d matches the direct-loop oracle on a pinned case") {
  Rng rng(2);
  Tensor<float> x(Shape{1, 2, 7, 7});
  Tensor<float> w(Shape{3, 2, 3, 3});
  fill_uniform(x, rng);
  fill_uniform(w, rng);
  auto y = ops::conv2d(x, w, nullptr, 2, 1, 2);
  auto ref = ref::conv2d(x, w, nullptr, kern::ConvSpec{2, 1, 2});
  CHECK(max_abs_diff(y, ref) <= 1e-5);
}

TEST_CASE("conv2d matches the oracle over the stride/padding/dilation grid") {
  Rng rng(3);
  for (i64 s : {1, 2})
    for (i64 p : {0, 1, 2})
      for (i64 d : {1, 2, 3}) {
        Tensor<float> x(Shape{2, 3, 9, 9});
        Tensor<float> w(Shape{4, 3, 3, 3});
        Tensor<float> b(Shape{1, 4, 1, 1});
        fill_uniform(x, rng);
        fill_uniform(w, rng);
        fill_uniform(b, rng);
        auto y = ops::conv2d(x, w, &b, s, p, d);
        auto r = ref::conv2d(x, w, b.data(), kern::ConvSpec{s, p, d});
        CHECK(max_abs_diff(y, r) <= 1e-5);
      }
}

TEST_CASE("conv2d matches the oracle at large dilations") {
  Rng rng(4);
  for (i64 d : {2, 12, 24, 36}) {
    Tensor<float> x(Shape{1, 2, 80, 80});
    Tensor<float> w(Shape{2, 2, 3, 3});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    auto y = ops::conv2d(x, w, nullptr, 1, d, d);
    CHECK(y.shape() == x.shape());
    auto r = ref::conv2d(x, w, nullptr, kern::ConvSpec{1, d, d});
    CHECK(max_abs_diff(y, r) <= 1e-5);
  }
}

TEST_CASE("conv2d rejects bad geometry and mismatched shapes") {
  Tensor<float> x(Shape{1, 2, 3, 3});
  Tensor<float> w(Shape{1, 3, 3, 3});
  CHECK_THROWS_WITH_AS(ops::conv2d(x, w, nullptr, 1, 0, 1),
                       doctest::Contains("input channels"), ShapeError);
  Tensor<float> w2(Shape{1, 2, 3, 3});
  // dilated 3x3 spans 5 > 3, so the output would be empty
  CHECK_THROWS_WITH_AS(ops::conv2d(x, w2, nullptr, 1, 0, 2),
                       doctest::Contains("invalid geometry"), ShapeError);
}

TEST_CASE("conv_transpose2d identity and scatter-add oracle") {
  Rng rng(5);
  Tensor<float> x(Shape{1, 1, 4, 4});
  fill_uniform(x, rng);
  Tensor<float> w1 = Tensor<float>::full(Shape{1, 1, 1, 1}, 1.f);
  auto y = ops::conv_transpose2d(x, w1, 1, 0);
  CHECK(max_abs_diff(x, y) == 0.0);

  Tensor<float> x3(Shape{1, 1, 3, 3});
  fill_uniform(x3, rng);
  Tensor<float> w2 = Tensor<float>::full(Shape{1, 1, 2, 2}, 1.f);
  auto z = ops::conv_transpose2d(x3, w2, 2, 0);
  CHECK(z.shape() == Shape{1, 1, 6, 6});
  auto r = ref::conv_transpose2d(x3, w2, kern::ConvTSpec{2, 0, 0});
  CHECK(max_abs_diff(z, r) <= 1e-6);
}

TEST_CASE("conv_transpose2d matches the oracle on random geometry") {
  Rng rng(6);
  for (i64 s : {1, 2})
    for (i64 p : {0, 1})
      for (i64 op : {0, 1}) {
        if (op >= s + 1) continue;
        Tensor<float> x(Shape{2, 3, 5, 5});
        Tensor<float> w(Shape{3, 2, 3, 3});
        fill_uniform(x, rng);
        fill_uniform(w, rng);
        auto y = ops::conv_transpose2d(x, w, s, p, op);
        auto r = ref::conv_transpose2d(x, w, kern::ConvTSpec{s, p, op});
        CHECK(max_abs_diff(y, r) <= 1e-5);
      }
}

TEST_CASE("conv_transpose2d satisfies the adjoint identity") {
  Rng rng(7);
  struct Geo {
    i64 h, k, s, p;
  };
  for (Geo geo : {Geo{7, 3, 2, 1}, Geo{6, 3, 1, 0}, Geo{8, 2, 2, 0}}) {
    Tensor<float> x(Shape{2, 3, geo.h, geo.h});
    Tensor<float> w(Shape{2, 3, geo.k, geo.k});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    auto cx = ops::conv2d(x, w, nullptr, geo.s, geo.p, 1);
    Tensor<float> y(cx.shape());
    fill_uniform(y, rng);
    auto ty = ops::conv_transpose2d(y, w, geo.s, geo.p);
    REQUIRE(ty.shape() == x.shape());
    const double lhs = dot(cx, y), rhs = dot(x, ty);
    const double rel = std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-8});
    CHECK(rel <= 1e-4);
  }
}

TEST_CASE("batch_norm trivial and statistical cases") {
  // zero-mean unit-variance input passes through up to epsilon effects
  Tensor<float> x(Shape{2, 1, 2, 2});
  for (i64 i = 0; i < 8; ++i) x.data()[i] = (i % 2 == 0) ? -1.f : 1.f;
  Tensor<float> gamma = Tensor<float>::full(Shape{1, 1, 1, 1}, 1.f);
  Tensor<float> beta(Shape{1, 1, 1, 1});
  ops::BnState<float> st(1);
  auto y = ops::batch_norm(x, gamma, beta, st, true);
  CHECK(max_abs_diff(x, y) <= 1e-4);

  // gamma = 0 collapses any input to beta
  Rng rng(8);
  Tensor<float> x2(Shape{2, 3, 4, 4});
  fill_uniform(x2, rng, -5.0, 5.0);
  Tensor<float> g0(Shape{1, 3, 1, 1});
  Tensor<float> b2(Shape{1, 3, 1, 1});
  fill_uniform(b2, rng);
  ops::BnState<float> st2(3);
  auto y2 = ops::batch_norm(x2, g0, b2, st2, true);
  for (i64 n = 0; n < 2; ++n)
    for (i64 c = 0; c < 3; ++c)
      for (i64 h = 0; h < 4; ++h)
        for (i64 w = 0; w < 4; ++w)
          CHECK(y2.at(n, c, h, w) == doctest::Approx(b2.at(0, c, 0, 0)));

  // train-mode output is normalized per channel
  Tensor<float> x3(Shape{4, 3, 5, 5});
  fill_uniform(x3, rng, -3.0, 7.0);
  Tensor<float> g3 = Tensor<float>::full(Shape{1, 3, 1, 1}, 1.f);
  Tensor<float> b3(Shape{1, 3, 1, 1});
  ops::BnState<float> st3(3);
  auto y3 = ops::batch_norm(x3, g3, b3, st3, true);
  std::vector<double> mean, var;
  ref::bn_stats(y3, mean, var);
  for (i64 c = 0; c < 3; ++c) {
    CHECK(std::abs(mean[c]) <= 1e-5);
    CHECK(std::abs(var[c] - 1.0) <= 1e-3);
  }
  CHECK_THROWS_AS(ops::batch_norm(x3, gamma, beta, st3, true), ShapeError);
}

TEST_CASE("batch_norm eval mode uses running statistics") {
  Rng rng(9);
  Tensor<float> x(Shape{4, 2, 3, 3});
  fill_uniform(x, rng, 1.0, 3.0);
  Tensor<float> gamma = Tensor<float>::full(Shape{1, 2, 1, 1}, 1.f);
  Tensor<float> beta(Shape{1, 2, 1, 1});
  ops::BnState<float> st(2);
  for (int i = 0; i < 200; ++i) ops::batch_norm(x, gamma, beta, st, true);
  auto ev = ops::batch_norm(x, gamma, beta, st, false);
  // after many updates on the same batch, running stats converge to batch
  // stats, so eval output is normalized too
  std::vector<double> mean, var;
  ref::bn_stats(ev, mean, var);
  for (i64 c = 0; c < 2; ++c) {
    CHECK(std::abs(mean[c]) <= 1e-2);
    CHECK(std::abs(var[c] - 1.0) <= 5e-2);
  }
}

TEST_CASE("relu, concat, pooling semantics") {
  Tensor<float> x(Shape{1, 1, 1, 3});
  x.data()[0] = -1.f;
  x.data()[1] = 0.f;
  x.data()[2] = 2.f;
  auto y = ops::relu(x);
  CHECK(y.data()[0] == 0.f);
  CHECK(y.data()[1] == 0.f);
  CHECK(y.data()[2] == 2.f);

  Rng rng(10);
  Tensor<float> a(Shape{1, 3, 4, 4}), b(Shape{1, 5, 4, 4});
  fill_uniform(a, rng);
  fill_uniform(b, rng);
  auto cat = ops::concat_channels<float>({a, b});
  CHECK(cat.shape() == Shape{1, 8, 4, 4});
  CHECK(cat.at(0, 2, 1, 1) == a.at(0, 2, 1, 1));
  CHECK(cat.at(0, 4, 3, 2) == b.at(0, 1, 3, 2));
  Tensor<float> c(Shape{1, 2, 3, 4});
  CHECK_THROWS_AS(ops::concat_channels<float>({a, c}), ShapeError);

  Tensor<float> p(Shape{1, 1, 4, 4});
  for (i64 i = 0; i < 16; ++i) p.data()[i] = (float)i;
  auto mp = ops::max_pool2d(p, 2, 2, 0);
  CHECK(mp.shape() == Shape{1, 1, 2, 2});
  CHECK(mp.at(0, 0, 0, 0) == 5.f);
  CHECK(mp.at(0, 0, 1, 1) == 15.f);
  auto gp = ops::global_avg_pool(p);
  CHECK(gp.shape() == Shape{1, 1, 1, 1});
  CHECK(gp.item() == doctest::Approx(7.5f));
}

TEST_CASE("max_pool argmax ties break to the first index") {
  Tensor<float> x = Tensor<float>::full(Shape{1, 1, 2, 2}, 3.f);
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  auto y = ops::max_pool2d(x, 2, 2, 0);
  auto loss = ops::sum(y);
  backward(loss, tape);
  CHECK(x.grad()[0] == 1.f);  // first element of the tied window
  CHECK(x.grad()[1] == 0.f);
  CHECK(x.grad()[2] == 0.f);
  CHECK(x.grad()[3] == 0.f);
}

TEST_CASE("bilinear_resize identity, constant and oracle cases") {
  Rng rng(11);
  Tensor<float> x(Shape{1, 2, 5, 7});
  fill_uniform(x, rng);
  auto same = ops::bilinear_resize(x, 5, 7);
  CHECK(bitwise_equal(same.vec(), x.vec()));

  Tensor<float> c = Tensor<float>::full(Shape{1, 1, 3, 3}, 2.5f);
  auto cc = ops::bilinear_resize(c, 7, 5);
  for (i64 i = 0; i < cc.numel(); ++i) CHECK(cc.data()[i] == doctest::Approx(2.5f));

  Tensor<float> q(Shape{1, 1, 2, 2});
  q.data()[0] = 0.f;
  q.data()[1] = 1.f;
  q.data()[2] = 2.f;
  q.data()[3] = 3.f;
  auto up = ops::bilinear_resize(q, 4, 4);
  auto r = ref::bilinear_resize(q, 4, 4);
  CHECK(max_abs_diff(up, r) <= 1e-6);

  for (auto [oh, ow] : {std::pair<i64, i64>{8, 3}, {10, 14}, {2, 2}}) {
    auto a = ops::bilinear_resize(x, oh, ow);
    auto b = ref::bilinear_resize(x, oh, ow);
    CHECK(max_abs_diff(a, b) <= 1e-6);
  }
}

TEST_CASE("cross_entropy_2d trivial, oracle and ignore cases") {
  // uniform logits give ln K
  Tensor<float> u = Tensor<float>::full(Shape{2, 4, 3, 3}, 0.7f);
  LabelMap lab(2, 3, 3, 1);
  auto l = ops::cross_entropy_2d(u, lab, 255);
  CHECK(std::abs((double)l.item() - std::log(4.0)) <= 1e-6);

  // one-hot-correct logits with growing margin drive the loss to zero
  double prev = 1e9;
  for (float m : {5.f, 10.f, 25.f}) {
    Tensor<float> oh(Shape{1, 3, 2, 2});
    LabelMap lb(1, 2, 2, 2);
    for (i64 px = 0; px < 4; ++px) oh.data()[2 * 4 + px] = m;
    const double li = ops::cross_entropy_2d(oh, lb, 255).item();
    CHECK(li < prev);
    prev = li;
  }
  CHECK(prev <= 1e-6);

  // random logits with ignored pixels match the oracle
  Rng rng(12);
  Tensor<float> lg(Shape{1, 4, 3, 3});
  fill_uniform(lg, rng, -2.0, 2.0);
  LabelMap lb2(1, 3, 3);
  for (i64 i = 0; i < 9; ++i) lb2.v[i] = (std::int32_t)(rng.next() % 4);
  lb2.v[2] = 255;
  lb2.v[7] = 255;
  const double mine = ops::cross_entropy_2d(lg, lb2, 255).item();
  const double oracle = ref::cross_entropy_2d(lg, lb2, 255);
  CHECK(std::abs(mine - oracle) <= 1e-5);

  // all pixels ignored: zero loss, zero gradient, flag set
  LabelMap ign(1, 3, 3, 255);
  bool all_ignored = false;
  Tensor<float> lg2 = lg.clone_data();
  lg2.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    auto z = ops::cross_entropy_2d(lg2, ign, 255, &all_ignored);
    CHECK(z.item() == 0.f);
    CHECK(all_ignored);
    backward(z, tape);
  }
  for (i64 i = 0; i < lg2.numel(); ++i) CHECK(lg2.grad()[i] == 0.f);

  // labels outside [0,K) are rejected
  LabelMap badlab(1, 3, 3, 7);
  CHECK_THROWS_WITH_AS(ops::cross_entropy_2d(lg, badlab, 255),
                       doctest::Contains("label"), ShapeError);
}

TEST_CASE("backward linear and quadratic cases") {
  Rng rng(13);
  Tensor<float> x(Shape{2, 3, 4, 4});
  fill_uniform(x, rng);
  x.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    auto loss = ops::sum(x);
    backward(loss, tape);
  }
  for (i64 i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 1.f);

  x.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    auto loss = ops::scale(ops::sum(ops::mul(x, x)), 0.5f);
    backward(loss, tape);
  }
  for (i64 i = 0; i < x.numel(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(x.data()[i]).epsilon(1e-5));

  Tape tape;
  TapeScope scope(tape);
  CHECK_THROWS_AS(backward(x, tape), ShapeError);
}

TEST_CASE("diamond graph sums both gradient paths") {
  // loss = sum(x*x + 3x): both consumers of x must contribute, d/dx = 2x+3
  Tensor<double> x(Shape{1, 2, 3, 3});
  Rng rng(14);
  fill_uniform(x, rng);
  auto f = [](Tensor<double>& v) {
    auto u = ops::mul(v, v);
    auto s = ops::scale(v, 3.0);
    return ops::sum(ops::add(u, s));
  };
  CHECK(ops::finite_diff_check<double>(f, x, 1e-6) <= 1e-6);
  for (i64 i = 0; i < x.numel(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i] + 3.0));
}

TEST_CASE("finite_diff_check on its own spec examples") {
  Rng rng(15);
  Tensor<double> x(Shape{1, 1, 3, 4});
  fill_uniform(x, rng);
  auto fsum = [](Tensor<double>& v) { return ops::sum(v); };
  CHECK(ops::finite_diff_check<double>(fsum, x, 1e-5) <= 1e-6);
  auto fsq = [](Tensor<double>& v) { return ops::sum(ops::mul(v, v)); };
  CHECK(ops::finite_diff_check<double>(fsq, x, 1e-3) <= 1e-4);
}

TEST_CASE("per-op gradients match central finite differences") {
  Rng rng(16);
  const double tol = 1e-3, eps = 1e-5;

  SUBCASE("conv2d wrt x, w, b") {
    Tensor<double> x(Shape{2, 3, 6, 6}), w(Shape{4, 3, 3, 3}), b(Shape{1, 4, 1, 1});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    fill_uniform(b, rng);
    auto f = [&](Tensor<double>&) {
      return ops::sum(ops::mul(ops::conv2d(x, w, &b, 2, 1, 1),
                               ops::conv2d(x, w, &b, 2, 1, 1)));
    };
    CHECK(ops::finite_diff_check<double>(f, x, eps) <= tol);
    CHECK(ops::finite_diff_check<double>(f, w, eps) <= tol);
    CHECK(ops::finite_diff_check<double>(f, b, eps) <= tol);
  }

  SUBCASE("conv_transpose2d wrt x, w") {
    Tensor<double> x(Shape{1, 3, 4, 4}), w(Shape{3, 2, 3, 3});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    auto f = [&](Tensor<double>&) {
      auto y = ops::conv_transpose2d(x, w, 2, 1, 1);
      return ops::sum(ops::mul(y, y));
    };
    CHECK(ops::finite_diff_check<double>(f, x, eps) <= tol);
    CHECK(ops::finite_diff_check<double>(f, w, eps) <= tol);
  }

  SUBCASE("batch_norm wrt x, gamma, beta") {
    Tensor<double> x(Shape{3, 2, 4, 4}), g(Shape{1, 2, 1, 1}), b(Shape{1, 2, 1, 1});
    fill_uniform(x, rng, -2.0, 2.0);
    fill_uniform(g, rng, 0.5, 1.5);
    fill_uniform(b, rng);
    ops::BnState<double> st(2);
    // weight the output by a fixed random tensor: a plain quadratic in the
    // normalized output is invariant to x by construction
    Tensor<double> r(x.shape());
    fill_uniform(r, rng);
    auto f = [&](Tensor<double>&) {
      auto y = ops::batch_norm(x, g, b, st, true);
      return ops::sum(ops::add(ops::mul(y, r), ops::mul(y, y)));
    };
    CHECK(ops::finite_diff_check<double>(f, x, eps) <= tol);
    CHECK(ops::finite_diff_check<double>(f, g, eps) <= tol);
    CHECK(ops::finite_diff_check<double>(f, b, eps) <= tol);
  }

  SUBCASE("relu away from the kink") {
    Tensor<double> x(Shape{1, 2, 5, 5});
    for (i64 i = 0; i < x.numel(); ++i) {
      const double mag = rng.uniform(0.2, 1.0);
      x.data()[i] = rng.bernoulli(0.5) ? mag : -mag;
    }
    auto f = [&](Tensor<double>&) {
      auto y = ops::relu(x);
      return ops::sum(ops::mul(y, y));
    };
    CHECK(ops::finite_diff_check<double>(f, x, eps) <= tol);
  }

  SUBCASE("max_pool2d on the pinned geometry") {
    Tensor<double> x(Shape{1, 2, 6, 6});
    fill_uniform(x, rng);
    auto f = [&](Tensor<double>&) {
      auto y = ops::max_pool2d(x, 3, 2, 1);
      return ops::sum(ops::mul(y, y));
    };
    CHECK(ops::finite_diff_check<double>(f, x, eps) <= tol);
  }

  SUBCASE("global_avg_pool, add, scale, concat") {
    Tensor<double> x(Shape{2, 3, 4, 4}), y(Shape{2, 3, 4, 4});
    fill_uniform(x, rng);
    fill_uniform(y, rng);
    auto f = [&](Tensor<double>&) {
      auto s = ops::add(ops::scale(x, 1.7), y);
      auto cat = ops::concat_channels<double>({s, x});
      auto g = ops::global_avg_pool(cat);
      return ops::sum(ops::mul(g, g));
    };
    CHECK(ops::finite_diff_check<double>(f, x, eps) <= tol);
    CHECK(ops::finite_diff_check<double>(f, y, eps) <= tol);
  }

  SUBCASE("bilinear_resize up and down") {
    Tensor<double> x(Shape{1, 2, 5, 4});
    fill_uniform(x, rng);
    auto f = [&](Tensor<double>&) {
      auto up = ops::bilinear_resize(x, 9, 7);
      auto dn = ops::bilinear_resize(up, 3, 3);
      return ops::sum(ops::mul(dn, dn));
    };
    CHECK(ops::finite_diff_check<double>(f, x, eps) <= tol);
  }

  SUBCASE("cross_entropy_2d wrt logits") {
    Tensor<double> lg(Shape{1, 4, 3, 3});
    fill_uniform(lg, rng, -2.0, 2.0);
    LabelMap lb(1, 3, 3);
    for (i64 i = 0; i < 9; ++i) lb.v[i] = (std::int32_t)(rng.next() % 4);
    lb.v[4] = 255;
    auto f = [&](Tensor<double>&) { return ops::cross_entropy_2d(lg, lb, 255); };
    CHECK(ops::finite_diff_check<double>(f, lg, eps) <= tol);
  }
}

TEST_CASE("composite graph gradients match finite differences") {
  Rng rng(17);
  Tensor<double> x(Shape{2, 3, 8, 8});
  Tensor<double> w(Shape{4, 3, 3, 3}), b(Shape{1, 4, 1, 1});
  Tensor<double> gamma(Shape{1, 4, 1, 1}), beta(Shape{1, 4, 1, 1});
  fill_uniform(x, rng);
  fill_uniform(w, rng, -0.5, 0.5);
  fill_uniform(b, rng);
  fill_uniform(gamma, rng, 0.5, 1.5);
  fill_uniform(beta, rng);
  ops::BnState<double> st(4);
  LabelMap lb(2, 4, 4);
  for (i64 i = 0; i < lb.numel(); ++i) lb.v[i] = (std::int32_t)(rng.next() % 4);

  auto f = [&](Tensor<double>&) {
    auto c = ops::conv2d(x, w, &b, 1, 1, 1);
    auto n = ops::batch_norm(c, gamma, beta, st, true);
    auto r = ops::relu(n);
    auto p = ops::max_pool2d(r, 3, 2, 1);
    return ops::cross_entropy_2d(p, lb, 255);
  };
  const double tol = 1e-3, eps = 1e-5;
  CHECK(ops::finite_diff_check<double>(f, w, eps) <= tol);
  CHECK(ops::finite_diff_check<double>(f, b, eps) <= tol);
  CHECK(ops::finite_diff_check<double>(f, gamma, eps) <= tol);
  CHECK(ops::finite_diff_check<double>(f, beta, eps) <= tol);
  CHECK(ops::finite_diff_check<double>(f, x, eps) <= tol);
}

TEST_CASE("results are bit-identical for any worker count") {
  auto run = [](int threads) {
    omp_set_num_threads(threads);
    Rng rng(18);
    Tensor<float> x(Shape{2, 3, 16, 16});
    Tensor<float> w(Shape{8, 3, 3, 3});
    Tensor<float> gamma = Tensor<float>::full(Shape{1, 8, 1, 1}, 1.f);
    Tensor<float> beta(Shape{1, 8, 1, 1});
    fill_uniform(x, rng);
    fill_uniform(w, rng);
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
    ops::BnState<float> st(8);
    LabelMap lb(2, 8, 8);
    for (i64 i = 0; i < lb.numel(); ++i) lb.v[i] = (std::int32_t)(rng.next() % 8);
    Tape tape;
    std::vector<float> out;
    {
      TapeScope scope(tape);
      auto c = ops::conv2d(x, w, nullptr, 2, 1, 1);
      auto n = ops::batch_norm(c, gamma, beta, st, true);
      auto r = ops::relu(n);
      auto u = ops::bilinear_resize(r, 8, 8);
      auto loss = ops::cross_entropy_2d(u, lb, 255);
      backward(loss, tape);
      out.insert(out.end(), u.vec().begin(), u.vec().end());
      out.push_back(loss.item());
    }
    out.insert(out.end(), x.grad(), x.grad() + x.numel());
    out.insert(out.end(), w.grad(), w.grad() + w.numel());
    out.insert(out.end(), gamma.grad(), gamma.grad() + gamma.numel());
    out.insert(out.end(), beta.grad(), beta.grad() + beta.numel());
    return out;
  };
  auto t1 = run(1);
  auto t2 = run(2);
  auto t4 = run(4);
  omp_set_num_threads(omp_get_num_procs());
  CHECK(bitwise_equal(t1, t2));
  CHECK(bitwise_equal(t1, t4));
}

TEST_CASE("validate_finite flags NaN propagation") {
  Tensor<float> x = Tensor<float>::full(Shape{1, 1, 2, 2}, 1.f);
  ops::validate_finite(x, "x");
  x.data()[2] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_WITH_AS(ops::validate_finite(x, "x"),
                       doctest::Contains("non-finite"), ShapeError);
}
