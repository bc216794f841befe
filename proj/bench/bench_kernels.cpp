// Times the OpenMP kernels against the serial reference implementations on
// model-representative shapes. Usage: bench_kernels [repeats]

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include "parsegrid/kernels.hpp"
#include "parsegrid/ref_kernels.hpp"
#include "parsegrid/tensor.hpp"

using namespace pg;

namespace {

double now_s() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

Tensor<float> random_tensor(Shape s, Rng& rng) {
  Tensor<float> t(s);
  for (i64 i = 0; i < t.numel(); ++i) t.data()[i] = (float)rng.uniform(-1.0, 1.0);
  return t;
}

double time_best(int repeats, const std::function<void()>& fn) {
  double best = 1e300;
  for (int r = 0; r < repeats; ++r) {
    double t0 = now_s();
    fn();
    best = std::min(best, now_s() - t0);
  }
  return best;
}

struct Row {
  std::string name;
  double fast_s;
  double ref_s;
  double max_abs_diff;
};

}  // namespace

int main(int argc, char** argv) {
  const int repeats = argc > 1 ? std::atoi(argv[1]) : 3;
  Rng rng(1);
  std::vector<Row> rows;

  auto conv_case = [&](const std::string& name, i64 n, i64 ci, i64 co, i64 hw,
                       i64 k, i64 stride, i64 pad, i64 dil) {
    kern::ConvSpec g{stride, pad, dil};
    Tensor<float> x = random_tensor(Shape{n, ci, hw, hw}, rng);
    Tensor<float> w = random_tensor(Shape{co, ci, k, k}, rng);
    Tensor<float> y(Shape{n, co, kern::conv_out_dim(hw, k, g),
                          kern::conv_out_dim(hw, k, g)});
    double fast = time_best(
        repeats, [&] { kern::conv2d_fwd(x, w, (const float*)nullptr, y, g); });
    Tensor<float> want;
    double ref = time_best(repeats, [&] { want = ref::conv2d(x, w, nullptr, g); });
    double diff = 0;
    for (i64 i = 0; i < y.numel(); ++i)
      diff = std::max(diff, (double)std::fabs(y.data()[i] - want.data()[i]));
    rows.push_back({name, fast, ref, diff});
  };

  conv_case("conv 3x3 64ch 64px", 2, 64, 64, 64, 3, 1, 1, 1);
  conv_case("conv 3x3 stride2", 2, 32, 64, 64, 3, 2, 1, 1);
  conv_case("conv 1x1 256ch 32px", 2, 256, 64, 32, 1, 1, 0, 1);
  conv_case("conv 3x3 dil12", 1, 16, 16, 64, 3, 1, 12, 12);

  {
    kern::ConvTSpec g{2, 1, 1};
    Tensor<float> x = random_tensor(Shape{2, 64, 32, 32}, rng);
    Tensor<float> w = random_tensor(Shape{64, 32, 3, 3}, rng);
    Tensor<float> y(Shape{2, 32, kern::convt_out_dim(32, 3, g),
                          kern::convt_out_dim(32, 3, g)});
    double fast = time_best(repeats, [&] { kern::convt2d_fwd(x, w, y, g); });
    Tensor<float> want;
    double ref =
        time_best(repeats, [&] { want = ref::conv_transpose2d(x, w, g); });
    double diff = 0;
    for (i64 i = 0; i < y.numel(); ++i)
      diff = std::max(diff, (double)std::fabs(y.data()[i] - want.data()[i]));
    rows.push_back({"conv_transpose 3x3 up2", fast, ref, diff});
  }

  {
    Tensor<float> x = random_tensor(Shape{2, 32, 64, 64}, rng);
    Tensor<float> y(Shape{2, 32, 256, 256});
    double fast = time_best(repeats, [&] { kern::bilinear_fwd(x, y); });
    Tensor<float> want;
    double ref =
        time_best(repeats, [&] { want = ref::bilinear_resize(x, 256, 256); });
    double diff = 0;
    for (i64 i = 0; i < y.numel(); ++i)
      diff = std::max(diff, (double)std::fabs(y.data()[i] - want.data()[i]));
    rows.push_back({"bilinear 64->256", fast, ref, diff});
  }

  {
    Tensor<float> x = random_tensor(Shape{4, 128, 64, 64}, rng);
    std::vector<float> gamma(128, 1.0f), beta(128, 0.0f);
    std::vector<float> rm(128, 0.0f), rv(128, 1.0f);
    std::vector<float> sm, si;
    Tensor<float> y(x.shape());
    double fast = time_best(repeats, [&] {
      kern::bn_fwd_train(x, gamma.data(), beta.data(), y, sm, si, rm.data(),
                         rv.data(), 0.1f, 1e-5f);
    });
    std::vector<double> mean, var;
    double ref = time_best(repeats, [&] { ref::bn_stats(x, mean, var); });
    double diff = 0;
    for (size_t c = 0; c < 128; ++c)
      diff = std::max(diff, std::fabs((double)sm[c] - mean[c]));
    rows.push_back({"batch-norm stats 128ch", fast, ref, diff});
  }

  std::printf("%d thread(s), best of %d\n", omp_get_max_threads(), repeats);
  std::printf("%-26s %12s %12s %9s %14s\n", "kernel", "parallel(s)", "serial(s)",
              "speedup", "max abs diff");
  for (auto& r : rows)
    std::printf("%-26s %12.4f %12.4f %8.2fx %14.3e\n", r.name.c_str(), r.fast_s,
                r.ref_s, r.ref_s / r.fast_s, r.max_abs_diff);
  return 0;
}
