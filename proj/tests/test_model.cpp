#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#define PG_GOLDEN_PARAM_COUNT 62292

#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "parsegrid/model.hpp"

using namespace pg;

namespace {

ModelConfig toy_cfg(i64 bw, i64 k, i64 h, i64 w) {
  ModelConfig c;
  c.num_classes = k;
  c.base_width = bw;
  c.encoder_blocks = {1, 1, 1, 1};
  c.input_h = h;
  c.input_w = w;
  return c;
}

template <typename T>
Tensor<T> random_input(i64 n, i64 h, i64 w, u64 seed) {
  Tensor<T> x(Shape{n, 3, h, w});
  Rng rng(seed);
  for (i64 i = 0; i < x.numel(); ++i)
    x.data()[i] = (T)rng.uniform(-1.0, 1.0);
  return x;
}

LabelMap random_labels(i64 n, i64 h, i64 w, i64 k, u64 seed) {
  LabelMap lm(n, h, w);
  Rng rng(seed);
  for (auto& v : lm.v) v = (std::int32_t)rng.uniform_int(0, k - 1);
  return lm;
}

template <typename T>
const ParamEntry<T>* find_param(const Registry<T>& reg,
                                const std::string& name) {
  for (const auto& p : reg.params())
    if (p.name == name) return &p;
  return nullptr;
}

template <typename T>
i64 prefix_param_count(const Registry<T>& reg, const std::string& prefix) {
  i64 n = 0;
  for (const auto& p : reg.params())
    if (p.name.rfind(prefix, 0) == 0) n += p.tensor.numel();
  return n;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), sizeof(T) * (size_t)a.numel()) == 0;
}

}  // namespace

TEST_CASE("config validation accepts defaults and toy variants") {
  ModelConfig def;
  CHECK_NOTHROW(def.validate());
  CHECK_NOTHROW(toy_cfg(8, 5, 32, 32).validate());
  CHECK_NOTHROW(toy_cfg(64, 20, 64, 64).validate());
}

TEST_CASE("config validation reports every violation at once") {
  ModelConfig c = toy_cfg(10, 1, 250, 190);
  c.aspp_dilations = {12, 0};
  c.aux_loss_weight = -1.f;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("base_width") != std::string::npos);
    CHECK(msg.find("num_classes") != std::string::npos);
    CHECK(msg.find("input_h") != std::string::npos);
    CHECK(msg.find("input_w") != std::string::npos);
    CHECK(msg.find("aspp_dilations[1]") != std::string::npos);
    CHECK(msg.find("aux_loss_weight") != std::string::npos);
  }
}

TEST_CASE("config fingerprint is stable and field-sensitive") {
  ModelConfig a = toy_cfg(64, 20, 64, 64);
  ModelConfig b = a;
  CHECK(a.fingerprint() == b.fingerprint());
  b.use_smooth = false;
  CHECK(a.fingerprint() != b.fingerprint());
  b = a;
  b.aspp_dilations = {6, 12, 18};
  CHECK(a.fingerprint() != b.fingerprint());
  b = a;
  b.base_width = 128;
  CHECK(a.fingerprint() != b.fingerprint());
}

TEST_CASE("same seed gives bitwise-identical parameters, new seed differs") {
  ModelConfig cfg = toy_cfg(32, 5, 64, 64);
  Model<float> m1(cfg, 7), m2(cfg, 7), m3(cfg, 8);
  REQUIRE(m1.registry().params().size() == m2.registry().params().size());
  bool all_eq = true;
  for (size_t i = 0; i < m1.registry().params().size(); ++i)
    all_eq = all_eq && bitwise_equal(m1.registry().params()[i].tensor,
                                     m2.registry().params()[i].tensor);
  CHECK(all_eq);
  bool any_diff = false;
  for (size_t i = 0; i < m1.registry().params().size(); ++i)
    if (m1.registry().params()[i].name.find("norm") == std::string::npos &&
        m1.registry().params()[i].name.find("bias") == std::string::npos)
      any_diff = any_diff || !bitwise_equal(m1.registry().params()[i].tensor,
                                            m3.registry().params()[i].tensor);
  CHECK(any_diff);
}

TEST_CASE("double model holds widened copies of the float parameters") {
  ModelConfig cfg = toy_cfg(16, 5, 32, 32);
  Model<float> mf(cfg, 11);
  Model<double> md(cfg, 11);
  REQUIRE(mf.registry().params().size() == md.registry().params().size());
  for (size_t i = 0; i < mf.registry().params().size(); ++i) {
    const auto& pf = mf.registry().params()[i];
    const auto& pd = md.registry().params()[i];
    REQUIRE(pf.name == pd.name);
    REQUIRE(pf.tensor.numel() == pd.tensor.numel());
    for (i64 j = 0; j < pf.tensor.numel(); ++j)
      REQUIRE((double)pf.tensor.data()[j] == pd.tensor.data()[j]);
  }
}

TEST_CASE("registry names follow the documented scheme") {
  ModelConfig cfg = toy_cfg(64, 20, 64, 64);
  Model<float> m(cfg, 1);
  const auto& reg = m.registry();

  std::set<std::string> names;
  for (const auto& p : reg.params()) names.insert(p.name);
  CHECK(names.size() == reg.params().size());

  CHECK(reg.params().front().name == "encoder.E1.weight");
  CHECK(find_param(reg, "encoder.E3.block0.conv2.weight") != nullptr);
  CHECK(find_param(reg, "center.aspp.fuse.weight") != nullptr);
  CHECK(find_param(reg, "decoder.D5.reduce.weight") != nullptr);
  CHECK(find_param(reg, "decoder.D4.up.weight") != nullptr);
  CHECK(find_param(reg, "smooth.project.bias") != nullptr);
  CHECK(find_param(reg, "aux.D2.project.weight") != nullptr);

  CHECK(find_param(reg, "encoder.E1.weight")->decay);
  CHECK_FALSE(find_param(reg, "encoder.E1.norm.gamma")->decay);
  CHECK_FALSE(find_param(reg, "encoder.E1.norm.beta")->decay);
  CHECK_FALSE(find_param(reg, "smooth.project.bias")->decay);
  CHECK(find_param(reg, "smooth.project.weight")->decay);

  bool has_running = false;
  for (const auto& s : reg.states())
    has_running = has_running || s.first == "encoder.E1.norm.running_mean";
  CHECK(has_running);
}

TEST_CASE("ablation switches control which modules exist") {
  ModelConfig cfg = toy_cfg(32, 5, 64, 64);

  cfg.use_aspp = false;
  cfg.use_smooth = false;
  cfg.use_multiscale_loss = false;
  Model<float> base(cfg, 1);
  CHECK(prefix_param_count(base.registry(), "center.dblock") > 0);
  CHECK(prefix_param_count(base.registry(), "center.aspp") == 0);
  CHECK(prefix_param_count(base.registry(), "refiner") > 0);
  CHECK(prefix_param_count(base.registry(), "smooth") == 0);
  CHECK(prefix_param_count(base.registry(), "aux") == 0);

  cfg.use_aspp = true;
  Model<float> ba(cfg, 1);
  CHECK(prefix_param_count(ba.registry(), "center.aspp") > 0);
  CHECK(prefix_param_count(ba.registry(), "center.dblock") == 0);

  cfg.use_aspp = false;
  cfg.use_smooth = true;
  Model<float> bs(cfg, 1);
  CHECK(prefix_param_count(bs.registry(), "smooth") > 0);
  CHECK(prefix_param_count(bs.registry(), "refiner") == 0);

  cfg.use_multiscale_loss = true;
  Model<float> bsl(cfg, 1);
  CHECK(prefix_param_count(bsl.registry(), "aux.D5") > 0);
  CHECK(prefix_param_count(bsl.registry(), "aux.D2") > 0);

  // The context module must cost more parameters than the baseline block
  // it replaces, and the fusion module must add parameters too.
  ModelConfig cb = toy_cfg(64, 20, 64, 64);
  cb.use_aspp = false;
  cb.use_smooth = false;
  cb.use_multiscale_loss = false;
  Model<float> b64(cb, 1);
  cb.use_aspp = true;
  Model<float> ba64(cb, 1);
  CHECK(b64.registry().param_count() < ba64.registry().param_count());
  cb.use_aspp = false;
  cb.use_smooth = true;
  Model<float> bs64(cb, 1);
  CHECK(b64.registry().param_count() < bs64.registry().param_count());
}

TEST_CASE("encoder produces the documented feature pyramid") {
  SUBCASE("width 64 at 64x64") {
    Model<float> m(toy_cfg(64, 20, 64, 64), 3);
    auto x = random_input<float>(1, 64, 64, 42);
    auto e = m.encoder_forward(x, false);
    CHECK(e.e1.shape() == Shape{1, 8, 32, 32});
    CHECK(e.e2.shape() == Shape{1, 8, 16, 16});
    CHECK(e.e3.shape() == Shape{1, 16, 8, 8});
    CHECK(e.e4.shape() == Shape{1, 32, 4, 4});
    CHECK(e.e5.shape() == Shape{1, 64, 4, 4});
  }
  SUBCASE("width 8 at 32x32") {
    Model<float> m(toy_cfg(8, 5, 32, 32), 3);
    auto x = random_input<float>(2, 32, 32, 43);
    auto e = m.encoder_forward(x, true);
    CHECK(e.e1.shape() == Shape{2, 1, 16, 16});
    CHECK(e.e2.shape() == Shape{2, 1, 8, 8});
    CHECK(e.e3.shape() == Shape{2, 2, 4, 4});
    CHECK(e.e4.shape() == Shape{2, 4, 2, 2});
    CHECK(e.e5.shape() == Shape{2, 8, 2, 2});
  }
  SUBCASE("last stage keeps the stride-16 grid") {
    Model<float> m(toy_cfg(32, 5, 64, 64), 3);
    auto x = random_input<float>(1, 64, 64, 44);
    auto e = m.encoder_forward(x, false);
    CHECK(e.e4.shape().h == e.e5.shape().h);
    CHECK(e.e4.shape().w == e.e5.shape().w);
  }
  SUBCASE("input contract errors") {
    Model<float> m(toy_cfg(8, 5, 32, 32), 3);
    Tensor<float> bad_c(Shape{1, 4, 32, 32});
    CHECK_THROWS_AS((void)m.encoder_forward(bad_c, false), ShapeError);
    Tensor<float> bad_hw(Shape{1, 3, 30, 32});
    CHECK_THROWS_AS((void)m.encoder_forward(bad_hw, false), ShapeError);
  }
}

TEST_CASE("context module channel trace matches the contract") {
  SUBCASE("full-scale trace from metadata") {
    Registry<float> reg;
    Rng rng(1);
    Aspp<float> a;
    a.init(reg, rng, "aspp", 2048, {12, 24, 36}, false);
    CHECK(a.channel_trace() == std::vector<i64>{2048, 1024, 256, 1024, 2048});
    const auto* w = find_param(reg, "aspp.branch1.weight");
    REQUIRE(w != nullptr);
    CHECK(w->tensor.shape() == Shape{256, 1024, 3, 3});
    CHECK(find_param(reg, "aspp.fuse.weight")->tensor.shape() ==
          Shape{2048, 1024, 1, 1});
  }
  SUBCASE("scaled traces") {
    for (i64 bw : {8, 32, 64}) {
      Model<float> m(toy_cfg(bw, 5, 32, 32), 1);
      CHECK(m.aspp_channel_trace() ==
            std::vector<i64>{bw, bw / 2, bw / 8, 4 * (bw / 8), bw});
    }
  }
  SUBCASE("pooled branch widens the concat stage") {
    Registry<float> reg;
    Rng rng(1);
    Aspp<float> a;
    a.init(reg, rng, "aspp", 64, {12, 24, 36}, true);
    CHECK(a.channel_trace() == std::vector<i64>{64, 32, 8, 40, 64});
    auto x = Tensor<float>::full(Shape{1, 64, 4, 4}, 0.5f);
    CHECK(a.forward(x, true).shape() == Shape{1, 64, 4, 4});
  }
  SUBCASE("forward preserves shape") {
    Registry<float> reg;
    Rng rng(2);
    Aspp<float> a;
    a.init(reg, rng, "aspp", 32, {2, 4, 6}, false);
    auto x = random_input<float>(1, 8, 8, 5);
    Tensor<float> wide(Shape{1, 32, 8, 8});
    Rng r2(9);
    for (i64 i = 0; i < wide.numel(); ++i)
      wide.data()[i] = (float)r2.uniform(-1.0, 1.0);
    CHECK(a.forward(wide, true).shape() == Shape{1, 32, 8, 8});
  }
}

TEST_CASE("decoder stack restores resolution and uses its skips") {
  Model<float> m(toy_cfg(64, 20, 64, 64), 5);
  auto x = random_input<float>(1, 64, 64, 6);
  auto e = m.encoder_forward(x, true);
  auto c = m.center_forward(e.e5, true);
  auto d = m.decoder_forward(c, e, true);
  CHECK(d.d5.shape() == Shape{1, 32, 4, 4});
  CHECK(d.d4.shape() == Shape{1, 16, 8, 8});
  CHECK(d.d3.shape() == Shape{1, 8, 16, 16});
  CHECK(d.d2.shape() == Shape{1, 8, 16, 16});

  SUBCASE("zeroing an encoder skip changes the downstream map") {
    EncoderMaps<float> ez = e;
    ez.e2 = Tensor<float>(e.e2.shape());
    auto dz = m.decoder_forward(c, ez, true);
    CHECK_FALSE(bitwise_equal(d.d3, dz.d3));
    CHECK(bitwise_equal(d.d4, dz.d4));
  }

  SUBCASE("skip shape mismatch names the stage") {
    EncoderMaps<float> eb = e;
    eb.e3 = Tensor<float>(Shape{1, 16, 4, 4});
    try {
      (void)m.decoder_forward(c, eb, true);
      FAIL("expected ShapeError");
    } catch (const ShapeError& err) {
      CHECK(std::string(err.what()).find("D4") != std::string::npos);
    }
  }
}

TEST_CASE("decoder block parameters match the closed form") {
  Model<float> m(toy_cfg(64, 20, 64, 64), 5);
  auto conv_bn = [](i64 cin, i64 cout, i64 k) {
    return cin * cout * k * k + 2 * cout;
  };
  const i64 mid5 = 16;  // 64 / 4
  const i64 want5 = conv_bn(64, mid5, 1) + conv_bn(mid5, mid5, 3) +
                    conv_bn(mid5, 32, 1);
  CHECK(prefix_param_count(m.registry(), "decoder.D5.") == want5);
  const i64 mid4 = 8;  // 32 / 4
  const i64 want4 = conv_bn(32, mid4, 1) + conv_bn(mid4, mid4, 3) +
                    conv_bn(mid4, 16, 1);
  CHECK(prefix_param_count(m.registry(), "decoder.D4.") == want4);
}

TEST_CASE("narrow decoder blocks fall back to a single mid channel") {
  CHECK(DecoderBlock<float>::mid_channels(1) == 1);
  CHECK(DecoderBlock<float>::mid_channels(2) == 1);
  CHECK(DecoderBlock<float>::mid_channels(8) == 2);
  CHECK_THROWS_AS((void)DecoderBlock<float>::mid_channels(6), ConfigError);
}

TEST_CASE("prediction head is constant on constant input away from borders") {
  Registry<float> reg;
  Rng rng(4);
  Head<float> h;
  h.init(reg, rng, "head", 8, 5);
  auto d = Tensor<float>::full(Shape{1, 8, 12, 12}, 0.75f);
  auto y = h.logits(d, false);
  REQUIRE(y.shape() == Shape{1, 5, 12, 12});
  for (i64 c = 0; c < 5; ++c) {
    const float ref = y.at(0, c, 2, 2);
    for (i64 i = 2; i < 10; ++i)
      for (i64 j = 2; j < 10; ++j) CHECK(y.at(0, c, i, j) == ref);
  }
}

TEST_CASE("fusion module blends all decoder maps") {
  Model<float> m(toy_cfg(32, 5, 64, 64), 6);
  auto x = random_input<float>(1, 64, 64, 7);
  auto e = m.encoder_forward(x, true);
  auto c = m.center_forward(e.e5, true);
  auto d = m.decoder_forward(c, e, true);
  auto y = m.refine(d, 64, 64, true);
  CHECK(y.shape() == Shape{1, 5, 64, 64});

  SUBCASE("deepest map contributes") {
    DecoderMaps<float> dz = d;
    dz.d5 = Tensor<float>(d.d5.shape());
    auto yz = m.refine(dz, 64, 64, true);
    CHECK_FALSE(bitwise_equal(y, yz));
  }

  SUBCASE("all-zero maps produce the projection bias per class") {
    DecoderMaps<float> dz;
    dz.d5 = Tensor<float>(d.d5.shape());
    dz.d4 = Tensor<float>(d.d4.shape());
    dz.d3 = Tensor<float>(d.d3.shape());
    dz.d2 = Tensor<float>(d.d2.shape());
    auto yz = m.refine(dz, 64, 64, true);
    for (i64 c = 0; c < 5; ++c) {
      const float ref = yz.at(0, c, 0, 0);
      bool constant = true;
      for (i64 i = 0; i < 64 && constant; ++i)
        for (i64 j = 0; j < 64 && constant; ++j)
          constant = (yz.at(0, c, i, j) == ref);
      CHECK(constant);
    }
  }
}

TEST_CASE("model forward honors the logits shape contract") {
  ModelConfig cfg = toy_cfg(64, 20, 256, 192);
  Model<float> m(cfg, 9);

  SUBCASE("single full-size sample") {
    auto x = random_input<float>(1, 256, 192, 8);
    auto out = m.forward(x, false);
    CHECK(out.main_logits.shape() == Shape{1, 20, 256, 192});
    REQUIRE(out.aux_logits.size() == 4);
    for (const auto& a : out.aux_logits)
      CHECK(a.shape() == Shape{1, 20, 256, 192});
  }
  SUBCASE("batch of two at 64x64") {
    auto x = random_input<float>(2, 64, 64, 9);
    auto out = m.forward(x, false);
    CHECK(out.main_logits.shape() == Shape{2, 20, 64, 64});
    REQUIRE(out.aux_logits.size() == 4);
    for (const auto& a : out.aux_logits)
      CHECK(a.shape() == Shape{2, 20, 64, 64});
  }
  SUBCASE("aux logits disappear without the multi-scale loss") {
    ModelConfig c2 = toy_cfg(32, 5, 64, 64);
    c2.use_multiscale_loss = false;
    Model<float> m2(c2, 9);
    auto x = random_input<float>(1, 64, 64, 10);
    auto out = m2.forward(x, false);
    CHECK(out.main_logits.shape() == Shape{1, 5, 64, 64});
    CHECK(out.aux_logits.empty());
  }
  SUBCASE("refiner variant keeps the contract") {
    ModelConfig c3 = toy_cfg(32, 5, 64, 64);
    c3.use_smooth = false;
    c3.use_aspp = false;
    Model<float> m3(c3, 9);
    auto x = random_input<float>(1, 64, 64, 11);
    auto out = m3.forward(x, true);
    CHECK(out.main_logits.shape() == Shape{1, 5, 64, 64});
    CHECK(out.aux_logits.size() == 4);
  }
}

TEST_CASE("eval-mode forward is bitwise repeatable") {
  Model<float> m(toy_cfg(32, 5, 64, 64), 12);
  auto x = random_input<float>(1, 64, 64, 12);
  (void)m.forward(x, true);  // move running stats off their init values
  auto a = m.forward(x, false);
  auto b = m.forward(x, false);
  CHECK(bitwise_equal(a.main_logits, b.main_logits));
  REQUIRE(a.aux_logits.size() == b.aux_logits.size());
  for (size_t i = 0; i < a.aux_logits.size(); ++i)
    CHECK(bitwise_equal(a.aux_logits[i], b.aux_logits[i]));
}

TEST_CASE("composite loss is main plus half the auxiliary sum") {
  const i64 k = 5, h = 8, w = 8;
  Tensor<float> logits(Shape{2, k, h, w});
  Rng rng(13);
  for (i64 i = 0; i < logits.numel(); ++i)
    logits.data()[i] = (float)rng.uniform(-2.0, 2.0);
  LabelMap lm = random_labels(2, h, w, k, 14);

  SUBCASE("equal branch losses collapse to three times one branch") {
    ModelOutputs<float> out;
    out.main_logits = logits;
    for (int i = 0; i < 4; ++i) out.aux_logits.push_back(logits);
    const float l = ops::cross_entropy_2d(logits, lm, 255).item();
    const float total = total_loss(out, lm, 255, 0.5f).item();
    CHECK(std::abs(total - 3.f * l) <= 1e-6f * std::max(1.f, std::abs(l)));
  }

  SUBCASE("independent recomputation of mixed branches") {
    ModelOutputs<float> out;
    out.main_logits = logits;
    std::vector<float> parts;
    for (int i = 0; i < 4; ++i) {
      Tensor<float> a(Shape{2, k, h, w});
      for (i64 j = 0; j < a.numel(); ++j)
        a.data()[j] = (float)rng.uniform(-2.0, 2.0);
      out.aux_logits.push_back(a);
      parts.push_back(ops::cross_entropy_2d(a, lm, 255).item());
    }
    const float main = ops::cross_entropy_2d(logits, lm, 255).item();
    float want = main;
    for (float p : parts) want += 0.5f * p;
    const float total = total_loss(out, lm, 255, 0.5f).item();
    CHECK(std::abs(total - want) <= 1e-6f * std::max(1.f, std::abs(want)));
  }

  SUBCASE("zero weight ignores the auxiliary branches") {
    ModelOutputs<float> out;
    out.main_logits = logits;
    for (int i = 0; i < 4; ++i) out.aux_logits.push_back(logits);
    const float main = ops::cross_entropy_2d(logits, lm, 255).item();
    CHECK(total_loss(out, lm, 255, 0.f).item() == doctest::Approx(main));
  }

  SUBCASE("all-ignored labels are flagged") {
    ModelOutputs<float> out;
    out.main_logits = logits;
    LabelMap ig(2, h, w);
    for (auto& v : ig.v) v = 255;
    bool flag = false;
    const float total = total_loss(out, lm, 255, 0.5f, &flag).item();
    CHECK(total > 0.f);
    CHECK_FALSE(flag);
    CHECK(total_loss(out, ig, 255, 0.5f, &flag).item() == 0.f);
    CHECK(flag);
  }
}

TEST_CASE("total loss reaches every module in the backward pass") {
  ModelConfig cfg = toy_cfg(8, 5, 32, 32);
  Model<float> m(cfg, 15);
  auto x = random_input<float>(1, 32, 32, 15);
  LabelMap lm = random_labels(1, 32, 32, 5, 16);

  Tape tape;
  {
    TapeScope scope(tape);
    auto out = m.forward(x, true);
    auto loss = total_loss(out, lm, 255, 0.5f);
    backward(loss, tape);
  }
  const char* groups[] = {"encoder.", "center.", "decoder.", "smooth.",
                          "aux."};
  for (const char* g : groups) {
    double sum = 0;
    for (auto& p : m.registry().params())
      if (p.name.rfind(g, 0) == 0 && p.tensor.has_grad())
        for (i64 i = 0; i < p.tensor.numel(); ++i)
          sum += std::abs((double)p.tensor.grad()[i]);
    INFO("group ", g);
    CHECK(sum > 0.0);
  }
}

TEST_CASE("analytic gradients agree with finite differences end to end") {
  // Spot check in double precision: a strided sample of coordinates from
  // every parameter tensor of the smallest full model.
  ModelConfig cfg = toy_cfg(8, 5, 32, 32);
  Model<double> m(cfg, 17);
  auto x = random_input<double>(1, 32, 32, 18);
  LabelMap lm = random_labels(1, 32, 32, 5, 19);

  auto loss_value = [&]() {
    auto out = m.forward(x, true);
    return total_loss(out, lm, 255, 0.5, nullptr).item();
  };

  m.registry().zero_grads();
  Tape tape;
  {
    TapeScope scope(tape);
    auto out = m.forward(x, true);
    auto loss = total_loss(out, lm, 255, 0.5);
    backward(loss, tape);
  }

  const double eps = 1e-4;
  double worst = 0.0;
  std::string worst_name;
  for (auto& p : m.registry().params()) {
    const i64 n = p.tensor.numel();
    const i64 stride = std::max<i64>(1, n / 3);
    for (i64 i = 0; i < n; i += stride) {
      double* v = p.tensor.data();
      const double keep = v[i];
      v[i] = keep + eps;
      const double fp = loss_value();
      v[i] = keep - eps;
      const double fm = loss_value();
      v[i] = keep;
      const double fd = (fp - fm) / (2 * eps);
      const double an = p.tensor.grad()[i];
      const double rel =
          std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
      if (rel > worst) {
        worst = rel;
        worst_name = strf("%s[%lld]", p.name.c_str(), (long long)i);
      }
    }
  }
  INFO("worst coordinate ", worst_name);
  CHECK(worst <= 5e-3);
}

TEST_CASE("toy parameter count is frozen") {
  ModelConfig cfg = toy_cfg(64, 20, 64, 64);
  Model<float> m(cfg, 1);
  // Golden value recorded from the first verified build of this
  // architecture; any structural change must be deliberate.
  CHECK(m.registry().param_count() == PG_GOLDEN_PARAM_COUNT);
}
