#include "parsegrid/model.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>

namespace pg {

// ---- ModelConfig ----

void ModelConfig::validate() const {
  std::vector<std::string> bad;
  if (num_classes < 2)
    bad.push_back(strf("num_classes must be >= 2, got %lld",
                       (long long)num_classes));
  if (base_width < 8 || base_width % 8 != 0)
    bad.push_back(strf("base_width must be a positive multiple of 8, got %lld",
                       (long long)base_width));
  for (int i = 0; i < 4; ++i)
    if (encoder_blocks[(size_t)i] < 1)
      bad.push_back(strf("encoder_blocks[%d] must be >= 1, got %lld", i,
                         (long long)encoder_blocks[(size_t)i]));
  if (use_aspp && aspp_dilations.empty())
    bad.push_back("aspp_dilations must be non-empty when use_aspp is set");
  for (size_t i = 0; i < aspp_dilations.size(); ++i)
    if (aspp_dilations[i] < 1)
      bad.push_back(strf("aspp_dilations[%zu] must be >= 1, got %lld", i,
                         (long long)aspp_dilations[i]));
  if (!(aux_loss_weight >= 0.f) || !std::isfinite(aux_loss_weight))
    bad.push_back(strf("aux_loss_weight must be finite and >= 0, got %g",
                       (double)aux_loss_weight));
  if (input_h < 16 || input_h % 16 != 0)
    bad.push_back(strf("input_h must be a positive multiple of 16, got %lld",
                       (long long)input_h));
  if (input_w < 16 || input_w % 16 != 0)
    bad.push_back(strf("input_w must be a positive multiple of 16, got %lld",
                       (long long)input_w));
  if (!bad.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }
}

std::string ModelConfig::canonical() const {
  std::string s;
  s += strf("num_classes=%lld\n", (long long)num_classes);
  s += strf("base_width=%lld\n", (long long)base_width);
  s += "encoder_blocks=";
  for (int i = 0; i < 4; ++i)
    s += strf(i ? ",%lld" : "%lld", (long long)encoder_blocks[(size_t)i]);
  s += "\naspp_dilations=";
  for (size_t i = 0; i < aspp_dilations.size(); ++i)
    s += strf(i ? ",%lld" : "%lld", (long long)aspp_dilations[i]);
  s += strf("\naspp_pool_branch=%d\n", aspp_pool_branch ? 1 : 0);
  s += strf("use_aspp=%d\n", use_aspp ? 1 : 0);
  s += strf("use_smooth=%d\n", use_smooth ? 1 : 0);
  s += strf("use_multiscale_loss=%d\n", use_multiscale_loss ? 1 : 0);
  s += strf("aux_loss_weight=%.9g\n", (double)aux_loss_weight);
  s += strf("input_hw=%lldx%lld\n", (long long)input_h, (long long)input_w);
  return s;
}

u32 ModelConfig::fingerprint() const {
  const std::string s = canonical();
  return (u32)crc32(0L, reinterpret_cast<const Bytef*>(s.data()),
                    (uInt)s.size());
}

// ---- init helpers ----

namespace {

// Fan-in scaled Gaussian init. Values are always drawn in float and cast,
// so a double model with the same seed holds bitwise-widened copies of
// the float model's parameters.
template <typename T>
Tensor<T> conv_weight_init(Rng& rng, i64 c0, i64 c1, i64 kh, i64 kw,
                           i64 fan_in) {
  Tensor<T> w(Shape{c0, c1, kh, kw});
  const float stdev = std::sqrt(2.0f / (float)fan_in);
  fill_randn(w, rng, stdev);
  return w;
}

}  // namespace

// ---- Conv2d ----

template <typename T>
void Conv2d<T>::init(Registry<T>& reg, Rng& rng, const std::string& name,
                     i64 cin, i64 cout, i64 k, i64 stride_, i64 padding_,
                     i64 dilation_, bool bias) {
  stride = stride_;
  padding = padding_;
  dilation = dilation_;
  w = reg.add_param(name + ".weight",
                    conv_weight_init<T>(rng, cout, cin, k, k, cin * k * k),
                    true);
  if (bias)
    b = reg.add_param(name + ".bias", Tensor<T>(Shape{1, cout, 1, 1}), false);
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  return ops::conv2d(x, w, b ? &*b : nullptr, stride, padding, dilation);
}

// ---- ConvTranspose2d ----

template <typename T>
void ConvTranspose2d<T>::init(Registry<T>& reg, Rng& rng,
                              const std::string& name, i64 cin, i64 cout,
                              i64 k, i64 stride_, i64 padding_,
                              i64 output_padding_) {
  stride = stride_;
  padding = padding_;
  output_padding = output_padding_;
  w = reg.add_param(name + ".weight",
                    conv_weight_init<T>(rng, cin, cout, k, k, cin * k * k),
                    true);
}

template <typename T>
Tensor<T> ConvTranspose2d<T>::forward(const Tensor<T>& x) const {
  return ops::conv_transpose2d(x, w, stride, padding, output_padding);
}

// ---- BatchNorm2d ----

template <typename T>
void BatchNorm2d<T>::init(Registry<T>& reg, const std::string& name, i64 c) {
  gamma = reg.add_param(name + ".gamma", Tensor<T>::full(Shape{1, c, 1, 1}, T(1)),
                        false);
  beta = reg.add_param(name + ".beta", Tensor<T>(Shape{1, c, 1, 1}), false);
  state.running_mean = reg.add_state(name + ".running_mean",
                                     Tensor<T>(Shape{1, c, 1, 1}));
  state.running_var = reg.add_state(name + ".running_var",
                                    Tensor<T>::full(Shape{1, c, 1, 1}, T(1)));
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, bool train) {
  return ops::batch_norm(x, gamma, beta, state, train);
}

// ---- ConvBnRelu / DeconvBnRelu ----

template <typename T>
void ConvBnRelu<T>::init(Registry<T>& reg, Rng& rng, const std::string& name,
                         i64 cin, i64 cout, i64 k, i64 stride, i64 padding,
                         i64 dilation) {
  conv.init(reg, rng, name, cin, cout, k, stride, padding, dilation, false);
  norm.init(reg, name + ".norm", cout);
}

template <typename T>
Tensor<T> ConvBnRelu<T>::forward(const Tensor<T>& x, bool train) {
  return ops::relu(norm.forward(conv.forward(x), train));
}

template <typename T>
void DeconvBnRelu<T>::init(Registry<T>& reg, Rng& rng, const std::string& name,
                           i64 cin, i64 cout) {
  conv.init(reg, rng, name, cin, cout, 3, 2, 1, 1);
  norm.init(reg, name + ".norm", cout);
}

template <typename T>
Tensor<T> DeconvBnRelu<T>::forward(const Tensor<T>& x, bool train) {
  return ops::relu(norm.forward(conv.forward(x), train));
}

// ---- Bottleneck ----

template <typename T>
void Bottleneck<T>::init(Registry<T>& reg, Rng& rng, const std::string& name,
                         i64 cin, i64 cout, i64 stride, i64 dilation) {
  const i64 mid = std::max<i64>(1, cout / 4);
  conv1.init(reg, rng, name + ".conv1", cin, mid, 1, 1, 0, 1);
  conv2.init(reg, rng, name + ".conv2", mid, mid, 3, stride, dilation,
             dilation);
  conv3.init(reg, rng, name + ".conv3", mid, cout, 1, 1, 0, 1, false);
  norm3.init(reg, name + ".norm3", cout);
  has_skip = (cin != cout || stride != 1);
  if (has_skip) {
    skip.init(reg, rng, name + ".skip", cin, cout, 1, stride, 0, 1, false);
    skip_norm.init(reg, name + ".skip_norm", cout);
  }
}

template <typename T>
Tensor<T> Bottleneck<T>::forward(const Tensor<T>& x, bool train) {
  Tensor<T> h = conv2.forward(conv1.forward(x, train), train);
  h = norm3.forward(conv3.forward(h), train);
  Tensor<T> s = has_skip ? skip_norm.forward(skip.forward(x), train) : x;
  return ops::relu(ops::add(h, s));
}

// ---- Aspp ----

template <typename T>
void Aspp<T>::init(Registry<T>& reg, Rng& rng, const std::string& name,
                   i64 cb_, const std::vector<i64>& dilations_,
                   bool pool_branch_) {
  cb = cb_;
  dilations = dilations_;
  pool_branch = pool_branch_;
  const i64 half = cb / 2, eighth = cb / 8;
  reduce.init(reg, rng, name + ".reduce", cb, half, 1, 1, 0, 1);
  branch0.init(reg, rng, name + ".branch0", half, eighth, 1, 1, 0, 1);
  atrous.resize(dilations.size());
  for (size_t i = 0; i < dilations.size(); ++i)
    atrous[i].init(reg, rng, strf("%s.branch%zu", name.c_str(), i + 1), half,
                   eighth, 3, 1, dilations[i], dilations[i]);
  if (pool_branch)
    pool_conv.init(reg, rng, name + ".pool", half, eighth, 1, 1, 0, 1);
  const i64 nb = (i64)dilations.size() + 1 + (pool_branch ? 1 : 0);
  fuse.init(reg, rng, name + ".fuse", nb * eighth, cb, 1, 1, 0, 1);
}

template <typename T>
Tensor<T> Aspp<T>::forward(const Tensor<T>& x, bool train) {
  Tensor<T> r = reduce.forward(x, train);
  std::vector<Tensor<T>> outs;
  outs.push_back(branch0.forward(r, train));
  for (auto& a : atrous) outs.push_back(a.forward(r, train));
  if (pool_branch) {
    Tensor<T> p = ops::global_avg_pool(r);
    p = pool_conv.forward(p, train);
    outs.push_back(ops::bilinear_resize(p, r.shape().h, r.shape().w));
  }
  return fuse.forward(ops::concat_channels(outs), train);
}

template <typename T>
std::vector<i64> Aspp<T>::channel_trace() const {
  const i64 nb = (i64)dilations.size() + 1 + (pool_branch ? 1 : 0);
  return {cb, cb / 2, cb / 8, nb * (cb / 8), cb};
}

// ---- DBlock ----

template <typename T>
void DBlock<T>::init(Registry<T>& reg, Rng& rng, const std::string& name,
                     i64 cb_) {
  cb = cb_;
  const i64 q = std::max<i64>(1, cb / 4);
  reduce.init(reg, rng, name + ".reduce", cb, q, 1, 1, 0, 1);
  const i64 rates[3] = {1, 2, 4};
  for (int i = 0; i < 3; ++i)
    dilated[(size_t)i].init(reg, rng, strf("%s.conv_d%lld", name.c_str(),
                                           (long long)rates[i]),
                            q, q, 3, 1, rates[i], rates[i]);
  expand.init(reg, rng, name + ".expand", q, cb, 1, 1, 0, 1, false);
  expand_norm.init(reg, name + ".expand_norm", cb);
}

template <typename T>
Tensor<T> DBlock<T>::forward(const Tensor<T>& x, bool train) {
  Tensor<T> y0 = reduce.forward(x, train);
  Tensor<T> y1 = dilated[0].forward(y0, train);
  Tensor<T> y2 = dilated[1].forward(y1, train);
  Tensor<T> y3 = dilated[2].forward(y2, train);
  Tensor<T> s = ops::add(ops::add(y0, y1), ops::add(y2, y3));
  Tensor<T> e = expand_norm.forward(expand.forward(s), train);
  return ops::relu(ops::add(e, x));
}

// ---- DecoderBlock ----

template <typename T>
i64 DecoderBlock<T>::mid_channels(i64 cin) {
  check<ConfigError>(cin < 4 || cin % 4 == 0,
                     strf("decoder block input width %lld is not divisible "
                          "by 4",
                          (long long)cin));
  return std::max<i64>(1, cin / 4);
}

template <typename T>
void DecoderBlock<T>::init(Registry<T>& reg, Rng& rng, const std::string& name,
                           i64 cin_, i64 cout_, bool upsample_) {
  cin = cin_;
  cout = cout_;
  upsample = upsample_;
  const i64 mid = mid_channels(cin);
  reduce.init(reg, rng, name + ".reduce", cin, mid, 1, 1, 0, 1);
  if (upsample)
    mid_up.init(reg, rng, name + ".up", mid, mid);
  else
    mid_conv.init(reg, rng, name + ".conv", mid, mid, 3, 1, 1, 1);
  project.init(reg, rng, name + ".project", mid, cout, 1, 1, 0, 1);
}

template <typename T>
Tensor<T> DecoderBlock<T>::forward(const Tensor<T>& x, bool train) {
  Tensor<T> h = reduce.forward(x, train);
  h = upsample ? mid_up.forward(h, train) : mid_conv.forward(h, train);
  return project.forward(h, train);
}

// ---- Head ----

template <typename T>
void Head<T>::init(Registry<T>& reg, Rng& rng, const std::string& name, i64 c,
                   i64 k) {
  conv1.init(reg, rng, name + ".conv1", c, c, 3, 1, 1, 1);
  conv2.init(reg, rng, name + ".conv2", c, c, 3, 1, 1, 1);
  project.init(reg, rng, name + ".project", c, k, 1, 1, 0, 1, true);
}

template <typename T>
Tensor<T> Head<T>::logits(const Tensor<T>& d, bool train) {
  return project.forward(conv2.forward(conv1.forward(d, train), train));
}

template <typename T>
Tensor<T> Head<T>::forward(const Tensor<T>& d, i64 out_h, i64 out_w,
                           bool train) {
  return ops::bilinear_resize(logits(d, train), out_h, out_w);
}

// ---- Smooth ----

template <typename T>
void Smooth<T>::init(Registry<T>& reg, Rng& rng, const std::string& name,
                     i64 base_width, i64 k) {
  const i64 bw8 = base_width / 8;
  // D5 sits at 1/16 scale with bw/2 channels: two upsampling blocks.
  chain5.resize(2);
  chain5[0].init(reg, rng, name + ".D5.step0", base_width / 2, base_width / 4,
                 true);
  chain5[1].init(reg, rng, name + ".D5.step1", base_width / 4, bw8, true);
  // D4 sits at 1/8 scale with bw/4 channels: one upsampling block.
  chain4.resize(1);
  chain4[0].init(reg, rng, name + ".D4.step0", base_width / 4, bw8, true);
  const i64 cat = 4 * bw8;
  blend1.init(reg, rng, name + ".blend1", cat, cat / 2, 3, 1, 1, 1);
  blend2.init(reg, rng, name + ".blend2", cat / 2, cat / 2, 3, 1, 1, 1);
  project.init(reg, rng, name + ".project", cat / 2, k, 1, 1, 0, 1, true);
}

template <typename T>
Tensor<T> Smooth<T>::forward(const Tensor<T>& d5, const Tensor<T>& d4,
                             const Tensor<T>& d3, const Tensor<T>& d2,
                             i64 out_h, i64 out_w, bool train) {
  Tensor<T> a = d5;
  for (auto& b : chain5) a = b.forward(a, train);
  Tensor<T> c = d4;
  for (auto& b : chain4) c = b.forward(c, train);
  Tensor<T> cat = ops::concat_channels(std::vector<Tensor<T>>{a, c, d3, d2});
  Tensor<T> h = blend2.forward(blend1.forward(cat, train), train);
  return ops::bilinear_resize(project.forward(h), out_h, out_w);
}

// ---- Model ----

template <typename T>
Model<T>::Model(const ModelConfig& cfg, u64 seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(splitmix64(seed));
  const i64 bw = cfg_.base_width;
  const i64 k = cfg_.num_classes;
  const i64 widths[4] = {bw / 8, bw / 4, bw / 2, bw};
  const i64 strides[4] = {1, 2, 2, 1};
  const i64 dils[4] = {1, 1, 1, 2};

  stem_.init(reg_, rng, "encoder.E1", 3, bw / 8, 7, 2, 3, 1);
  i64 cin = bw / 8;
  for (int s = 0; s < 4; ++s) {
    stages_[(size_t)s].resize((size_t)cfg_.encoder_blocks[(size_t)s]);
    for (i64 b = 0; b < cfg_.encoder_blocks[(size_t)s]; ++b) {
      stages_[(size_t)s][(size_t)b].init(
          reg_, rng, strf("encoder.E%d.block%lld", s + 2, (long long)b), cin,
          widths[s], b == 0 ? strides[s] : 1, dils[s]);
      cin = widths[s];
    }
  }

  if (cfg_.use_aspp) {
    aspp_.emplace();
    aspp_->init(reg_, rng, "center.aspp", bw, cfg_.aspp_dilations,
                cfg_.aspp_pool_branch);
  } else {
    dblock_.emplace();
    dblock_->init(reg_, rng, "center.dblock", bw);
  }

  dec5_.init(reg_, rng, "decoder.D5", bw, bw / 2, false);
  dec4_.init(reg_, rng, "decoder.D4", bw / 2, bw / 4, true);
  dec3_.init(reg_, rng, "decoder.D3", bw / 4, bw / 8, true);
  dec2_.init(reg_, rng, "decoder.D2", bw / 8, bw / 8, false);

  if (cfg_.use_smooth) {
    smooth_.emplace();
    smooth_->init(reg_, rng, "smooth", bw, k);
  } else {
    refiner_.emplace();
    refiner_->init(reg_, rng, "refiner", bw / 8, k);
  }

  if (cfg_.use_multiscale_loss) {
    const char* names[4] = {"aux.D5", "aux.D4", "aux.D3", "aux.D2"};
    const i64 cs[4] = {bw / 2, bw / 4, bw / 8, bw / 8};
    aux_heads_.resize(4);
    for (int i = 0; i < 4; ++i)
      aux_heads_[(size_t)i].init(reg_, rng, names[i], cs[i], k);
  }
}

template <typename T>
EncoderMaps<T> Model<T>::encoder_forward(const Tensor<T>& x, bool train) {
  const Shape& s = x.shape();
  check(s.c == 3, strf("encoder input must have 3 channels, got %lld",
                       (long long)s.c));
  check(s.h % 16 == 0 && s.w % 16 == 0,
        strf("encoder input spatial size %lldx%lld must be divisible by 16",
             (long long)s.h, (long long)s.w));
  EncoderMaps<T> m;
  m.e1 = stem_.forward(x, train);
  Tensor<T> h = ops::max_pool2d(m.e1, 3, 2, 1);
  for (auto& b : stages_[0]) h = b.forward(h, train);
  m.e2 = h;
  for (auto& b : stages_[1]) h = b.forward(h, train);
  m.e3 = h;
  for (auto& b : stages_[2]) h = b.forward(h, train);
  m.e4 = h;
  for (auto& b : stages_[3]) h = b.forward(h, train);
  m.e5 = h;
  return m;
}

template <typename T>
Tensor<T> Model<T>::center_forward(const Tensor<T>& e5, bool train) {
  return aspp_ ? aspp_->forward(e5, train) : dblock_->forward(e5, train);
}

template <typename T>
DecoderMaps<T> Model<T>::decoder_forward(const Tensor<T>& center,
                                         const EncoderMaps<T>& enc,
                                         bool train) {
  auto fuse = [&](Tensor<T> t, const Tensor<T>& skip, const char* stage) {
    check(t.shape() == skip.shape(),
          strf("decoder %s skip mismatch: block output %s vs encoder map %s",
               stage, t.shape().str().c_str(), skip.shape().str().c_str()));
    return ops::add(t, skip);
  };
  DecoderMaps<T> m;
  m.d5 = fuse(dec5_.forward(center, train), enc.e4, "D5");
  m.d4 = fuse(dec4_.forward(m.d5, train), enc.e3, "D4");
  m.d3 = fuse(dec3_.forward(m.d4, train), enc.e2, "D3");
  m.d2 = dec2_.forward(m.d3, train);
  return m;
}

template <typename T>
Tensor<T> Model<T>::refine(const DecoderMaps<T>& dec, i64 out_h, i64 out_w,
                           bool train) {
  if (smooth_)
    return smooth_->forward(dec.d5, dec.d4, dec.d3, dec.d2, out_h, out_w,
                            train);
  return refiner_->forward(dec.d2, out_h, out_w, train);
}

template <typename T>
ModelOutputs<T> Model<T>::forward(const Tensor<T>& x, bool train) {
  const i64 oh = x.shape().h, ow = x.shape().w;
  EncoderMaps<T> enc = encoder_forward(x, train);
  Tensor<T> c = center_forward(enc.e5, train);
  DecoderMaps<T> dec = decoder_forward(c, enc, train);
  ModelOutputs<T> out;
  out.main_logits = refine(dec, oh, ow, train);
  if (cfg_.use_multiscale_loss) {
    const Tensor<T>* ds[4] = {&dec.d5, &dec.d4, &dec.d3, &dec.d2};
    for (int i = 0; i < 4; ++i)
      out.aux_logits.push_back(
          aux_heads_[(size_t)i].forward(*ds[i], oh, ow, train));
  }
  return out;
}

template <typename T>
std::vector<i64> Model<T>::aspp_channel_trace() const {
  check<ConfigError>((bool)aspp_, "model has no multi-dilation context module");
  return aspp_->channel_trace();
}

// ---- total_loss ----

template <typename T>
Tensor<T> total_loss(const ModelOutputs<T>& out, const LabelMap& labels,
                     std::int32_t ignore_value, T aux_weight,
                     bool* all_ignored) {
  bool flag_main = false;
  Tensor<T> loss =
      ops::cross_entropy_2d(out.main_logits, labels, ignore_value, &flag_main);
  bool any_counted = !flag_main;
  if (!out.aux_logits.empty()) {
    Tensor<T> aux_sum;
    bool first = true;
    for (const auto& a : out.aux_logits) {
      bool f = false;
      Tensor<T> l = ops::cross_entropy_2d(a, labels, ignore_value, &f);
      any_counted = any_counted || !f;
      aux_sum = first ? l : ops::add(aux_sum, l);
      first = false;
    }
    loss = ops::add(loss, ops::scale(aux_sum, aux_weight));
  }
  if (all_ignored) *all_ignored = !any_counted;
  return loss;
}

#define PG_MODEL_INSTANTIATE(T)                                            \
  template struct Conv2d<T>;                                               \
  template struct ConvTranspose2d<T>;                                      \
  template struct BatchNorm2d<T>;                                          \
  template struct ConvBnRelu<T>;                                           \
  template struct DeconvBnRelu<T>;                                         \
  template struct Bottleneck<T>;                                           \
  template struct Aspp<T>;                                                 \
  template struct DBlock<T>;                                               \
  template struct DecoderBlock<T>;                                         \
  template struct Head<T>;                                                 \
  template struct Smooth<T>;                                               \
  template class Model<T>;                                                 \
  template Tensor<T> total_loss<T>(const ModelOutputs<T>&, const LabelMap&, \
                                   std::int32_t, T, bool*);

PG_MODEL_INSTANTIATE(float)
PG_MODEL_INSTANTIATE(double)

}  // namespace pg
