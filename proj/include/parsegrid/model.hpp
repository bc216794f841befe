#pragma once

#include <array>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "parsegrid/ops.hpp"
#include "parsegrid/tensor.hpp"

namespace pg {

// Structural configuration of the network. Every instance is a pure
// function of these fields plus the init seed.
struct ModelConfig {
  i64 num_classes = 20;
  i64 base_width = 2048;  // channels of E5
  std::array<i64, 4> encoder_blocks{3, 4, 23, 3};
  std::vector<i64> aspp_dilations{12, 24, 36};
  bool aspp_pool_branch = false;
  bool use_aspp = true;           // ablation A
  bool use_smooth = true;         // ablation S
  bool use_multiscale_loss = true;  // ablation L
  float aux_loss_weight = 0.5f;
  i64 input_h = 256;
  i64 input_w = 192;

  // Throws ConfigError listing every violated constraint.
  void validate() const;
  // Deterministic serialization; basis of the checkpoint fingerprint.
  std::string canonical() const;
  u32 fingerprint() const;
};

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> tensor;
  bool decay;  // participates in weight decay
};

// Ordered parameter/state registry. Iteration order is registration
// order, which is fixed by construction order, so checkpoints and the
// init RNG stream are reproducible.
template <typename T>
class Registry {
 public:
  Tensor<T>& add_param(const std::string& name, Tensor<T> t, bool decay) {
    check_unique(name);
    t.set_requires_grad(true);
    params_.push_back({name, std::move(t), decay});
    return params_.back().tensor;
  }
  Tensor<T>& add_state(const std::string& name, Tensor<T> t) {
    check_unique(name);
    states_.emplace_back(name, std::move(t));
    return states_.back().second;
  }
  std::vector<ParamEntry<T>>& params() { return params_; }
  const std::vector<ParamEntry<T>>& params() const { return params_; }
  std::vector<std::pair<std::string, Tensor<T>>>& states() { return states_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& states() const {
    return states_;
  }
  i64 param_count() const {
    i64 n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }
  void zero_grads() {
    for (auto& p : params_) {
      p.tensor.grad();
      p.tensor.zero_grad();
    }
  }

 private:
  void check_unique(const std::string& name) {
    check<ConfigError>(seen_.emplace(name).second,
                       "registry: duplicate name " + name);
  }
  std::vector<ParamEntry<T>> params_;
  std::vector<std::pair<std::string, Tensor<T>>> states_;
  std::unordered_set<std::string> seen_;
};

// ---- layers ----

template <typename T>
struct Conv2d {
  Tensor<T> w;
  std::optional<Tensor<T>> b;
  i64 stride = 1, padding = 0, dilation = 1;
  void init(Registry<T>& reg, Rng& rng, const std::string& name, i64 cin,
            i64 cout, i64 k, i64 stride, i64 padding, i64 dilation, bool bias);
  Tensor<T> forward(const Tensor<T>& x) const;
};

template <typename T>
struct ConvTranspose2d {
  Tensor<T> w;  // (cin, cout, k, k)
  i64 stride = 2, padding = 1, output_padding = 1;
  void init(Registry<T>& reg, Rng& rng, const std::string& name, i64 cin,
            i64 cout, i64 k, i64 stride, i64 padding, i64 output_padding);
  Tensor<T> forward(const Tensor<T>& x) const;
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma, beta;
  ops::BnState<T> state;
  void init(Registry<T>& reg, const std::string& name, i64 c);
  Tensor<T> forward(const Tensor<T>& x, bool train);
};

// conv -> BN -> ReLU; the conv carries no bias (BN absorbs it).
template <typename T>
struct ConvBnRelu {
  Conv2d<T> conv;
  BatchNorm2d<T> norm;
  void init(Registry<T>& reg, Rng& rng, const std::string& name, i64 cin,
            i64 cout, i64 k, i64 stride, i64 padding, i64 dilation);
  Tensor<T> forward(const Tensor<T>& x, bool train);
};

template <typename T>
struct DeconvBnRelu {
  ConvTranspose2d<T> conv;
  BatchNorm2d<T> norm;
  void init(Registry<T>& reg, Rng& rng, const std::string& name, i64 cin,
            i64 cout);
  Tensor<T> forward(const Tensor<T>& x, bool train);
};

template <typename T>
struct Bottleneck {
  ConvBnRelu<T> conv1, conv2;
  Conv2d<T> conv3;
  BatchNorm2d<T> norm3;
  bool has_skip = false;
  Conv2d<T> skip;
  BatchNorm2d<T> skip_norm;
  void init(Registry<T>& reg, Rng& rng, const std::string& name, i64 cin,
            i64 cout, i64 stride, i64 dilation);
  Tensor<T> forward(const Tensor<T>& x, bool train);
};

// Multi-dilation context module over the E5 output. Four parallel
// branches by default (one 1x1 plus one 3x3 per configured dilation); an
// optional pooled branch joins when enabled.
template <typename T>
struct Aspp {
  i64 cb = 0;
  std::vector<i64> dilations;
  bool pool_branch = false;
  ConvBnRelu<T> reduce;               // 1x1 cb -> cb/2
  ConvBnRelu<T> branch0;              // 1x1 cb/2 -> cb/8
  std::vector<ConvBnRelu<T>> atrous;  // 3x3 dilated cb/2 -> cb/8
  ConvBnRelu<T> pool_conv;            // 1x1 cb/2 -> cb/8 on pooled features
  ConvBnRelu<T> fuse;                 // 1x1 concat -> cb
  void init(Registry<T>& reg, Rng& rng, const std::string& name, i64 cb,
            const std::vector<i64>& dilations, bool pool_branch);
  Tensor<T> forward(const Tensor<T>& x, bool train);
  // {cb, cb/2, per-branch, concat, cb} from stored dims only.
  std::vector<i64> channel_trace() const;
};

// Baseline central block: quarter-width serial dilated convolutions
// (rates 1, 2, 4) whose outputs are summed, wrapped in a residual.
template <typename T>
struct DBlock {
  i64 cb = 0;
  ConvBnRelu<T> reduce;                   // 1x1 cb -> max(1, cb/4)
  std::array<ConvBnRelu<T>, 3> dilated;   // 3x3 at dilations 1, 2, 4
  Conv2d<T> expand;                       // 1x1 back to cb
  BatchNorm2d<T> expand_norm;
  void init(Registry<T>& reg, Rng& rng, const std::string& name, i64 cb);
  Tensor<T> forward(const Tensor<T>& x, bool train);
};

// LinkNet-style unit: 1x1 reduce to quarter width, 3x3 (transposed when
// upsampling), 1x1 project to the target width.
template <typename T>
struct DecoderBlock {
  i64 cin = 0, cout = 0;
  bool upsample = false;
  ConvBnRelu<T> reduce;
  ConvBnRelu<T> mid_conv;   // when !upsample
  DeconvBnRelu<T> mid_up;   // when upsample
  ConvBnRelu<T> project;
  static i64 mid_channels(i64 cin);
  void init(Registry<T>& reg, Rng& rng, const std::string& name, i64 cin,
            i64 cout, bool upsample);
  Tensor<T> forward(const Tensor<T>& x, bool train);
};

// Prediction head: two 3x3 convs, 1x1 projection to class logits,
// bilinear resize to the target size.
template <typename T>
struct Head {
  ConvBnRelu<T> conv1, conv2;
  Conv2d<T> project;  // carries a bias
  void init(Registry<T>& reg, Rng& rng, const std::string& name, i64 c, i64 k);
  Tensor<T> logits(const Tensor<T>& d, bool train);  // before resize
  Tensor<T> forward(const Tensor<T>& d, i64 out_h, i64 out_w, bool train);
};

// Projects every decoder output to D2's size and width, concatenates,
// blends with two 3x3 convs and projects to class logits.
template <typename T>
struct Smooth {
  std::vector<DecoderBlock<T>> chain5, chain4;  // D3/D2 already match
  ConvBnRelu<T> blend1, blend2;
  Conv2d<T> project;
  void init(Registry<T>& reg, Rng& rng, const std::string& name, i64 base_width,
            i64 k);
  Tensor<T> forward(const Tensor<T>& d5, const Tensor<T>& d4,
                    const Tensor<T>& d3, const Tensor<T>& d2, i64 out_h,
                    i64 out_w, bool train);
};

// ---- the network ----

template <typename T>
struct EncoderMaps {
  Tensor<T> e1, e2, e3, e4, e5;
};

template <typename T>
struct DecoderMaps {
  Tensor<T> d5, d4, d3, d2;
};

template <typename T>
struct ModelOutputs {
  Tensor<T> main_logits;
  std::vector<Tensor<T>> aux_logits;  // D5, D4, D3, D2 order; empty without
                                      // the multi-scale loss
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, u64 seed);

  EncoderMaps<T> encoder_forward(const Tensor<T>& x, bool train);
  Tensor<T> center_forward(const Tensor<T>& e5, bool train);
  DecoderMaps<T> decoder_forward(const Tensor<T>& center,
                                 const EncoderMaps<T>& enc, bool train);
  Tensor<T> refine(const DecoderMaps<T>& dec, i64 out_h, i64 out_w, bool train);
  ModelOutputs<T> forward(const Tensor<T>& x, bool train);

  std::vector<i64> aspp_channel_trace() const;
  Registry<T>& registry() { return reg_; }
  const Registry<T>& registry() const { return reg_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  Registry<T> reg_;
  ConvBnRelu<T> stem_;
  std::array<std::vector<Bottleneck<T>>, 4> stages_;
  std::optional<Aspp<T>> aspp_;
  std::optional<DBlock<T>> dblock_;
  DecoderBlock<T> dec5_, dec4_, dec3_, dec2_;
  std::optional<Smooth<T>> smooth_;
  std::optional<Head<T>> refiner_;
  std::vector<Head<T>> aux_heads_;
};

// Composite training loss: cross-entropy on the main logits plus
// aux_weight times the sum of the auxiliary cross-entropies.
template <typename T>
Tensor<T> total_loss(const ModelOutputs<T>& out, const LabelMap& labels,
                     std::int32_t ignore_value, T aux_weight,
                     bool* all_ignored = nullptr);

}  // namespace pg
