#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "parsegrid/tensor.hpp"

namespace pg::data {

// One image/label pair. Image values live in [0,1] until normalize().
struct SegSample {
  Tensor<float> image;  // (1,3,H,W)
  LabelMap labels;      // (1,H,W)
  std::int32_t ignore_value = 255;
};

struct ClassTable {
  std::vector<std::string> names;
  std::vector<std::pair<i64, i64>> flip_pairs;
  std::vector<std::array<u8, 3>> palette;

  i64 num_classes() const { return (i64)names.size(); }
  void validate() const;

  // The 20 human-parsing classes with left/right pairs swapped on flip.
  static ClassTable lip();
  // First k entries of the synthetic part catalog (k in [2,20]).
  static ClassTable synthetic(i64 k);
};

// ---- netpbm I/O (binary P5 grayscale, P6 RGB, maxval 255) ----

struct Pnm {
  bool is_rgb = false;  // P6 when true, P5 when false
  i64 h = 0, w = 0;
  std::vector<u8> bytes;  // row-major, interleaved RGB for P6
};

Pnm read_pnm(const std::string& path);
Tensor<float> pnm_to_image(const Pnm& p);  // P6 -> (1,3,H,W), /255
LabelMap pnm_to_labels(const Pnm& p);      // P5 -> (1,H,W)
Tensor<float> read_image(const std::string& path);
LabelMap read_labels(const std::string& path);
void write_pnm(const std::string& path, const Tensor<float>& image);
void write_pnm(const std::string& path, const LabelMap& labels);

// ---- synthetic humanoid samples ----

// Pure function of (seed, k, h, w): a jointed figure with one geometric
// region per non-background class, random position/scale/rotation,
// class-anchored colors with per-sample jitter and per-pixel noise.
SegSample synth_sample(u64 seed, i64 k, i64 h, i64 w);

// Generates count samples in memory with per-sample seeds mixed from the
// base seed, so sample i is independent of how many others exist.
std::vector<SegSample> synth_dataset(u64 seed, i64 count, i64 k, i64 h, i64 w);

// Writes images/, labels/ and splits/{train,val}.txt under root.
void write_synth_dataset(const std::string& root, u64 seed, i64 count, i64 k,
                         i64 h, i64 w, double val_fraction);

// ---- augmentation ----

struct AugmentConfig {
  double scale_lo = 0.5, scale_hi = 1.5;
  double max_rotation_deg = 30.0;
  double flip_prob = 0.5;
  i64 crop_h = 256, crop_w = 192;
};

// The random decisions, separated from their application so tests can
// pin exact transforms.
struct AugmentDraw {
  double scale = 1.0;
  double rotation_deg = 0.0;
  bool flip = false;
  double crop_cy = 0.5, crop_cx = 0.5;  // relative window position
};

AugmentDraw draw_augment(Rng& rng, const AugmentConfig& cfg);
SegSample apply_augment(const SegSample& s, const AugmentDraw& d,
                        const AugmentConfig& cfg, const ClassTable& classes);
SegSample augment(const SegSample& s, Rng& rng, const AugmentConfig& cfg,
                  const ClassTable& classes);

// Horizontal mirror; label maps also swap left/right class pairs.
Tensor<float> flip_image(const Tensor<float>& img);
LabelMap flip_labels(const LabelMap& lm,
                     const std::vector<std::pair<i64, i64>>& pairs);

// ---- normalization ----

struct NormStats {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> stdev{0.229f, 0.224f, 0.225f};
};

Tensor<float> normalize(const Tensor<float>& img, const NormStats& ns = {});
Tensor<float> denormalize(const Tensor<float>& img, const NormStats& ns = {});

// ---- LIP-style directory loading ----

struct DatasetEntry {
  std::string stem;
  std::string image_path;
  std::string label_path;
};

struct DatasetIndex {
  std::vector<DatasetEntry> train;
  std::vector<DatasetEntry> val;
};

// Expects root/images/*.ppm, root/labels/*.pgm with matching stems and
// root/splits/{train,val}.txt listing stems. Any orphan stem present in
// one directory but not the other is an error naming every orphan.
DatasetIndex load_lip_dir(const std::string& root);
SegSample load_sample(const DatasetEntry& e);

}  // namespace pg::data
