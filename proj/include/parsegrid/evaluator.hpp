#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "parsegrid/data.hpp"
#include "parsegrid/model.hpp"
#include "parsegrid/trainer.hpp"

namespace pg::eval {

// K-way pixel counts; rows index ground truth, columns index prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(i64 k) : k_(k), counts_(size_t(k * k), 0) {
    check<ConfigError>(k >= 1, "confusion matrix needs at least 1 class");
  }
  i64 num_classes() const { return k_; }
  u64& at(i64 truth, i64 pred) { return counts_[size_t(truth * k_ + pred)]; }
  u64 at(i64 truth, i64 pred) const { return counts_[size_t(truth * k_ + pred)]; }
  u64 total() const;
  u64 row_sum(i64 t) const;
  u64 col_sum(i64 p) const;
  void merge(const ConfusionMatrix& other);

 private:
  i64 k_ = 0;
  std::vector<u64> counts_;
};

// Adds one pixel per non-ignored position; out-of-range labels in either
// map are an error naming the pixel.
void confusion_update(ConfusionMatrix& cm, const LabelMap& pred,
                      const LabelMap& truth, std::int32_t ignore_value);

struct Metrics {
  double pixel_acc = 0.0;
  double mean_acc = 0.0;
  double miou = 0.0;
  std::vector<double> per_class_iou;  // NaN for classes absent from truth and prediction
  std::vector<bool> present;
};

// pixel_acc = trace/total; mean_acc averages diag/row over nonzero rows;
// IoU_k = diag/(row+col-diag) averaged over classes present in truth or
// prediction. Empty matrix is an error.
Metrics metrics(const ConfusionMatrix& cm);

// Per-pixel argmax over class logits; ties resolve to the lowest index.
LabelMap argmax_predict(const Tensor<float>& logits);

// (1,3,H,W) float image of batch item n colored by the class palette.
Tensor<float> palette_render(const LabelMap& pred, const data::ClassTable& classes,
                             i64 n = 0);

// A predictor maps a normalized (N,3,H,W) input to (N,K,H,W) logits.
using ForwardFn = std::function<Tensor<float>(const Tensor<float>&)>;

// 0.5 * (logits(x) + unflip_and_swap(logits(flip(x)))): mirror the width
// back and exchange the left/right channel pairs.
Tensor<float> flip_tta(const ForwardFn& fn, const Tensor<float>& image,
                       const std::vector<std::pair<i64, i64>>& flip_pairs);
Tensor<float> flip_tta(Model<float>& model, const Tensor<float>& image,
                       const std::vector<std::pair<i64, i64>>& flip_pairs);

struct EvalOptions {
  bool tta = false;
  std::string render_dir;          // empty = no prediction images
  std::vector<std::string> stems;  // render names; default sample_%05d
};

struct EvalResult {
  Metrics metrics;
  ConfusionMatrix cm;
};

// Normalizes each image, predicts, accumulates the confusion matrix and
// optionally writes <stem>_pred.ppm renders colored by the class palette.
EvalResult evaluate(const ForwardFn& fn, const std::vector<data::SegSample>& dataset,
                    const data::ClassTable& classes, const EvalOptions& opt = {});
EvalResult evaluate(Model<float>& model, const std::vector<data::SegSample>& dataset,
                    const data::ClassTable& classes, const EvalOptions& opt = {});

// "87.04 & 62.84 & 53.05"-style two-line summary (percent, 2 decimals).
std::string format_metrics_summary(const Metrics& m);

// ---- ablation runner ----

struct AblationRow {
  std::string name;  // B, B + A, B + S, B + A + S, B + S + A + L
  ModelConfig cfg;
  i64 param_count = 0;
  bool ok = false;
  std::string error;  // set when !ok
  Metrics metrics;    // valid when ok
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::vector<std::string> class_names;
};

// Trains and evaluates the five module-switch combinations from identical
// seeds. Per-variant failures are caught and recorded so partial results
// survive. Evaluation uses val_set when non-empty, else train_set. When
// out_dir is set, each variant trains under out_dir/<slug> and the report
// is written as ablation.txt + ablation.jsonl.
AblationReport run_ablation(const ModelConfig& base_cfg, const TrainConfig& tcfg,
                            const std::vector<data::SegSample>& train_set,
                            const std::vector<data::SegSample>& val_set,
                            const data::ClassTable& classes, bool tta = false,
                            const std::string& out_dir = "");

// Aligned text table: variant rows, per-class IoU columns in class order,
// then mIoU and parameter count.
std::string format_ablation_table(const AblationReport& r);
void write_ablation_jsonl(const AblationReport& r, const std::string& path);

}  // namespace pg::eval
