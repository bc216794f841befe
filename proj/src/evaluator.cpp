#include "parsegrid/evaluator.hpp"

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"

namespace pg::eval {

u64 ConfusionMatrix::total() const {
  u64 t = 0;
  for (u64 c : counts_) t += c;
  return t;
}

u64 ConfusionMatrix::row_sum(i64 t) const {
  u64 s = 0;
  for (i64 p = 0; p < k_; ++p) s += at(t, p);
  return s;
}

u64 ConfusionMatrix::col_sum(i64 p) const {
  u64 s = 0;
  for (i64 t = 0; t < k_; ++t) s += at(t, p);
  return s;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  check<ShapeError>(other.k_ == k_,
                    strf("cannot merge a %lld-class confusion matrix into a "
                         "%lld-class one",
                         (long long)other.k_, (long long)k_));
  for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

void confusion_update(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& truth,
                      std::int32_t ignore_value) {
  check<ShapeError>(pred.n == truth.n && pred.h == truth.h && pred.w == truth.w,
                    strf("confusion_update: prediction (%lld,%lld,%lld) and truth "
                         "(%lld,%lld,%lld) shapes differ",
                         (long long)pred.n, (long long)pred.h, (long long)pred.w,
                         (long long)truth.n, (long long)truth.h, (long long)truth.w));
  const i64 k = cm.num_classes();
  for (i64 n = 0; n < truth.n; ++n)
    for (i64 y = 0; y < truth.h; ++y)
      for (i64 x = 0; x < truth.w; ++x) {
        std::int32_t t = truth.at(n, y, x);
        if (t == ignore_value) continue;
        check<ConfigError>(t >= 0 && t < k,
                           strf("confusion_update: truth label %d out of range "
                                "[0,%lld) at (n=%lld, y=%lld, x=%lld)",
                                t, (long long)k, (long long)n, (long long)y,
                                (long long)x));
        std::int32_t p = pred.at(n, y, x);
        check<ConfigError>(p >= 0 && p < k,
                           strf("confusion_update: prediction label %d out of range "
                                "[0,%lld) at (n=%lld, y=%lld, x=%lld)",
                                p, (long long)k, (long long)n, (long long)y,
                                (long long)x));
        ++cm.at(t, p);
      }
}

Metrics metrics(const ConfusionMatrix& cm) {
  const i64 k = cm.num_classes();
  const u64 total = cm.total();
  check<ConfigError>(total > 0, "metrics: the confusion matrix is empty");

  std::vector<u64> rows(static_cast<size_t>(k)), cols(static_cast<size_t>(k));
  u64 trace = 0;
  for (i64 t = 0; t < k; ++t) rows[size_t(t)] = cm.row_sum(t);
  for (i64 p = 0; p < k; ++p) cols[size_t(p)] = cm.col_sum(p);
  for (i64 t = 0; t < k; ++t) trace += cm.at(t, t);

  Metrics m;
  m.pixel_acc = double(trace) / double(total);

  double acc_sum = 0.0;
  i64 acc_n = 0;
  for (i64 t = 0; t < k; ++t) {
    if (rows[size_t(t)] == 0) continue;
    acc_sum += double(cm.at(t, t)) / double(rows[size_t(t)]);
    ++acc_n;
  }
  m.mean_acc = acc_sum / double(acc_n);

  m.per_class_iou.assign(size_t(k), std::numeric_limits<double>::quiet_NaN());
  m.present.assign(size_t(k), false);
  double iou_sum = 0.0;
  i64 iou_n = 0;
  for (i64 t = 0; t < k; ++t) {
    u64 uni = rows[size_t(t)] + cols[size_t(t)] - cm.at(t, t);
    if (uni == 0) continue;  // absent from truth and prediction
    m.present[size_t(t)] = true;
    m.per_class_iou[size_t(t)] = double(cm.at(t, t)) / double(uni);
    iou_sum += m.per_class_iou[size_t(t)];
    ++iou_n;
  }
  m.miou = iou_sum / double(iou_n);
  return m;
}

LabelMap argmax_predict(const Tensor<float>& logits) {
  const Shape s = logits.shape();
  LabelMap out(s.n, s.h, s.w);
  for (i64 n = 0; n < s.n; ++n)
    for (i64 y = 0; y < s.h; ++y)
      for (i64 x = 0; x < s.w; ++x) {
        i64 best = 0;
        float bv = logits.at(n, 0, y, x);
        for (i64 c = 1; c < s.c; ++c) {
          float v = logits.at(n, c, y, x);
          if (v > bv) {
            bv = v;
            best = c;
          }
        }
        out.at(n, y, x) = std::int32_t(best);
      }
  return out;
}

namespace {

std::vector<i64> channel_swap_map(i64 k, const std::vector<std::pair<i64, i64>>& pairs) {
  std::vector<i64> map(static_cast<size_t>(k));
  std::iota(map.begin(), map.end(), 0);
  for (const auto& [a, b] : pairs) {
    check<ConfigError>(a >= 0 && a < k && b >= 0 && b < k,
                       strf("flip pair (%lld, %lld) out of range for %lld channels",
                            (long long)a, (long long)b, (long long)k));
    map[size_t(a)] = b;
    map[size_t(b)] = a;
  }
  return map;
}

// Mirrors the width back and exchanges the paired class channels.
Tensor<float> unflip_and_swap(const Tensor<float>& logits, const std::vector<i64>& map) {
  const Shape s = logits.shape();
  Tensor<float> out(s);
  for (i64 n = 0; n < s.n; ++n)
    for (i64 c = 0; c < s.c; ++c)
      for (i64 y = 0; y < s.h; ++y)
        for (i64 x = 0; x < s.w; ++x)
          out.at(n, c, y, x) = logits.at(n, map[size_t(c)], y, s.w - 1 - x);
  return out;
}

}  // namespace

Tensor<float> flip_tta(const ForwardFn& fn, const Tensor<float>& image,
                       const std::vector<std::pair<i64, i64>>& flip_pairs) {
  Tensor<float> a = fn(image);
  Tensor<float> b = fn(data::flip_image(image));
  check<ShapeError>(a.shape() == b.shape(),
                    "flip_tta: predictor output shape changed under flip, " +
                        a.shape().str() + " vs " + b.shape().str());
  Tensor<float> c = unflip_and_swap(b, channel_swap_map(a.shape().c, flip_pairs));
  Tensor<float> out(a.shape());
  const float* pa = a.data();
  const float* pc = c.data();
  float* po = out.data();
  for (i64 i = 0; i < out.numel(); ++i) po[i] = 0.5f * (pa[i] + pc[i]);
  return out;
}

Tensor<float> flip_tta(Model<float>& model, const Tensor<float>& image,
                       const std::vector<std::pair<i64, i64>>& flip_pairs) {
  ForwardFn fn = [&model](const Tensor<float>& x) {
    return model.forward(x, false).main_logits;
  };
  return flip_tta(fn, image, flip_pairs);
}

Tensor<float> palette_render(const LabelMap& pred, const data::ClassTable& classes,
                             i64 n) {
  Tensor<float> img(Shape{1, 3, pred.h, pred.w});
  for (i64 y = 0; y < pred.h; ++y)
    for (i64 x = 0; x < pred.w; ++x) {
      i64 k = pred.at(n, y, x);
      const auto& rgb = classes.palette[size_t(k)];
      for (i64 c = 0; c < 3; ++c) img.at(0, c, y, x) = float(rgb[size_t(c)]) / 255.0f;
    }
  return img;
}

EvalResult evaluate(const ForwardFn& fn, const std::vector<data::SegSample>& dataset,
                    const data::ClassTable& classes, const EvalOptions& opt) {
  classes.validate();
  check<ConfigError>(!dataset.empty(), "evaluate: the dataset is empty");
  const i64 k = classes.num_classes();
  ConfusionMatrix cm(k);
  if (!opt.render_dir.empty()) std::filesystem::create_directories(opt.render_dir);

  for (size_t i = 0; i < dataset.size(); ++i) {
    const data::SegSample& s = dataset[i];
    Tensor<float> x = data::normalize(s.image);
    Tensor<float> logits = opt.tta ? flip_tta(fn, x, classes.flip_pairs) : fn(x);
    check<ShapeError>(logits.shape().c == k,
                      strf("evaluate: predictor emitted %lld classes, the class "
                           "table has %lld",
                           (long long)logits.shape().c, (long long)k));
    check<ShapeError>(logits.shape().n == s.labels.n && logits.shape().h == s.labels.h &&
                          logits.shape().w == s.labels.w,
                      "evaluate: logits " + logits.shape().str() +
                          " do not cover the label map");
    LabelMap pred = argmax_predict(logits);
    confusion_update(cm, pred, s.labels, s.ignore_value);
    if (!opt.render_dir.empty()) {
      std::string stem =
          i < opt.stems.size() ? opt.stems[i] : strf("sample_%05zu", i);
      data::write_pnm(opt.render_dir + "/" + stem + "_pred.ppm",
                      palette_render(pred, classes, 0));
    }
  }
  return EvalResult{metrics(cm), cm};
}

EvalResult evaluate(Model<float>& model, const std::vector<data::SegSample>& dataset,
                    const data::ClassTable& classes, const EvalOptions& opt) {
  check<ConfigError>(model.config().num_classes == classes.num_classes(),
                     strf("evaluate: model emits %lld classes, the class table has "
                          "%lld",
                          (long long)model.config().num_classes,
                          (long long)classes.num_classes()));
  ForwardFn fn = [&model](const Tensor<float>& x) {
    return model.forward(x, false).main_logits;
  };
  return evaluate(fn, dataset, classes, opt);
}

std::string format_metrics_summary(const Metrics& m) {
  return strf("pixel acc. & mean acc. & mIoU\n%.2f & %.2f & %.2f\n",
              100.0 * m.pixel_acc, 100.0 * m.mean_acc, 100.0 * m.miou);
}

// ---- ablation runner ----

namespace {

struct VariantSpec {
  const char* name;
  bool aspp, smooth, multiscale;
};

constexpr VariantSpec kVariants[] = {
    {"B", false, false, false},          {"B + A", true, false, false},
    {"B + S", false, true, false},       {"B + A + S", true, true, false},
    {"B + S + A + L", true, true, true},
};

std::string slug(const std::string& name) {
  std::string s;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      s += char(std::tolower(static_cast<unsigned char>(c)));
    else if (!s.empty() && s.back() != '_')
      s += '_';
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s;
}

}  // namespace

AblationReport run_ablation(const ModelConfig& base_cfg, const TrainConfig& tcfg,
                            const std::vector<data::SegSample>& train_set,
                            const std::vector<data::SegSample>& val_set,
                            const data::ClassTable& classes, bool tta,
                            const std::string& out_dir) {
  AblationReport rep;
  rep.class_names = classes.names;
  for (const VariantSpec& v : kVariants) {
    AblationRow row;
    row.name = v.name;
    ModelConfig cfg = base_cfg;
    cfg.use_aspp = v.aspp;
    cfg.use_smooth = v.smooth;
    cfg.use_multiscale_loss = v.multiscale;
    row.cfg = cfg;
    try {
      Model<float> m(cfg, tcfg.seed);
      row.param_count = m.registry().param_count();
      TrainConfig t2 = tcfg;
      t2.out_dir = out_dir.empty() ? std::string() : out_dir + "/" + slug(v.name);
      train(m, t2, train_set, val_set, classes);
      const auto& eval_set = val_set.empty() ? train_set : val_set;
      EvalOptions eo;
      eo.tta = tta;
      row.metrics = evaluate(m, eval_set, classes, eo).metrics;
      row.ok = true;
    } catch (const std::exception& ex) {
      row.ok = false;
      row.error = ex.what();
    }
    rep.rows.push_back(std::move(row));
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream txt(out_dir + "/ablation.txt", std::ios::trunc);
    txt << format_ablation_table(rep);
    write_ablation_jsonl(rep, out_dir + "/ablation.jsonl");
  }
  return rep;
}

std::string format_ablation_table(const AblationReport& r) {
  std::vector<std::string> header{"variant"};
  for (const auto& n : r.class_names) header.push_back(n);
  header.push_back("mIoU");
  header.push_back("params");

  std::vector<std::vector<std::string>> body;
  std::vector<std::string> failed_lines;
  for (const auto& row : r.rows) {
    if (!row.ok) {
      failed_lines.push_back(row.name + "  FAILED: " + row.error);
      continue;
    }
    std::vector<std::string> cells{row.name};
    for (double iou : row.metrics.per_class_iou)
      cells.push_back(std::isnan(iou) ? std::string("n/a")
                                      : strf("%.2f", 100.0 * iou));
    cells.push_back(strf("%.2f", 100.0 * row.metrics.miou));
    cells.push_back(std::to_string((long long)row.param_count));
    body.push_back(std::move(cells));
  }

  std::vector<size_t> width(header.size());
  for (size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& cells : body) width[c] = std::max(width[c], cells[c].size());
  }
  auto emit = [&](const std::vector<std::string>& cells) {
    std::string line;
    for (size_t c = 0; c < cells.size(); ++c) {
      std::string cell = cells[c];
      bool left = c == 0;
      if (c) line += "  ";
      if (left)
        line += cell + std::string(width[c] - cell.size(), ' ');
      else
        line += std::string(width[c] - cell.size(), ' ') + cell;
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    return line + "\n";
  };

  std::string out = emit(header);
  for (const auto& cells : body) out += emit(cells);
  for (const auto& line : failed_lines) out += line + "\n";
  return out;
}

void write_ablation_jsonl(const AblationReport& r, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  check<IoError>(f.good(), path + ": cannot open for writing");
  nlohmann::json head;
  head["classes"] = r.class_names;
  f << head.dump() << "\n";
  for (const auto& row : r.rows) {
    nlohmann::json j;
    j["variant"] = row.name;
    j["ok"] = row.ok;
    j["param_count"] = row.param_count;
    if (row.ok) {
      j["miou"] = row.metrics.miou;
      j["pixel_acc"] = row.metrics.pixel_acc;
      j["mean_acc"] = row.metrics.mean_acc;
      nlohmann::json ious = nlohmann::json::array();
      for (double iou : row.metrics.per_class_iou) {
        if (std::isnan(iou))
          ious.push_back(nullptr);
        else
          ious.push_back(iou);
      }
      j["per_class_iou"] = std::move(ious);
    } else {
      j["error"] = row.error;
    }
    f << j.dump() << "\n";
  }
  check<IoError>(f.good(), path + ": write failed");
}

}  // namespace pg::eval
