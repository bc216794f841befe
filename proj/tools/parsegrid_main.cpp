// parsegrid: train / eval / infer / ablate / gradcheck / synth, driven by a
// flat key=value config file plus repeatable --key=value overrides.
// Exit codes: 0 success, 1 config error, 2 runtime error.

#include <omp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "parsegrid/evaluator.hpp"
#include "parsegrid/gradcheck.hpp"
#include "parsegrid/runconfig.hpp"

namespace fs = std::filesystem;
using namespace pg;

namespace {

struct CommonArgs {
  std::string config_path;
  i64 workers = 0;  // 0 = not given on the command line
  bool tta = false;
  bool tta_given = false;
};

void add_common(CLI::App* sc, CommonArgs& a, bool with_tta) {
  sc->add_option("--config", a.config_path, "config file (key=value lines)");
  sc->add_option("--workers", a.workers, "data-pipeline parallelism (>=1)");
  if (with_tta)
    sc->add_flag_callback(
        "--tta", [&a] { a.tta = true; a.tta_given = true; },
        "average logits with the mirrored input");
  sc->allow_extras();
}

// File, then --key=value extras in order, then dedicated flags, then the
// PARSEGRID_SEED environment override of train.seed.
RunConfig build_config(const CLI::App* sc, const CommonArgs& a) {
  RunConfig cfg;
  if (!a.config_path.empty()) cfg = load_run_config(a.config_path);
  for (const std::string& tok : sc->remaining()) {
    check<ConfigError>(tok.rfind("--", 0) == 0 && tok.find('=') != std::string::npos,
                       "override '" + tok + "' is not of the form --key=value");
    const size_t eq = tok.find('=');
    apply_override(cfg, tok.substr(2, eq - 2), tok.substr(eq + 1));
  }
  if (a.workers > 0) cfg.workers = a.workers;
  if (a.tta_given) cfg.tta = a.tta;
  if (const char* env = std::getenv("PARSEGRID_SEED")) {
    char* end = nullptr;
    errno = 0;
    unsigned long long s = std::strtoull(env, &end, 10);
    check<ConfigError>(errno == 0 && end != env && *end == '\0',
                       std::string("PARSEGRID_SEED='") + env +
                           "' is not an unsigned integer");
    cfg.train.seed = u64(s);
  }
  cfg.validate();
  return cfg;
}

void echo_effective(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  std::ofstream f(cfg.out_dir + "/effective.cfg");
  check<IoError>(f.good(), cfg.out_dir + "/effective.cfg: cannot write");
  f << to_text(cfg);
}

struct LoadedData {
  std::vector<data::SegSample> train, val;
  std::vector<std::string> val_stems;  // for renders; empty = default names
};

LoadedData load_datasets(const RunConfig& cfg) {
  LoadedData d;
  if (cfg.data_source == "synth") {
    auto all = data::synth_dataset(cfg.data_seed, cfg.data_count + cfg.data_val_count,
                                   cfg.model.num_classes, cfg.data_height,
                                   cfg.data_width);
    d.train.assign(all.begin(), all.begin() + cfg.data_count);
    d.val.assign(all.begin() + cfg.data_count, all.end());
  } else {
    data::DatasetIndex idx = data::load_lip_dir(cfg.data_root);
    for (const auto& e : idx.train) d.train.push_back(data::load_sample(e));
    for (const auto& e : idx.val) {
      d.val.push_back(data::load_sample(e));
      d.val_stems.push_back(e.stem);
    }
  }
  return d;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path);
  check<IoError>(f.good(), path + ": cannot write");
  f << text;
}

int cmd_train(const CLI::App* sc, const CommonArgs& a) {
  RunConfig cfg = build_config(sc, a);
  omp_set_num_threads(int(cfg.workers));
  echo_effective(cfg);
  LoadedData d = load_datasets(cfg);
  const data::ClassTable classes = cfg.class_table();

  Model<float> model(cfg.model, cfg.train.seed);
  if (!cfg.checkpoint.empty())
    model = load_checkpoint(cfg.checkpoint, cfg.model);  // warm start, weights only

  TrainConfig tcfg = cfg.train;
  tcfg.out_dir = cfg.out_dir;
  tcfg.log_stderr = true;
  TrainResult res = train(model, tcfg, d.train, d.val, classes);

  const auto& eval_set = d.val.empty() ? d.train : d.val;
  eval::EvalOptions opt;
  opt.tta = cfg.tta;
  eval::EvalResult er = eval::evaluate(model, eval_set, classes, opt);
  const std::string summary = eval::format_metrics_summary(er.metrics);
  write_text(cfg.out_dir + "/metrics.txt", summary);
  std::printf("trained %lld iters; final checkpoint %s\n",
              (long long)res.total_iters, res.final_checkpoint.c_str());
  std::printf("%s", summary.c_str());
  return 0;
}

int cmd_eval(const CLI::App* sc, const CommonArgs& a) {
  RunConfig cfg = build_config(sc, a);
  check<ConfigError>(!cfg.checkpoint.empty(), "run.checkpoint is required for eval");
  omp_set_num_threads(int(cfg.workers));
  echo_effective(cfg);
  LoadedData d = load_datasets(cfg);
  const data::ClassTable classes = cfg.class_table();
  const auto& eval_set = d.val.empty() ? d.train : d.val;

  Model<float> model = load_checkpoint(cfg.checkpoint, cfg.model);
  eval::EvalOptions opt;
  opt.tta = cfg.tta;
  if (cfg.render) {
    opt.render_dir = cfg.out_dir + "/renders";
    if (!d.val.empty()) opt.stems = d.val_stems;
  }
  eval::EvalResult er = eval::evaluate(model, eval_set, classes, opt);
  const std::string summary = eval::format_metrics_summary(er.metrics);
  write_text(cfg.out_dir + "/metrics.txt", summary);
  std::printf("%s", summary.c_str());
  return 0;
}

int cmd_infer(const CLI::App* sc, const CommonArgs& a,
              const std::vector<std::string>& images) {
  RunConfig cfg = build_config(sc, a);
  check<ConfigError>(!cfg.checkpoint.empty(), "run.checkpoint is required for infer");
  check<ConfigError>(!images.empty(), "infer needs at least one input image");
  omp_set_num_threads(int(cfg.workers));
  echo_effective(cfg);
  const data::ClassTable classes = cfg.class_table();

  Model<float> model = load_checkpoint(cfg.checkpoint, cfg.model);
  for (const std::string& path : images) {
    Tensor<float> img = data::read_image(path);
    const Shape s = img.shape();
    check<ConfigError>(s.h % 16 == 0 && s.w % 16 == 0,
                       strf("%s: image is %lldx%lld; both sides must be "
                            "multiples of 16",
                            path.c_str(), (long long)s.h, (long long)s.w));
    Tensor<float> x = data::normalize(img);
    Tensor<float> logits = cfg.tta
                               ? eval::flip_tta(model, x, classes.flip_pairs)
                               : model.forward(x, false).main_logits;
    LabelMap pred = eval::argmax_predict(logits);
    const std::string stem = fs::path(path).stem().string();
    data::write_pnm(cfg.out_dir + "/" + stem + "_labels.pgm", pred);
    data::write_pnm(cfg.out_dir + "/" + stem + "_pred.ppm",
                    eval::palette_render(pred, classes));
    std::printf("%s -> %s/%s_{labels.pgm,pred.ppm}\n", path.c_str(),
                cfg.out_dir.c_str(), stem.c_str());
  }
  return 0;
}

int cmd_ablate(const CLI::App* sc, const CommonArgs& a) {
  RunConfig cfg = build_config(sc, a);
  omp_set_num_threads(int(cfg.workers));
  echo_effective(cfg);
  LoadedData d = load_datasets(cfg);
  const data::ClassTable classes = cfg.class_table();

  eval::AblationReport rep = eval::run_ablation(cfg.model, cfg.train, d.train, d.val,
                                                classes, cfg.tta, cfg.out_dir);
  std::printf("%s", eval::format_ablation_table(rep).c_str());
  for (const auto& row : rep.rows)
    if (!row.ok) return 2;
  return 0;
}

int cmd_gradcheck(i64 scale, u64 seed) {
  check<ConfigError>(scale >= 32 && scale % 16 == 0,
                     strf("--scale must be a multiple of 16, at least 32, got %lld",
                          (long long)scale));
  std::vector<GradCheckEntry> entries = gradcheck_ops(seed);
  std::vector<GradCheckEntry> mdl = gradcheck_model(8, scale, seed);
  entries.insert(entries.end(), mdl.begin(), mdl.end());
  bool all_ok = true;
  std::printf("%-40s %12s %10s  %s\n", "op", "max rel err", "tol", "status");
  for (const auto& e : entries) {
    std::printf("%-40s %12.3e %10.0e  %s\n", e.name.c_str(), e.err, e.tol,
                e.ok() ? "PASS" : "FAIL");
    all_ok = all_ok && e.ok();
  }
  return all_ok ? 0 : 2;
}

int cmd_synth(const std::string& out, i64 count, i64 k, i64 h, i64 w, u64 seed,
              double val_fraction) {
  check<ConfigError>(!out.empty(), "--out is required");
  data::write_synth_dataset(out, seed, count, k, h, w, val_fraction);
  std::printf("wrote %lld samples (%lldx%lld, %lld classes) under %s\n",
              (long long)count, (long long)h, (long long)w, (long long)k,
              out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"human-parsing segmentation toolkit"};
  app.require_subcommand(1);

  CommonArgs train_a, eval_a, infer_a, ablate_a;
  std::vector<std::string> infer_images;

  CLI::App* sc_train = app.add_subcommand("train", "train a model from a config");
  add_common(sc_train, train_a, true);

  CLI::App* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(sc_eval, eval_a, true);

  CLI::App* sc_infer = app.add_subcommand("infer", "segment images with a checkpoint");
  add_common(sc_infer, infer_a, true);
  sc_infer->add_option("images", infer_images, "input P6 images");

  CLI::App* sc_ablate = app.add_subcommand("ablate", "run the module ablation grid");
  add_common(sc_ablate, ablate_a, true);

  i64 gc_scale = 32;
  u64 gc_seed = 1;
  CLI::App* sc_gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient suite");
  sc_gradcheck->add_option("--scale", gc_scale, "model input size (multiple of 16)");
  sc_gradcheck->add_option("--seed", gc_seed, "rng seed");

  std::string synth_out;
  i64 synth_count = 200, synth_k = 5, synth_h = 64, synth_w = 64;
  u64 synth_seed = 1234;
  double synth_val = 0.0;
  CLI::App* sc_synth = app.add_subcommand("synth", "materialize a synthetic dataset");
  sc_synth->add_option("--out", synth_out, "output directory")->required();
  sc_synth->add_option("--count", synth_count, "number of samples");
  sc_synth->add_option("--k", synth_k, "number of classes (2..20)");
  sc_synth->add_option("--height", synth_h, "sample height");
  sc_synth->add_option("--width", synth_w, "sample width");
  sc_synth->add_option("--seed", synth_seed, "rng seed");
  sc_synth->add_option("--val-fraction", synth_val, "fraction routed to val split");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (sc_train->parsed()) return cmd_train(sc_train, train_a);
    if (sc_eval->parsed()) return cmd_eval(sc_eval, eval_a);
    if (sc_infer->parsed()) return cmd_infer(sc_infer, infer_a, infer_images);
    if (sc_ablate->parsed()) return cmd_ablate(sc_ablate, ablate_a);
    if (sc_gradcheck->parsed()) return cmd_gradcheck(gc_scale, gc_seed);
    if (sc_synth->parsed())
      return cmd_synth(synth_out, synth_count, synth_k, synth_h, synth_w,
                       synth_seed, synth_val);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
