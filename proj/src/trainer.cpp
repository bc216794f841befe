#include "parsegrid/trainer.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "parsegrid/evaluator.hpp"

namespace pg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian");

void TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (!(base_lr > 0.0) || !std::isfinite(base_lr))
    bad.push_back(strf("base_lr must be positive and finite, got %g", base_lr));
  if (!(lr_power > 0.0) || !std::isfinite(lr_power))
    bad.push_back(strf("lr_power must be positive and finite, got %g", lr_power));
  if (!(momentum >= 0.0 && momentum < 1.0))
    bad.push_back(strf("momentum must lie in [0,1), got %g", momentum));
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
    bad.push_back(strf("weight_decay must be non-negative, got %g", weight_decay));
  if (batch_size < 1)
    bad.push_back(strf("batch_size must be >= 1, got %lld", (long long)batch_size));
  if (epochs < 0)
    bad.push_back(strf("epochs must be >= 0, got %lld", (long long)epochs));
  if (checkpoint_every < 0)
    bad.push_back(strf("checkpoint_every must be >= 0, got %lld",
                       (long long)checkpoint_every));
  if (!(aug.scale_lo > 0.0) || !(aug.scale_hi >= aug.scale_lo))
    bad.push_back(strf("augment scale range [%g, %g] is invalid", aug.scale_lo,
                       aug.scale_hi));
  if (!(aug.flip_prob >= 0.0 && aug.flip_prob <= 1.0))
    bad.push_back(strf("flip_prob must lie in [0,1], got %g", aug.flip_prob));
  if (!(aug.max_rotation_deg >= 0.0))
    bad.push_back(strf("max_rotation_deg must be >= 0, got %g", aug.max_rotation_deg));
  if (aug.crop_h < 0 || aug.crop_w < 0)
    bad.push_back(strf("crop size %lldx%lld is invalid", (long long)aug.crop_h,
                       (long long)aug.crop_w));
  if (!bad.empty()) {
    std::string msg = "invalid train config:";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }
}

double poly_lr(i64 iter, i64 max_iter, double base_lr, double power) {
  check<ConfigError>(max_iter >= 1, strf("poly_lr: max_iter must be >= 1, got %lld",
                                         (long long)max_iter));
  check<ConfigError>(iter >= 0, strf("poly_lr: negative iteration %lld", (long long)iter));
  check<ConfigError>(base_lr > 0.0 && std::isfinite(base_lr),
                     strf("poly_lr: base_lr must be positive, got %g", base_lr));
  check<ConfigError>(power > 0.0 && std::isfinite(power),
                     strf("poly_lr: power must be positive, got %g", power));
  if (iter > max_iter) {
    std::fprintf(stderr,
                 "warning: poly_lr iteration %lld is past the schedule end %lld; "
                 "learning rate clamped to 0\n",
                 (long long)iter, (long long)max_iter);
    return 0.0;
  }
  if (iter == 0) return base_lr;
  if (iter == max_iter) return 0.0;
  return base_lr * std::pow(1.0 - double(iter) / double(max_iter), power);
}

std::vector<Tensor<float>> make_velocity(const Registry<float>& reg) {
  std::vector<Tensor<float>> v;
  v.reserve(reg.params().size());
  for (const auto& p : reg.params()) v.emplace_back(p.tensor.shape());
  return v;
}

void sgd_step(Registry<float>& reg, std::vector<Tensor<float>>& velocity, double lr,
              double momentum, double weight_decay) {
  auto& ps = reg.params();
  check<ConfigError>(velocity.size() == ps.size(),
                     strf("sgd_step: %zu velocity slots for %zu parameters",
                          velocity.size(), ps.size()));
  for (size_t i = 0; i < ps.size(); ++i) {
    Tensor<float>& p = ps[i].tensor;
    check<ConfigError>(p.has_grad(),
                       "sgd_step: parameter " + ps[i].name + " has no gradient");
    const float* g = p.grad_ptr();
    float* v = velocity[i].data();
    float* w = p.data();
    const double wd = ps[i].decay ? weight_decay : 0.0;
    const i64 m = p.numel();
    for (i64 j = 0; j < m; ++j) {
      double vj = momentum * double(v[j]) + double(g[j]) + wd * double(w[j]);
      v[j] = float(vj);
      w[j] = float(double(w[j]) - lr * vj);
    }
  }
}

// ---- checkpoint format ----

namespace {

constexpr char kMagic[4] = {'C', 'D', 'L', 'K'};
constexpr u32 kVersion = 1;

void put_u16(std::string& b, u32 v) {
  b.push_back(char(v & 0xff));
  b.push_back(char((v >> 8) & 0xff));
}
void put_u32(std::string& b, u32 v) {
  for (int i = 0; i < 4; ++i) b.push_back(char((v >> (8 * i)) & 0xff));
}

void append_record(std::string& out, const std::string& name,
                   const std::vector<u32>& dims, const float* vals, i64 n) {
  check<IoError>(name.size() < 0x10000, "checkpoint record name too long: " + name);
  std::string r;
  put_u16(r, u32(name.size()));
  r += name;
  r.push_back(char(dims.size()));
  for (u32 d : dims) put_u32(r, d);
  put_u32(r, u32(n * 4));
  r.append(reinterpret_cast<const char*>(vals), size_t(n) * 4);
  u32 crc = u32(crc32(0L, reinterpret_cast<const Bytef*>(r.data()), uInt(r.size())));
  put_u32(r, crc);
  out += r;
}

std::vector<u32> shape_dims(const Shape& s) {
  return {u32(s.n), u32(s.c), u32(s.h), u32(s.w)};
}

struct Reader {
  const std::string& s;
  const std::string& path;
  size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw IoError(path + ": " + what + strf(" at byte %zu", pos));
  }
  const char* take(size_t n, const char* what) {
    if (pos + n > s.size()) fail(strf("truncated checkpoint (%s)", what));
    const char* p = s.data() + pos;
    pos += n;
    return p;
  }
  u32 get_u16(const char* what) {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(2, what));
    return u32(p[0]) | (u32(p[1]) << 8);
  }
  u32 get_u32(const char* what) {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(take(4, what));
    return u32(p[0]) | (u32(p[1]) << 8) | (u32(p[2]) << 16) | (u32(p[3]) << 24);
  }
};

struct Record {
  std::vector<u32> dims;
  std::vector<float> vals;
};

void copy_into(Tensor<float>& t, const std::string& name, const Record& rec,
               const std::string& path) {
  auto want = shape_dims(t.shape());
  check<IoError>(rec.dims == want,
                 path + ": record '" + name + "' shape does not match the model");
  std::memcpy(t.data(), rec.vals.data(), size_t(t.numel()) * 4);
}

}  // namespace

void save_checkpoint(const std::string& path, const Model<float>& model,
                     const std::vector<Tensor<float>>* momentum, i64 iter) {
  const auto& reg = model.registry();
  if (momentum != nullptr)
    check<ConfigError>(momentum->size() == reg.params().size(),
                       "save_checkpoint: momentum buffer count does not match "
                       "the parameter count");
  u32 count = u32(reg.params().size() + reg.states().size() +
                  (momentum ? reg.params().size() : 0) + 1);
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, model.config().fingerprint());
  put_u32(buf, count);
  for (const auto& p : reg.params())
    append_record(buf, p.name, shape_dims(p.tensor.shape()), p.tensor.data(),
                  p.tensor.numel());
  for (const auto& [name, t] : reg.states())
    append_record(buf, name, shape_dims(t.shape()), t.data(), t.numel());
  if (momentum != nullptr)
    for (size_t i = 0; i < momentum->size(); ++i)
      append_record(buf, "momentum." + reg.params()[i].name,
                    shape_dims((*momentum)[i].shape()), (*momentum)[i].data(),
                    (*momentum)[i].numel());
  float it_val = float(iter);
  append_record(buf, "meta.iter", {1}, &it_val, 1);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  check<IoError>(f.good(), path + ": cannot open for writing");
  f.write(buf.data(), std::streamsize(buf.size()));
  f.flush();
  check<IoError>(f.good(), path + ": write failed");
}

Model<float> load_checkpoint(const std::string& path, const ModelConfig& cfg,
                             CheckpointExtra* extra) {
  cfg.validate();
  std::ifstream f(path, std::ios::binary);
  check<IoError>(f.good(), path + ": cannot open");
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{s, path};
  const char* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    r.pos = 0;
    r.fail("not a checkpoint (bad magic)");
  }
  u32 ver = r.get_u32("version");
  check<IoError>(ver == kVersion,
                 path + strf(": unsupported checkpoint version %u (expected %u)", ver,
                             kVersion));
  u32 fp = r.get_u32("fingerprint");
  u32 want_fp = cfg.fingerprint();
  check<IoError>(fp == want_fp,
                 path + strf(": checkpoint fingerprint %08x does not match the model "
                             "config fingerprint %08x",
                             fp, want_fp));
  u32 count = r.get_u32("record count");

  std::unordered_map<std::string, Record> recs;
  for (u32 i = 0; i < count; ++i) {
    size_t rec_start = r.pos;
    u32 name_len = r.get_u16("record name length");
    std::string name(r.take(name_len, "record name"), name_len);
    u32 rank = u32(*reinterpret_cast<const unsigned char*>(r.take(1, "record rank")));
    if (rank < 1 || rank > 4) r.fail(strf("record '%s' has rank %u", name.c_str(), rank));
    Record rec;
    i64 numel = 1;
    for (u32 d = 0; d < rank; ++d) {
      rec.dims.push_back(r.get_u32("record dim"));
      check<IoError>(rec.dims.back() > 0,
                     path + ": record '" + name + "' has a zero dimension");
      numel *= rec.dims.back();
    }
    u32 byte_len = r.get_u32("payload length");
    check<IoError>(byte_len == u32(numel * 4),
                   path + strf(": record '%s' payload length %u does not match its "
                               "shape (%lld values)",
                               name.c_str(), byte_len, (long long)numel));
    const char* payload = r.take(byte_len, "payload");
    u32 stored_crc = r.get_u32("record CRC");
    u32 crc = u32(crc32(0L, reinterpret_cast<const Bytef*>(s.data() + rec_start),
                        uInt(r.pos - 4 - rec_start)));
    check<IoError>(crc == stored_crc,
                   path + strf(": CRC mismatch in record '%s' (stored %08x, computed "
                               "%08x)",
                               name.c_str(), stored_crc, crc));
    rec.vals.resize(size_t(numel));
    std::memcpy(rec.vals.data(), payload, byte_len);
    check<IoError>(recs.emplace(name, std::move(rec)).second,
                   path + ": duplicate record '" + name + "'");
  }
  check<IoError>(r.pos == s.size(),
                 path + strf(": %zu trailing bytes after the last record",
                             s.size() - r.pos));

  Model<float> m(cfg, 0);
  auto& reg = m.registry();
  std::unordered_set<std::string> used;
  auto fetch = [&](const std::string& name) -> const Record& {
    auto it = recs.find(name);
    check<IoError>(it != recs.end(), path + ": checkpoint missing record '" + name + "'");
    used.insert(name);
    return it->second;
  };
  for (auto& p : reg.params()) copy_into(p.tensor, p.name, fetch(p.name), path);
  for (auto& [name, t] : reg.states()) copy_into(t, name, fetch(name), path);

  bool any_momentum = false;
  for (const auto& [name, rec] : recs)
    if (name.rfind("momentum.", 0) == 0) any_momentum = true;
  if (any_momentum) {
    std::vector<Tensor<float>> vel = make_velocity(reg);
    for (size_t i = 0; i < reg.params().size(); ++i) {
      std::string name = "momentum." + reg.params()[i].name;
      copy_into(vel[i], name, fetch(name), path);
    }
    if (extra != nullptr) {
      extra->momentum = std::move(vel);
      extra->has_momentum = true;
    }
  }
  if (recs.count("meta.iter")) {
    const Record& rec = fetch("meta.iter");
    check<IoError>(rec.vals.size() == 1, path + ": meta.iter must hold one value");
    if (extra != nullptr) extra->iter = i64(std::llround(double(rec.vals[0])));
  }
  for (const auto& [name, rec] : recs)
    check<IoError>(used.count(name) != 0, path + ": unexpected record '" + name + "'");
  return m;
}

// ---- training loop ----

namespace {

std::string join_i64(const std::vector<i64>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i)
    s += (i ? ", " : "") + std::to_string((long long)v[i]);
  return s;
}

std::string join_seeds(const std::vector<u64>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    s += strf("0x%016llx", (unsigned long long)v[i]);
  }
  return s;
}

}  // namespace

TrainResult train(Model<float>& model, const TrainConfig& cfg,
                  const std::vector<data::SegSample>& train_set,
                  const std::vector<data::SegSample>& val_set,
                  const data::ClassTable& classes) {
  cfg.validate();
  check<ConfigError>(!train_set.empty(), "train: the training set is empty");
  const ModelConfig& mc = model.config();
  check<ConfigError>(classes.num_classes() == mc.num_classes,
                     strf("train: class table has %lld classes but the model expects "
                          "%lld",
                          (long long)classes.num_classes(), (long long)mc.num_classes));

  data::AugmentConfig aug = cfg.aug;
  if (aug.crop_h <= 0) aug.crop_h = mc.input_h;
  if (aug.crop_w <= 0) aug.crop_w = mc.input_w;
  const i64 ch = aug.crop_h, cw = aug.crop_w;
  const i64 n = i64(train_set.size());
  const i64 bsz = cfg.batch_size;
  const i64 iters_per_epoch = (n + bsz - 1) / bsz;
  const i64 max_iter = cfg.epochs * iters_per_epoch;

  std::vector<Tensor<float>> velocity = make_velocity(model.registry());
  TrainResult res;
  res.total_iters = max_iter;

  std::ofstream log;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    log.open(cfg.out_dir + "/train_log.jsonl", std::ios::trunc);
    check<IoError>(log.good(), cfg.out_dir + "/train_log.jsonl: cannot open");
  }

  i64 it = 0;
  for (i64 e = 0; e < cfg.epochs; ++e) {
    std::vector<i64> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, 0xf15e7e11u, u64(e)));
    for (i64 i = n - 1; i > 0; --i)
      std::swap(order[size_t(i)], order[size_t(shuffle_rng.uniform_int(0, i))]);

    double loss_sum = 0.0;
    i64 steps = 0;
    for (i64 b0 = 0; b0 < n; b0 += bsz) {
      const i64 bs = std::min(bsz, n - b0);
      std::vector<i64> idxs(order.begin() + b0, order.begin() + b0 + bs);
      std::vector<u64> seeds(static_cast<size_t>(bs));
      for (i64 k = 0; k < bs; ++k) seeds[size_t(k)] = mix_seed(cfg.seed, u64(e), u64(idxs[size_t(k)]));

      Tensor<float> x(Shape{bs, 3, ch, cw});
      LabelMap lab(bs, ch, cw, cfg.ignore_value);
#pragma omp parallel for schedule(static)
      for (i64 k = 0; k < bs; ++k) {
        Rng rng(seeds[size_t(k)]);
        data::SegSample a = data::augment(train_set[size_t(idxs[size_t(k)])], rng, aug, classes);
        Tensor<float> img = data::normalize(a.image);
        std::memcpy(x.data() + k * 3 * ch * cw, img.data(), size_t(3 * ch * cw) * 4);
        std::memcpy(lab.v.data() + k * ch * cw, a.labels.v.data(),
                    size_t(ch * cw) * sizeof(std::int32_t));
      }

      const double lr = poly_lr(it, max_iter, cfg.base_lr, cfg.lr_power);
      bool all_ignored = false;
      float loss_val = 0.0f;
      Tape tape;
      {
        TapeScope scope(tape);
        ModelOutputs<float> out = model.forward(x, true);
        Tensor<float> loss =
            total_loss<float>(out, lab, cfg.ignore_value, mc.aux_loss_weight, &all_ignored);
        loss_val = loss.item();
        if (!std::isfinite(double(loss_val)))
          throw std::runtime_error(
              strf("non-finite loss %g at iter %lld (epoch %lld); batch dataset "
                   "indices [%s], augment seeds [%s]",
                   double(loss_val), (long long)it, (long long)e,
                   join_i64(idxs).c_str(), join_seeds(seeds).c_str()));
        model.registry().zero_grads();
        backward(loss, tape);
      }
      if (all_ignored) {
        std::fprintf(stderr,
                     "warning: batch at iter %lld holds only ignored pixels; "
                     "skipping the update\n",
                     (long long)it);
      } else {
        sgd_step(model.registry(), velocity, lr, cfg.momentum, cfg.weight_decay);
      }

      res.iters.push_back({it, e, lr, double(loss_val)});
      if (log.is_open()) {
        nlohmann::json j;
        j["epoch"] = e;
        j["iter"] = it;
        j["loss"] = double(loss_val);
        j["lr"] = lr;
        log << j.dump() << "\n";
      }
      loss_sum += double(loss_val);
      ++steps;
      ++it;
    }

    EpochRow er;
    er.epoch = e;
    er.mean_loss = loss_sum / double(steps);
    if (!val_set.empty())
      er.val_miou = eval::evaluate(model, val_set, classes).metrics.miou;
    res.epochs.push_back(er);
    if (log.is_open()) {
      nlohmann::json j;
      j["epoch"] = e;
      j["mean_loss"] = er.mean_loss;
      if (!val_set.empty()) j["val_miou"] = er.val_miou;
      log << j.dump() << "\n";
      log.flush();
    }
    if (cfg.log_stderr) {
      if (val_set.empty())
        std::fprintf(stderr, "epoch %lld/%lld  mean loss %.4f\n", (long long)(e + 1),
                     (long long)cfg.epochs, er.mean_loss);
      else
        std::fprintf(stderr, "epoch %lld/%lld  mean loss %.4f  val mIoU %.4f\n",
                     (long long)(e + 1), (long long)cfg.epochs, er.mean_loss,
                     er.val_miou);
    }
    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
        (e + 1) % cfg.checkpoint_every == 0 && e + 1 < cfg.epochs) {
      save_checkpoint(strf("%s/ckpt_epoch_%03lld.cdlk", cfg.out_dir.c_str(),
                           (long long)(e + 1)),
                      model, &velocity, it);
    }
  }

  if (!cfg.out_dir.empty()) {
    res.final_checkpoint = cfg.out_dir + "/final.cdlk";
    save_checkpoint(res.final_checkpoint, model, &velocity, it);
  }
  return res;
}

}  // namespace pg
