#include "parsegrid/runconfig.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace pg {

namespace {

i64 to_i64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  long long x = std::strtoll(v.c_str(), &end, 10);
  check<ConfigError>(errno == 0 && end == v.c_str() + v.size() && !v.empty(),
                     "config key " + key + ": '" + v + "' is not an integer");
  return i64(x);
}

u64 to_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  check<ConfigError>(errno == 0 && end == v.c_str() + v.size() && !v.empty() &&
                         v[0] != '-',
                     "config key " + key + ": '" + v + "' is not a non-negative "
                     "integer");
  return u64(x);
}

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  double x = std::strtod(v.c_str(), &end);
  check<ConfigError>(errno == 0 && end == v.c_str() + v.size() && !v.empty(),
                     "config key " + key + ": '" + v + "' is not a number");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key " + key + ": '" + v +
                    "' is not a boolean (true/false/1/0)");
}

std::vector<i64> to_i64_list(const std::string& key, const std::string& v) {
  std::vector<i64> out;
  std::string cur;
  std::stringstream ss(v);
  while (std::getline(ss, cur, ','))
    out.push_back(to_i64(key, cur));
  check<ConfigError>(!out.empty(), "config key " + key + ": empty list");
  return out;
}

std::string from_double(double v) { return strf("%.17g", v); }

std::string from_bool(bool v) { return v ? "true" : "false"; }

std::string from_i64_list(const std::vector<i64>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i)
    s += (i ? "," : "") + std::to_string((long long)v[i]);
  return s;
}

struct KeySpec {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeySpec>& key_table() {
  static const std::vector<KeySpec> table = [] {
    std::vector<KeySpec> t;
    auto add = [&t](std::string key, auto set, auto get) {
      t.push_back({std::move(key), set, get});
    };

    add("model.num_classes",
        [](RunConfig& c, const std::string& v) {
          c.model.num_classes = to_i64("model.num_classes", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.model.num_classes); });
    add("model.base_width",
        [](RunConfig& c, const std::string& v) {
          c.model.base_width = to_i64("model.base_width", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.model.base_width); });
    add("model.encoder_blocks",
        [](RunConfig& c, const std::string& v) {
          auto list = to_i64_list("model.encoder_blocks", v);
          check<ConfigError>(list.size() == 4,
                             "config key model.encoder_blocks: expected 4 "
                             "comma-separated counts");
          for (size_t i = 0; i < 4; ++i) c.model.encoder_blocks[i] = list[i];
        },
        [](const RunConfig& c) {
          return from_i64_list({c.model.encoder_blocks.begin(),
                                c.model.encoder_blocks.end()});
        });
    add("model.aspp_dilations",
        [](RunConfig& c, const std::string& v) {
          c.model.aspp_dilations = to_i64_list("model.aspp_dilations", v);
        },
        [](const RunConfig& c) { return from_i64_list(c.model.aspp_dilations); });
    add("model.aspp_pool_branch",
        [](RunConfig& c, const std::string& v) {
          c.model.aspp_pool_branch = to_bool("model.aspp_pool_branch", v);
        },
        [](const RunConfig& c) { return from_bool(c.model.aspp_pool_branch); });
    add("model.use_aspp",
        [](RunConfig& c, const std::string& v) {
          c.model.use_aspp = to_bool("model.use_aspp", v);
        },
        [](const RunConfig& c) { return from_bool(c.model.use_aspp); });
    add("model.use_smooth",
        [](RunConfig& c, const std::string& v) {
          c.model.use_smooth = to_bool("model.use_smooth", v);
        },
        [](const RunConfig& c) { return from_bool(c.model.use_smooth); });
    add("model.use_multiscale_loss",
        [](RunConfig& c, const std::string& v) {
          c.model.use_multiscale_loss = to_bool("model.use_multiscale_loss", v);
        },
        [](const RunConfig& c) { return from_bool(c.model.use_multiscale_loss); });
    add("model.aux_loss_weight",
        [](RunConfig& c, const std::string& v) {
          c.model.aux_loss_weight = float(to_double("model.aux_loss_weight", v));
        },
        [](const RunConfig& c) { return strf("%.9g", double(c.model.aux_loss_weight)); });
    add("model.input_h",
        [](RunConfig& c, const std::string& v) {
          c.model.input_h = to_i64("model.input_h", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.model.input_h); });
    add("model.input_w",
        [](RunConfig& c, const std::string& v) {
          c.model.input_w = to_i64("model.input_w", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.model.input_w); });

    add("train.base_lr",
        [](RunConfig& c, const std::string& v) {
          c.train.base_lr = to_double("train.base_lr", v);
        },
        [](const RunConfig& c) { return from_double(c.train.base_lr); });
    add("train.lr_power",
        [](RunConfig& c, const std::string& v) {
          c.train.lr_power = to_double("train.lr_power", v);
        },
        [](const RunConfig& c) { return from_double(c.train.lr_power); });
    add("train.momentum",
        [](RunConfig& c, const std::string& v) {
          c.train.momentum = to_double("train.momentum", v);
        },
        [](const RunConfig& c) { return from_double(c.train.momentum); });
    add("train.weight_decay",
        [](RunConfig& c, const std::string& v) {
          c.train.weight_decay = to_double("train.weight_decay", v);
        },
        [](const RunConfig& c) { return from_double(c.train.weight_decay); });
    add("train.batch_size",
        [](RunConfig& c, const std::string& v) {
          c.train.batch_size = to_i64("train.batch_size", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.train.batch_size); });
    add("train.epochs",
        [](RunConfig& c, const std::string& v) {
          c.train.epochs = to_i64("train.epochs", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.train.epochs); });
    add("train.seed",
        [](RunConfig& c, const std::string& v) {
          c.train.seed = to_u64("train.seed", v);
        },
        [](const RunConfig& c) {
          return strf("%llu", (unsigned long long)c.train.seed);
        });
    add("train.ignore_value",
        [](RunConfig& c, const std::string& v) {
          c.train.ignore_value = std::int32_t(to_i64("train.ignore_value", v));
        },
        [](const RunConfig& c) { return std::to_string(c.train.ignore_value); });
    add("train.checkpoint_every",
        [](RunConfig& c, const std::string& v) {
          c.train.checkpoint_every = to_i64("train.checkpoint_every", v);
        },
        [](const RunConfig& c) {
          return std::to_string((long long)c.train.checkpoint_every);
        });
    add("train.scale_lo",
        [](RunConfig& c, const std::string& v) {
          c.train.aug.scale_lo = to_double("train.scale_lo", v);
        },
        [](const RunConfig& c) { return from_double(c.train.aug.scale_lo); });
    add("train.scale_hi",
        [](RunConfig& c, const std::string& v) {
          c.train.aug.scale_hi = to_double("train.scale_hi", v);
        },
        [](const RunConfig& c) { return from_double(c.train.aug.scale_hi); });
    add("train.max_rotation_deg",
        [](RunConfig& c, const std::string& v) {
          c.train.aug.max_rotation_deg = to_double("train.max_rotation_deg", v);
        },
        [](const RunConfig& c) { return from_double(c.train.aug.max_rotation_deg); });
    add("train.flip_prob",
        [](RunConfig& c, const std::string& v) {
          c.train.aug.flip_prob = to_double("train.flip_prob", v);
        },
        [](const RunConfig& c) { return from_double(c.train.aug.flip_prob); });
    add("train.crop_h",
        [](RunConfig& c, const std::string& v) {
          c.train.aug.crop_h = to_i64("train.crop_h", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.train.aug.crop_h); });
    add("train.crop_w",
        [](RunConfig& c, const std::string& v) {
          c.train.aug.crop_w = to_i64("train.crop_w", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.train.aug.crop_w); });

    add("data.source",
        [](RunConfig& c, const std::string& v) { c.data_source = v; },
        [](const RunConfig& c) { return c.data_source; });
    add("data.root",
        [](RunConfig& c, const std::string& v) { c.data_root = v; },
        [](const RunConfig& c) { return c.data_root; });
    add("data.classes",
        [](RunConfig& c, const std::string& v) { c.data_classes = v; },
        [](const RunConfig& c) { return c.data_classes; });
    add("data.count",
        [](RunConfig& c, const std::string& v) {
          c.data_count = to_i64("data.count", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.data_count); });
    add("data.val_count",
        [](RunConfig& c, const std::string& v) {
          c.data_val_count = to_i64("data.val_count", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.data_val_count); });
    add("data.height",
        [](RunConfig& c, const std::string& v) {
          c.data_height = to_i64("data.height", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.data_height); });
    add("data.width",
        [](RunConfig& c, const std::string& v) {
          c.data_width = to_i64("data.width", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.data_width); });
    add("data.seed",
        [](RunConfig& c, const std::string& v) { c.data_seed = to_u64("data.seed", v); },
        [](const RunConfig& c) {
          return strf("%llu", (unsigned long long)c.data_seed);
        });

    add("run.out_dir",
        [](RunConfig& c, const std::string& v) { c.out_dir = v; },
        [](const RunConfig& c) { return c.out_dir; });
    add("run.checkpoint",
        [](RunConfig& c, const std::string& v) { c.checkpoint = v; },
        [](const RunConfig& c) { return c.checkpoint; });
    add("run.tta",
        [](RunConfig& c, const std::string& v) { c.tta = to_bool("run.tta", v); },
        [](const RunConfig& c) { return from_bool(c.tta); });
    add("run.render",
        [](RunConfig& c, const std::string& v) { c.render = to_bool("run.render", v); },
        [](const RunConfig& c) { return from_bool(c.render); });
    add("run.workers",
        [](RunConfig& c, const std::string& v) {
          c.workers = to_i64("run.workers", v);
        },
        [](const RunConfig& c) { return std::to_string((long long)c.workers); });
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

void RunConfig::validate() const {
  std::vector<std::string> bad;
  if (data_source != "synth" && data_source != "dir")
    bad.push_back("data.source must be 'synth' or 'dir', got '" + data_source + "'");
  if (data_source == "dir" && data_root.empty())
    bad.push_back("data.root is required when data.source=dir");
  if (data_classes != "synthetic" && data_classes != "lip")
    bad.push_back("data.classes must be 'synthetic' or 'lip', got '" + data_classes +
                  "'");
  if (data_classes == "lip" && model.num_classes != 20)
    bad.push_back(strf("data.classes=lip requires model.num_classes=20, got %lld",
                       (long long)model.num_classes));
  if (data_source == "synth") {
    if (data_count < 1) bad.push_back("data.count must be >= 1 for synthetic data");
    if (data_val_count < 0) bad.push_back("data.val_count must be >= 0");
    if (data_height < 16 || data_width < 16 || data_height % 16 != 0 ||
        data_width % 16 != 0)
      bad.push_back(strf("data.height/data.width must be multiples of 16 and >= 16, "
                         "got %lldx%lld",
                         (long long)data_height, (long long)data_width));
  }
  if (workers < 1) bad.push_back(strf("run.workers must be >= 1, got %lld",
                                      (long long)workers));
  if (!bad.empty()) {
    std::string msg = "invalid run config:";
    for (const auto& b : bad) msg += "\n  - " + b;
    throw ConfigError(msg);
  }
  model.validate();
  train.validate();
}

data::ClassTable RunConfig::class_table() const {
  if (data_classes == "lip") return data::ClassTable::lip();
  return data::ClassTable::synthetic(model.num_classes);
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::stringstream ss(text);
  std::string line;
  i64 lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    check<ConfigError>(eq != std::string::npos,
                       strf("config line %lld is not key=value: '%s'",
                            (long long)lineno, t.c_str()));
    apply_override(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  check<ConfigError>(f.good(), path + ": cannot open config file");
  std::string text((std::istreambuf_iterator<char>(f)),
                   std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const KeySpec& spec : key_table()) {
    if (spec.key == key) {
      spec.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const KeySpec& spec : key_table())
    out += spec.key + "=" + spec.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const KeySpec& spec : key_table()) keys.push_back(spec.key);
  return keys;
}

}  // namespace pg
