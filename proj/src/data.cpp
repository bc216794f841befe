#include "parsegrid/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "parsegrid/ops.hpp"

namespace fs = std::filesystem;

namespace pg::data {

// ---- ClassTable ----

void ClassTable::validate() const {
  const i64 k = num_classes();
  check<ConfigError>(k >= 2, "class table needs at least 2 classes");
  check<ConfigError>((i64)palette.size() == k,
                     "palette size does not match class count");
  std::set<i64> used;
  for (auto [a, b] : flip_pairs) {
    check<ConfigError>(a >= 0 && a < k && b >= 0 && b < k && a != b,
                       strf("invalid flip pair (%lld,%lld)", (long long)a,
                            (long long)b));
    check<ConfigError>(used.insert(a).second,
                       strf("flip pair index %lld appears twice", (long long)a));
    check<ConfigError>(used.insert(b).second,
                       strf("flip pair index %lld appears twice", (long long)b));
  }
}

namespace {

// Deterministic distinct colors (bit-reversal colormap).
std::array<u8, 3> colormap(i64 i) {
  u8 r = 0, g = 0, b = 0;
  i64 c = i;
  for (int j = 0; j < 8; ++j) {
    r = (u8)(r | (((c >> 0) & 1) << (7 - j)));
    g = (u8)(g | (((c >> 1) & 1) << (7 - j)));
    b = (u8)(b | (((c >> 2) & 1) << (7 - j)));
    c >>= 3;
  }
  return {r, g, b};
}

std::vector<std::array<u8, 3>> make_palette(i64 k) {
  std::vector<std::array<u8, 3>> p((size_t)k);
  for (i64 i = 0; i < k; ++i) p[(size_t)i] = colormap(i);
  return p;
}

}  // namespace

ClassTable ClassTable::lip() {
  ClassTable t;
  t.names = {"bkg",   "hat",   "hair",  "glove", "glasses", "u-clo", "dress",
             "coat",  "sockets", "pants", "jsuits", "scarf", "skirt", "face",
             "l-arm", "r-arm", "l-leg", "r-leg", "l-shoe", "r-shoe"};
  t.flip_pairs = {{14, 15}, {16, 17}, {18, 19}};
  t.palette = make_palette(20);
  t.validate();
  return t;
}

ClassTable ClassTable::synthetic(i64 k) {
  check<ConfigError>(k >= 2 && k <= 20,
                     strf("synthetic class count must be in [2,20], got %lld",
                          (long long)k));
  const std::vector<std::string> catalog = {
      "bkg",   "head",  "torso",  "l-arm", "r-arm",   "l-leg", "r-leg",
      "hat",   "hair",  "scarf",  "skirt", "l-shoe",  "r-shoe", "glove",
      "glasses", "belt", "coat",  "l-sock", "r-sock", "dress"};
  const std::vector<std::pair<i64, i64>> all_pairs = {
      {3, 4}, {5, 6}, {11, 12}, {17, 18}};
  ClassTable t;
  t.names.assign(catalog.begin(), catalog.begin() + k);
  for (auto pr : all_pairs)
    if (pr.first < k && pr.second < k) t.flip_pairs.push_back(pr);
  t.palette = make_palette(k);
  t.validate();
  return t;
}

// ---- netpbm ----

namespace {

struct PnmParser {
  const std::string& path;
  const std::vector<u8>& buf;
  size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw IoError(strf("%s: %s at byte %zu", path.c_str(), what.c_str(), pos));
  }
  void skip_space() {
    while (pos < buf.size()) {
      const u8 c = buf[pos];
      if (c == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }
  i64 parse_int(const char* what) {
    skip_space();
    if (pos >= buf.size() || buf[pos] < '0' || buf[pos] > '9')
      fail(strf("expected %s", what));
    i64 v = 0;
    while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
      v = v * 10 + (buf[pos] - '0');
      if (v > (i64)1 << 30) fail(strf("%s out of range", what));
      ++pos;
    }
    return v;
  }
};

std::vector<u8> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  check<IoError>((bool)f, "cannot open " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff n = f.tellg();
  f.seekg(0);
  std::vector<u8> buf((size_t)n);
  if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), n);
  check<IoError>((bool)f, "cannot read " + path);
  return buf;
}

}  // namespace

Pnm read_pnm(const std::string& path) {
  const std::vector<u8> buf = read_file(path);
  PnmParser p{path, buf};
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6'))
    p.fail("expected magic P5 or P6");
  Pnm out;
  out.is_rgb = buf[1] == '6';
  p.pos = 2;
  out.w = p.parse_int("width");
  out.h = p.parse_int("height");
  if (out.w < 1 || out.h < 1) p.fail("image dimensions must be positive");
  const i64 maxval = p.parse_int("maxval");
  if (maxval != 255) p.fail(strf("maxval must be 255, got %lld",
                                 (long long)maxval));
  if (p.pos >= buf.size()) p.fail("expected single whitespace after maxval");
  const u8 sep = buf[p.pos];
  if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n')
    p.fail("expected single whitespace after maxval");
  ++p.pos;
  const size_t need = (size_t)out.h * (size_t)out.w * (out.is_rgb ? 3 : 1);
  if (buf.size() - p.pos < need)
    p.fail(strf("payload truncated, need %zu bytes, have %zu", need,
                buf.size() - p.pos));
  out.bytes.assign(buf.begin() + (std::ptrdiff_t)p.pos,
                   buf.begin() + (std::ptrdiff_t)(p.pos + need));
  return out;
}

Tensor<float> pnm_to_image(const Pnm& p) {
  check<IoError>(p.is_rgb, "expected a P6 color image");
  Tensor<float> t(Shape{1, 3, p.h, p.w});
  for (i64 y = 0; y < p.h; ++y)
    for (i64 x = 0; x < p.w; ++x)
      for (i64 c = 0; c < 3; ++c)
        t.at(0, c, y, x) =
            (float)p.bytes[(size_t)((y * p.w + x) * 3 + c)] / 255.0f;
  return t;
}

LabelMap pnm_to_labels(const Pnm& p) {
  check<IoError>(!p.is_rgb, "expected a P5 label map");
  LabelMap lm(1, p.h, p.w);
  for (size_t i = 0; i < p.bytes.size(); ++i)
    lm.v[i] = (std::int32_t)p.bytes[i];
  return lm;
}

Tensor<float> read_image(const std::string& path) {
  return pnm_to_image(read_pnm(path));
}

LabelMap read_labels(const std::string& path) {
  return pnm_to_labels(read_pnm(path));
}

namespace {

void write_file(const std::string& path, const std::string& header,
                const std::vector<u8>& payload) {
  std::ofstream f(path, std::ios::binary);
  check<IoError>((bool)f, "cannot open " + path + " for writing");
  f.write(header.data(), (std::streamsize)header.size());
  f.write(reinterpret_cast<const char*>(payload.data()),
          (std::streamsize)payload.size());
  check<IoError>((bool)f, "cannot write " + path);
}

}  // namespace

void write_pnm(const std::string& path, const Tensor<float>& image) {
  const Shape& s = image.shape();
  check<IoError>(s.n == 1 && s.c == 3,
                 "image for P6 must have shape (1,3,H,W), got " + s.str());
  std::vector<u8> bytes((size_t)(s.h * s.w * 3));
  for (i64 y = 0; y < s.h; ++y)
    for (i64 x = 0; x < s.w; ++x)
      for (i64 c = 0; c < 3; ++c) {
        const float v = std::min(1.0f, std::max(0.0f, image.at(0, c, y, x)));
        bytes[(size_t)((y * s.w + x) * 3 + c)] = (u8)std::lround(v * 255.0f);
      }
  write_file(path, strf("P6\n%lld %lld\n255\n", (long long)s.w, (long long)s.h),
             bytes);
}

void write_pnm(const std::string& path, const LabelMap& lm) {
  check<IoError>(lm.n == 1, "label map for P5 must have a single plane");
  std::vector<u8> bytes((size_t)(lm.h * lm.w));
  for (size_t i = 0; i < bytes.size(); ++i) {
    const std::int32_t v = lm.v[i];
    check<IoError>(v >= 0 && v <= 255,
                   strf("label %d does not fit a P5 byte", (int)v));
    bytes[i] = (u8)v;
  }
  write_file(path, strf("P5\n%lld %lld\n255\n", (long long)lm.w, (long long)lm.h),
             bytes);
}

// ---- synthetic figure ----

namespace {

struct Shape2d {
  enum Kind { kEllipse, kRect, kQuad } kind = kRect;
  double a = 0, b = 0, c = 0, d = 0;  // ellipse cx,cy,rx,ry; rect x0,y0,x1,y1
  std::array<std::array<double, 2>, 4> pts{};  // quad corners, convex

  bool contains(double x, double y) const {
    switch (kind) {
      case kEllipse: {
        const double dx = (x - a) / c, dy = (y - b) / d;
        return dx * dx + dy * dy <= 1.0;
      }
      case kRect:
        return x >= a && x <= c && y >= b && y <= d;
      case kQuad: {
        double sign = 0;
        for (int i = 0; i < 4; ++i) {
          const auto& p0 = pts[(size_t)i];
          const auto& p1 = pts[(size_t)((i + 1) % 4)];
          const double cr = (p1[0] - p0[0]) * (y - p0[1]) -
                            (p1[1] - p0[1]) * (x - p0[0]);
          if (cr != 0) {
            if (sign == 0)
              sign = cr;
            else if ((cr > 0) != (sign > 0))
              return false;
          }
        }
        return true;
      }
    }
    return false;
  }
  std::array<double, 2> centroid() const {
    switch (kind) {
      case kEllipse:
        return {a, b};
      case kRect:
        return {(a + c) / 2, (b + d) / 2};
      case kQuad: {
        double x = 0, y = 0;
        for (const auto& p : pts) {
          x += p[0];
          y += p[1];
        }
        return {x / 4, y / 4};
      }
    }
    return {0, 0};
  }
};

Shape2d ellipse(double cx, double cy, double rx, double ry) {
  Shape2d s;
  s.kind = Shape2d::kEllipse;
  s.a = cx;
  s.b = cy;
  s.c = rx;
  s.d = ry;
  return s;
}

Shape2d rect(double x0, double y0, double x1, double y1) {
  Shape2d s;
  s.kind = Shape2d::kRect;
  s.a = x0;
  s.b = y0;
  s.c = x1;
  s.d = y1;
  return s;
}

Shape2d quad(std::array<double, 2> p0, std::array<double, 2> p1,
             std::array<double, 2> p2, std::array<double, 2> p3) {
  Shape2d s;
  s.kind = Shape2d::kQuad;
  s.pts = {p0, p1, p2, p3};
  return s;
}

// Thick segment from (x0,y0) to (x1,y1).
Shape2d limb(double x0, double y0, double x1, double y1, double half_width) {
  const double dx = x1 - x0, dy = y1 - y0;
  const double len = std::sqrt(dx * dx + dy * dy);
  const double nx = -dy / len * half_width, ny = dx / len * half_width;
  return quad({x0 + nx, y0 + ny}, {x1 + nx, y1 + ny}, {x1 - nx, y1 - ny},
              {x0 - nx, y0 - ny});
}

struct Part {
  i64 cls;
  Shape2d shape;
};

// All geometry sits inside the unit disk of figure space (radius 0.5,
// y pointing down), so any rotation stays inside the canvas margin.
// Order is paint order: later entries overdraw earlier ones.
std::vector<Part> figure_parts(i64 k) {
  std::vector<Part> all;
  auto add = [&](i64 cls, Shape2d s) {
    if (cls < k) all.push_back({cls, s});
  };
  add(3, limb(-0.11, -0.14, -0.27, 0.07, 0.045));   // l-arm
  add(4, limb(0.11, -0.14, 0.27, 0.07, 0.045));     // r-arm
  add(5, limb(-0.055, 0.07, -0.095, 0.40, 0.048));  // l-leg
  add(6, limb(0.055, 0.07, 0.095, 0.40, 0.048));    // r-leg
  add(17, rect(-0.125, 0.34, -0.055, 0.395));       // l-sock
  add(18, rect(0.055, 0.34, 0.125, 0.395));         // r-sock
  add(11, rect(-0.145, 0.40, -0.05, 0.455));        // l-shoe
  add(12, rect(0.05, 0.40, 0.145, 0.455));          // r-shoe
  add(2, rect(-0.11, -0.18, 0.11, 0.08));           // torso
  add(16, rect(-0.13, -0.10, 0.13, 0.02));          // coat
  add(15, rect(-0.11, 0.035, 0.11, 0.08));          // belt
  add(19, quad({-0.13, 0.08}, {0.13, 0.08}, {0.17, 0.25}, {-0.17, 0.25}));
  add(10, quad({-0.12, 0.08}, {0.12, 0.08}, {0.15, 0.20}, {-0.15, 0.20}));
  add(1, ellipse(0, -0.30, 0.09, 0.11));            // head
  add(9, rect(-0.075, -0.215, 0.075, -0.165));      // scarf
  add(8, ellipse(0, -0.37, 0.098, 0.058));          // hair
  add(7, ellipse(0, -0.425, 0.105, 0.048));         // hat
  add(14, rect(-0.085, -0.325, 0.085, -0.295));     // glasses
  add(13, rect(-0.295, 0.045, -0.235, 0.10));       // glove
  return all;
}

}  // namespace

SegSample synth_sample(u64 seed, i64 k, i64 h, i64 w) {
  check<ConfigError>(k >= 2 && k <= 20,
                     strf("synthetic class count must be in [2,20], got %lld",
                          (long long)k));
  check<ConfigError>(h >= 32 && w >= 32,
                     strf("canvas %lldx%lld too small to place the figure "
                          "(need at least 32x32)",
                          (long long)h, (long long)w));
  Rng rng(mix_seed(seed, (u64)k, (u64)((h << 20) | w)));
  const double mind = (double)std::min(h, w);
  const double scale = rng.uniform(0.5, 1.5);
  const double theta = rng.uniform(-30.0, 30.0) * 3.14159265358979323846 / 180.0;
  const double cx = (double)w / 2 + rng.uniform(-1.0, 1.0) * 0.08 * mind;
  const double cy = (double)h / 2 + rng.uniform(-1.0, 1.0) * 0.08 * mind;
  const double px_per_unit = scale * 0.55 * mind;

  float bkg[3];
  for (auto& v : bkg) v = (float)rng.uniform(0.25, 0.75);
  const ClassTable table = ClassTable::synthetic(k);
  std::vector<std::array<float, 3>> color((size_t)k);
  color[0] = {bkg[0], bkg[1], bkg[2]};
  for (i64 c = 1; c < k; ++c)
    for (int ch = 0; ch < 3; ++ch)
      color[(size_t)c][(size_t)ch] =
          (float)((double)table.palette[(size_t)c][(size_t)ch] / 255.0 +
                  rng.uniform(-0.10, 0.10));

  SegSample s;
  s.image = Tensor<float>(Shape{1, 3, h, w});
  s.labels = LabelMap(1, h, w);

  const double ct = std::cos(theta), st = std::sin(theta);
  auto to_figure = [&](double xp, double yp, double& xf, double& yf) {
    const double dx = xp - cx, dy = yp - cy;
    xf = (dx * ct + dy * st) / px_per_unit;
    yf = (-dx * st + dy * ct) / px_per_unit;
  };
  auto to_pixel = [&](double xf, double yf, double& xp, double& yp) {
    xp = cx + (xf * ct - yf * st) * px_per_unit;
    yp = cy + (xf * st + yf * ct) * px_per_unit;
  };

  for (const Part& part : figure_parts(k)) {
    i64 painted = 0;
    for (i64 y = 0; y < h; ++y)
      for (i64 x = 0; x < w; ++x) {
        double xf, yf;
        to_figure((double)x + 0.5, (double)y + 0.5, xf, yf);
        if (part.shape.contains(xf, yf)) {
          s.labels.at(0, y, x) = (std::int32_t)part.cls;
          ++painted;
        }
      }
    if (painted == 0) {
      // Sub-pixel region at small scales: its center pixel is the region.
      const auto c = part.shape.centroid();
      double xp, yp;
      to_pixel(c[0], c[1], xp, yp);
      const i64 x = (i64)std::floor(xp), y = (i64)std::floor(yp);
      if (x >= 0 && x < w && y >= 0 && y < h)
        s.labels.at(0, y, x) = (std::int32_t)part.cls;
    }
  }

  for (i64 y = 0; y < h; ++y)
    for (i64 x = 0; x < w; ++x) {
      const auto& base = color[(size_t)s.labels.at(0, y, x)];
      for (i64 c = 0; c < 3; ++c) {
        const float v = base[(size_t)c] + (float)rng.gauss() * 0.06f;
        s.image.at(0, c, y, x) = std::min(1.0f, std::max(0.0f, v));
      }
    }
  return s;
}

std::vector<SegSample> synth_dataset(u64 seed, i64 count, i64 k, i64 h,
                                     i64 w) {
  std::vector<SegSample> out;
  out.reserve((size_t)count);
  for (i64 i = 0; i < count; ++i)
    out.push_back(synth_sample(mix_seed(seed, (u64)i), k, h, w));
  return out;
}

void write_synth_dataset(const std::string& root, u64 seed, i64 count, i64 k,
                         i64 h, i64 w, double val_fraction) {
  check<ConfigError>(val_fraction >= 0.0 && val_fraction < 1.0,
                     "val_fraction must be in [0,1)");
  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "labels");
  fs::create_directories(fs::path(root) / "splits");
  const i64 n_val = (i64)std::llround(val_fraction * (double)count);
  std::string train_list, val_list;
  for (i64 i = 0; i < count; ++i) {
    const std::string stem = strf("synth_%05lld", (long long)i);
    const SegSample s = synth_sample(mix_seed(seed, (u64)i), k, h, w);
    write_pnm((fs::path(root) / "images" / (stem + ".ppm")).string(), s.image);
    write_pnm((fs::path(root) / "labels" / (stem + ".pgm")).string(),
              s.labels);
    (i < count - n_val ? train_list : val_list) += stem + "\n";
  }
  std::ofstream((fs::path(root) / "splits" / "train.txt").string())
      << train_list;
  std::ofstream((fs::path(root) / "splits" / "val.txt").string()) << val_list;
}

// ---- augmentation ----

AugmentDraw draw_augment(Rng& rng, const AugmentConfig& cfg) {
  AugmentDraw d;
  d.scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  d.rotation_deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
  d.flip = rng.bernoulli(cfg.flip_prob);
  d.crop_cy = rng.uniform(0.0, 1.0);
  d.crop_cx = rng.uniform(0.0, 1.0);
  return d;
}

Tensor<float> flip_image(const Tensor<float>& img) {
  const Shape& s = img.shape();
  Tensor<float> out(s);
  for (i64 n = 0; n < s.n; ++n)
    for (i64 c = 0; c < s.c; ++c)
      for (i64 y = 0; y < s.h; ++y)
        for (i64 x = 0; x < s.w; ++x)
          out.at(n, c, y, x) = img.at(n, c, y, s.w - 1 - x);
  return out;
}

LabelMap flip_labels(const LabelMap& lm,
                     const std::vector<std::pair<i64, i64>>& pairs) {
  std::array<std::int32_t, 256> lut;
  for (i64 i = 0; i < 256; ++i) lut[(size_t)i] = (std::int32_t)i;
  for (auto [a, b] : pairs) {
    lut[(size_t)a] = (std::int32_t)b;
    lut[(size_t)b] = (std::int32_t)a;
  }
  LabelMap out(lm.n, lm.h, lm.w);
  for (i64 n = 0; n < lm.n; ++n)
    for (i64 y = 0; y < lm.h; ++y)
      for (i64 x = 0; x < lm.w; ++x) {
        const std::int32_t v = lm.at(n, y, lm.w - 1 - x);
        out.at(n, y, x) = (v >= 0 && v < 256) ? lut[(size_t)v] : v;
      }
  return out;
}

namespace {

void mean_color(const Tensor<float>& img, float out[3]) {
  const Shape& s = img.shape();
  for (i64 c = 0; c < 3; ++c) {
    double acc = 0;
    for (i64 n = 0; n < s.n; ++n)
      for (i64 y = 0; y < s.h; ++y)
        for (i64 x = 0; x < s.w; ++x) acc += (double)img.at(n, c, y, x);
    out[c] = (float)(acc / (double)(s.n * s.h * s.w));
  }
}

LabelMap resize_labels_nearest(const LabelMap& lm, i64 oh, i64 ow) {
  LabelMap out(lm.n, oh, ow);
  for (i64 n = 0; n < lm.n; ++n)
    for (i64 y = 0; y < oh; ++y)
      for (i64 x = 0; x < ow; ++x) {
        i64 sy = (i64)std::llround(((double)y + 0.5) * (double)lm.h /
                                       (double)oh -
                                   0.5);
        i64 sx = (i64)std::llround(((double)x + 0.5) * (double)lm.w /
                                       (double)ow -
                                   0.5);
        sy = std::min(lm.h - 1, std::max<i64>(0, sy));
        sx = std::min(lm.w - 1, std::max<i64>(0, sx));
        out.at(n, y, x) = lm.at(n, sy, sx);
      }
  return out;
}

}  // namespace

SegSample apply_augment(const SegSample& s, const AugmentDraw& d,
                        const AugmentConfig& cfg, const ClassTable& classes) {
  check<ConfigError>(s.image.shape().h == s.labels.h &&
                         s.image.shape().w == s.labels.w,
                     "sample image and labels disagree on size");
  float fill[3];
  mean_color(s.image, fill);

  Tensor<float> img = s.image;
  LabelMap lab = s.labels;

  if (d.scale != 1.0) {
    const i64 sh = std::max<i64>(1, (i64)std::llround((double)img.shape().h *
                                                      d.scale));
    const i64 sw = std::max<i64>(1, (i64)std::llround((double)img.shape().w *
                                                      d.scale));
    img = ops::bilinear_resize(img, sh, sw);
    lab = resize_labels_nearest(lab, sh, sw);
  }

  if (d.rotation_deg != 0.0) {
    const Shape sh = img.shape();
    const double th = d.rotation_deg * 3.14159265358979323846 / 180.0;
    const double ct = std::cos(th), st = std::sin(th);
    const double cy = (double)sh.h / 2, cx = (double)sh.w / 2;
    Tensor<float> rimg(sh);
    LabelMap rlab(lab.n, lab.h, lab.w);
    for (i64 y = 0; y < sh.h; ++y)
      for (i64 x = 0; x < sh.w; ++x) {
        const double dx = (double)x + 0.5 - cx, dy = (double)y + 0.5 - cy;
        const double sxf = dx * ct + dy * st + cx - 0.5;
        const double syf = -dx * st + dy * ct + cy - 0.5;
        const i64 x0 = (i64)std::floor(sxf), y0 = (i64)std::floor(syf);
        const double wx = sxf - (double)x0, wy = syf - (double)y0;
        for (i64 c = 0; c < 3; ++c) {
          auto tap = [&](i64 yy, i64 xx) -> double {
            if (yy < 0 || yy >= sh.h || xx < 0 || xx >= sh.w)
              return (double)fill[c];
            return (double)img.at(0, c, yy, xx);
          };
          const double v = tap(y0, x0) * (1 - wy) * (1 - wx) +
                           tap(y0, x0 + 1) * (1 - wy) * wx +
                           tap(y0 + 1, x0) * wy * (1 - wx) +
                           tap(y0 + 1, x0 + 1) * wy * wx;
          rimg.at(0, c, y, x) = (float)v;
        }
        const i64 ny = (i64)std::llround(syf), nx = (i64)std::llround(sxf);
        rlab.at(0, y, x) = (ny < 0 || ny >= lab.h || nx < 0 || nx >= lab.w)
                               ? s.ignore_value
                               : lab.at(0, ny, nx);
      }
    img = rimg;
    lab = rlab;
  }

  {  // crop or pad to the network input size
    const i64 ch = cfg.crop_h, cw = cfg.crop_w;
    const Shape sh = img.shape();
    const i64 oy = sh.h >= ch
                       ? (i64)std::llround((double)(sh.h - ch) * d.crop_cy)
                       : -((ch - sh.h) / 2);
    const i64 ox = sh.w >= cw
                       ? (i64)std::llround((double)(sh.w - cw) * d.crop_cx)
                       : -((cw - sh.w) / 2);
    Tensor<float> cimg(Shape{1, 3, ch, cw});
    LabelMap clab(1, ch, cw);
    for (i64 y = 0; y < ch; ++y)
      for (i64 x = 0; x < cw; ++x) {
        const i64 sy = y + oy, sx = x + ox;
        const bool in = sy >= 0 && sy < sh.h && sx >= 0 && sx < sh.w;
        for (i64 c = 0; c < 3; ++c)
          cimg.at(0, c, y, x) = in ? img.at(0, c, sy, sx) : fill[c];
        clab.at(0, y, x) = in ? lab.at(0, sy, sx) : s.ignore_value;
      }
    img = cimg;
    lab = clab;
  }

  if (d.flip) {
    img = flip_image(img);
    lab = flip_labels(lab, classes.flip_pairs);
  }

  SegSample out;
  out.image = img;
  out.labels = lab;
  out.ignore_value = s.ignore_value;
  return out;
}

SegSample augment(const SegSample& s, Rng& rng, const AugmentConfig& cfg,
                  const ClassTable& classes) {
  return apply_augment(s, draw_augment(rng, cfg), cfg, classes);
}

// ---- normalization ----

Tensor<float> normalize(const Tensor<float>& img, const NormStats& ns) {
  const Shape& s = img.shape();
  check(s.c == 3, "normalize expects 3 channels, got " + s.str());
  Tensor<float> out(s);
  for (i64 n = 0; n < s.n; ++n)
    for (i64 c = 0; c < 3; ++c)
      for (i64 y = 0; y < s.h; ++y)
        for (i64 x = 0; x < s.w; ++x)
          out.at(n, c, y, x) =
              (img.at(n, c, y, x) - ns.mean[(size_t)c]) / ns.stdev[(size_t)c];
  return out;
}

Tensor<float> denormalize(const Tensor<float>& img, const NormStats& ns) {
  const Shape& s = img.shape();
  check(s.c == 3, "denormalize expects 3 channels, got " + s.str());
  Tensor<float> out(s);
  for (i64 n = 0; n < s.n; ++n)
    for (i64 c = 0; c < 3; ++c)
      for (i64 y = 0; y < s.h; ++y)
        for (i64 x = 0; x < s.w; ++x)
          out.at(n, c, y, x) =
              img.at(n, c, y, x) * ns.stdev[(size_t)c] + ns.mean[(size_t)c];
  return out;
}

// ---- directory loading ----

DatasetIndex load_lip_dir(const std::string& root) {
  const fs::path r(root);
  check<IoError>(fs::is_directory(r), "dataset root not found: " + root);

  std::set<std::string> image_stems, label_stems;
  if (fs::is_directory(r / "images"))
    for (const auto& e : fs::directory_iterator(r / "images"))
      if (e.path().extension() == ".ppm")
        image_stems.insert(e.path().stem().string());
  if (fs::is_directory(r / "labels"))
    for (const auto& e : fs::directory_iterator(r / "labels"))
      if (e.path().extension() == ".pgm")
        label_stems.insert(e.path().stem().string());

  std::vector<std::string> orphans;
  for (const auto& s : image_stems)
    if (!label_stems.count(s)) orphans.push_back(s + " (image without label)");
  for (const auto& s : label_stems)
    if (!image_stems.count(s)) orphans.push_back(s + " (label without image)");
  if (!orphans.empty()) {
    std::string msg = "unpaired dataset files under " + root + ":";
    for (const auto& o : orphans) msg += "\n  - " + o;
    throw IoError(msg);
  }

  auto read_split = [&](const char* name) {
    std::vector<DatasetEntry> out;
    const fs::path list = r / "splits" / name;
    if (!fs::exists(list)) return out;
    std::ifstream f(list);
    std::string stem;
    while (std::getline(f, stem)) {
      while (!stem.empty() && (stem.back() == '\r' || stem.back() == ' '))
        stem.pop_back();
      if (stem.empty()) continue;
      check<IoError>(image_stems.count(stem) > 0,
                     strf("%s lists stem '%s' with no dataset files", name,
                          stem.c_str()));
      out.push_back({stem, (r / "images" / (stem + ".ppm")).string(),
                     (r / "labels" / (stem + ".pgm")).string()});
    }
    return out;
  };

  DatasetIndex idx;
  idx.train = read_split("train.txt");
  idx.val = read_split("val.txt");
  if (idx.train.empty() && idx.val.empty())
    std::fprintf(stderr, "warning: dataset at %s has no listed samples\n",
                 root.c_str());
  return idx;
}

SegSample load_sample(const DatasetEntry& e) {
  SegSample s;
  s.image = read_image(e.image_path);
  s.labels = read_labels(e.label_path);
  check<IoError>(s.image.shape().h == s.labels.h &&
                     s.image.shape().w == s.labels.w,
                 strf("%s: image and label sizes disagree", e.stem.c_str()));
  return s;
}

}  // namespace pg::data
