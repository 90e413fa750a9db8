#include "multiwin/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "multiwin/rng.hpp"

namespace multiwin {

namespace {

struct Vec2 {
  double x = 0, y = 0;
};

/// Rigid motion p' = R(p - c) * s + c + t.
struct Motion {
  double cx = 0, cy = 0;
  double angle = 0;
  double scale = 1;
  double tx = 0, ty = 0;

  Vec2 apply(double x, double y) const {
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double dx = x - cx, dy = y - cy;
    return {(dx * ca - dy * sa) * scale + cx + tx, (dx * sa + dy * ca) * scale + cy + ty};
  }
  Vec2 inverse(double x, double y) const {
    const double ca = std::cos(-angle), sa = std::sin(-angle);
    const double dx = (x - cx - tx) / scale, dy = (y - cy - ty) / scale;
    return {dx * ca - dy * sa + cx, dx * sa + dy * ca + cy};
  }
};

enum class ShapeKind { background, ellipse, rectangle, triangle };

struct Layer {
  ShapeKind kind = ShapeKind::background;
  double cx = 0, cy = 0;    // shape center
  double a = 0, b = 0;      // half extents
  double rot = 0;           // shape orientation
  int cls = 0;              // segmentation class
  // texture
  double base_r = 0.5, base_g = 0.5, base_b = 0.5;
  double stripe_dir = 0, stripe_period = 24, stripe_phase = 0, stripe_amp = 0.15;
  double wave_fx = 0, wave_fy = 0, wave_phase = 0, wave_amp = 0.08;
  Motion motion;  // flow task only

  bool inside(double x, double y) const {
    if (kind == ShapeKind::background) return true;
    const double ca = std::cos(-rot), sa = std::sin(-rot);
    const double lx = (x - cx) * ca - (y - cy) * sa;
    const double ly = (x - cx) * sa + (y - cy) * ca;
    switch (kind) {
      case ShapeKind::ellipse:
        return (lx * lx) / (a * a) + (ly * ly) / (b * b) <= 1.0;
      case ShapeKind::rectangle:
        return std::abs(lx) <= a && std::abs(ly) <= b;
      case ShapeKind::triangle:
        // Isoceles triangle pointing +y in local coords.
        return ly >= -b && std::abs(lx) <= a * (1.0 - (ly + b) / (2.0 * b));
      default:
        return true;
    }
  }

  void color(double x, double y, double* rgb) const {
    const double s = std::sin(
        2.0 * M_PI * (x * std::cos(stripe_dir) + y * std::sin(stripe_dir)) / stripe_period +
        stripe_phase);
    const double w = std::sin(x * wave_fx + y * wave_fy + wave_phase);
    const double m = stripe_amp * s + wave_amp * w;
    rgb[0] = std::clamp(base_r + m, 0.0, 1.0);
    rgb[1] = std::clamp(base_g + m * 0.7, 0.0, 1.0);
    rgb[2] = std::clamp(base_b - m * 0.5, 0.0, 1.0);
  }
};

void class_palette(int cls, int k, double* rgb) {
  const double t = 2.0 * M_PI * cls / std::max(1, k);
  rgb[0] = 0.5 + 0.3 * std::cos(t);
  rgb[1] = 0.5 + 0.3 * std::cos(t + 2.1);
  rgb[2] = 0.5 + 0.3 * std::cos(t + 4.2);
}

Layer random_shape(Rng& rng, int width, int height) {
  Layer l;
  const int kind = static_cast<int>(rng.uniform_int(0, 2));
  l.kind = kind == 0 ? ShapeKind::ellipse : (kind == 1 ? ShapeKind::rectangle : ShapeKind::triangle);
  l.cx = rng.uniform_real(0.1 * width, 0.9 * width);
  l.cy = rng.uniform_real(0.1 * height, 0.9 * height);
  l.a = rng.uniform_real(0.08, 0.3) * width;
  l.b = rng.uniform_real(0.08, 0.3) * height;
  l.rot = rng.uniform_real(0.0, 2.0 * M_PI);
  return l;
}

void random_texture(Rng& rng, Layer& l) {
  l.stripe_dir = rng.uniform_real(0.0, M_PI);
  l.stripe_period = rng.uniform_real(16.0, 48.0);
  l.stripe_phase = rng.uniform_real(0.0, 2.0 * M_PI);
  l.wave_fx = rng.uniform_real(0.02, 0.08);
  l.wave_fy = rng.uniform_real(0.02, 0.08);
  l.wave_phase = rng.uniform_real(0.0, 2.0 * M_PI);
}

/// Class-conditioned texture: the base color carries per-shape jitter that
/// overlaps neighboring classes, while the stripe orientation/period pin
/// the class down only over several patches of context.
void class_texture(Rng& rng, Layer& l, int k) {
  double rgb[3];
  class_palette(l.cls, k, rgb);
  const double jitter = 0.12;
  l.base_r = std::clamp(rgb[0] + rng.uniform_real(-jitter, jitter), 0.05, 0.95);
  l.base_g = std::clamp(rgb[1] + rng.uniform_real(-jitter, jitter), 0.05, 0.95);
  l.base_b = std::clamp(rgb[2] + rng.uniform_real(-jitter, jitter), 0.05, 0.95);
  l.stripe_dir = M_PI * l.cls / std::max(1, k) + rng.uniform_real(-0.1, 0.1);
  l.stripe_period = 18.0 + 6.0 * (l.cls % 3) + rng.uniform_real(-2.0, 2.0);
  l.stripe_phase = rng.uniform_real(0.0, 2.0 * M_PI);
  l.wave_fx = rng.uniform_real(0.02, 0.06);
  l.wave_fy = rng.uniform_real(0.02, 0.06);
  l.wave_phase = rng.uniform_real(0.0, 2.0 * M_PI);
  l.stripe_amp = 0.16;
  l.wave_amp = 0.06;
}

}  // namespace

SegSample gen_seg_sample(int height, int width, int k_classes, uint64_t seed) {
  check(k_classes >= 2, "gen_seg_sample: need at least 2 classes");
  Rng rng(Rng::derive(seed, 0x736567ULL));

  std::vector<Layer> layers;  // index 0 = background, later = on top
  Layer bg;
  bg.kind = ShapeKind::background;
  bg.cls = static_cast<int>(rng.uniform_int(0, k_classes - 1));
  class_texture(rng, bg, k_classes);
  layers.push_back(bg);

  const int n_shapes = static_cast<int>(rng.uniform_int(5, 15));
  for (int i = 0; i < n_shapes; ++i) {
    Layer l = random_shape(rng, width, height);
    if (i == 0) {
      // Guarantee long-range structure: one shape wider than half the image.
      l.a = rng.uniform_real(0.3, 0.45) * width;
      l.cx = rng.uniform_real(0.3 * width, 0.7 * width);
      l.rot = rng.uniform_real(-0.2, 0.2);
    }
    l.cls = static_cast<int>(rng.uniform_int(0, k_classes - 1));
    class_texture(rng, l, k_classes);
    layers.push_back(l);
  }

  SegSample s;
  s.width = width;
  s.height = height;
  s.image.resize(size_t(width) * height * 3);
  s.labels.resize(size_t(width) * height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Layer* top = &layers[0];
      for (size_t li = layers.size(); li-- > 1;) {
        if (layers[li].inside(x, y)) {
          top = &layers[li];
          break;
        }
      }
      top->color(x, y, s.image.data() + (size_t(y) * width + x) * 3);
      s.labels[size_t(y) * width + x] = top->cls;
    }
  }
  return s;
}

FlowSample gen_flow_sample(int height, int width, double max_disp, uint64_t seed) {
  check(max_disp < std::min(width, height) / 2.0, "gen_flow_sample: max_disp too large");
  Rng rng(Rng::derive(seed, 0x666c6f77ULL));

  std::vector<Layer> layers;
  Layer bg;
  bg.kind = ShapeKind::background;
  bg.base_r = rng.uniform_real(0.25, 0.75);
  bg.base_g = rng.uniform_real(0.25, 0.75);
  bg.base_b = rng.uniform_real(0.25, 0.75);
  random_texture(rng, bg);
  bg.motion.cx = width / 2.0;
  bg.motion.cy = height / 2.0;
  // Background rotation/zoom scale with max_disp so the zero-motion limit
  // degenerates to a static scene.
  const double bg_dev = std::min(0.015, 0.002 * max_disp);
  bg.motion.angle = rng.uniform_real(-bg_dev, bg_dev);
  bg.motion.scale = rng.uniform_real(1.0 - bg_dev, 1.0 + bg_dev);
  {
    const double mag = rng.uniform_real(0.0, 0.4 * max_disp);
    const double dir = rng.uniform_real(0.0, 2.0 * M_PI);
    bg.motion.tx = mag * std::cos(dir);
    bg.motion.ty = mag * std::sin(dir);
  }
  layers.push_back(bg);

  const int n_shapes = static_cast<int>(rng.uniform_int(3, 8));
  for (int i = 0; i < n_shapes; ++i) {
    Layer l = random_shape(rng, width, height);
    l.base_r = rng.uniform_real(0.2, 0.8);
    l.base_g = rng.uniform_real(0.2, 0.8);
    l.base_b = rng.uniform_real(0.2, 0.8);
    random_texture(rng, l);
    l.motion.cx = l.cx;
    l.motion.cy = l.cy;
    // Cap the rotational reach so rotation + translation stays <= max_disp.
    const double radius = std::hypot(l.a, l.b);
    const double max_angle = std::min(0.12, 0.3 * max_disp / std::max(radius, 1.0));
    l.motion.angle = rng.uniform_real(-max_angle, max_angle);
    l.motion.scale = 1.0;
    const double mag = rng.uniform_real(0.2, 0.7) * max_disp;
    const double dir = rng.uniform_real(0.0, 2.0 * M_PI);
    l.motion.tx = mag * std::cos(dir);
    l.motion.ty = mag * std::sin(dir);
    layers.push_back(l);
  }

  FlowSample s;
  s.width = width;
  s.height = height;
  s.frame1.resize(size_t(width) * height * 3);
  s.frame2.resize(size_t(width) * height * 3);
  s.flow.resize(width, height);

  auto topmost_frame1 = [&](double x, double y) -> size_t {
    for (size_t li = layers.size(); li-- > 1;)
      if (layers[li].inside(x, y)) return li;
    return 0;
  };
  auto topmost_frame2 = [&](double x, double y) -> size_t {
    for (size_t li = layers.size(); li-- > 1;) {
      const Vec2 src = layers[li].motion.inverse(x, y);
      if (layers[li].inside(src.x, src.y)) return li;
    }
    return 0;
  };

  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const size_t i = size_t(y) * width + x;
      const size_t l1 = topmost_frame1(x, y);
      layers[l1].color(x, y, s.frame1.data() + i * 3);
      const Vec2 e = layers[l1].motion.apply(x, y);
      s.flow.u[i] = e.x - x;
      s.flow.v[i] = e.y - y;
      const bool in_frame = e.x >= 0.0 && e.y >= 0.0 && e.x <= width - 1.0 && e.y <= height - 1.0;
      s.flow.valid[i] = in_frame && topmost_frame2(e.x, e.y) == l1 ? 1 : 0;

      const size_t l2 = topmost_frame2(x, y);
      const Vec2 src = layers[l2].motion.inverse(x, y);
      layers[l2].color(src.x, src.y, s.frame2.data() + i * 3);
    }
  }
  return s;
}

// ---- dataset dump ----

namespace {

namespace fs = std::filesystem;

void write_f32(std::ofstream& f, const double* data, size_t n) {
  std::vector<float> buf(n);
  for (size_t i = 0; i < n; ++i) buf[i] = static_cast<float>(data[i]);
  f.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(n * 4));
}

void read_f32(std::ifstream& f, double* data, size_t n) {
  std::vector<float> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(n * 4));
  check(f.good(), "dataset record truncated");
  for (size_t i = 0; i < n; ++i) data[i] = buf[i];
}

void write_header(std::ofstream& f, const char magic[8], uint32_t h, uint32_t w) {
  f.write(magic, 8);
  f.write(reinterpret_cast<const char*>(&h), 4);
  f.write(reinterpret_cast<const char*>(&w), 4);
}

void read_header(std::ifstream& f, const char magic[8], uint32_t* h, uint32_t* w) {
  char m[8];
  f.read(m, 8);
  check(f.good() && std::memcmp(m, magic, 8) == 0, "bad dataset record magic");
  f.read(reinterpret_cast<char*>(h), 4);
  f.read(reinterpret_cast<char*>(w), 4);
  check(f.good(), "dataset record truncated header");
}

std::vector<std::string> read_index(const std::string& dir) {
  std::ifstream idx(fs::path(dir) / "index.txt");
  check(idx.good(), "missing dataset index: " + dir + "/index.txt");
  std::vector<std::string> names;
  std::string line;
  while (std::getline(idx, line))
    if (!line.empty()) names.push_back(line);
  return names;
}

constexpr char kSegMagic[8] = {'M', 'W', 'S', 'E', 'G', '0', '1', '\n'};
constexpr char kFlowMagic[8] = {'M', 'W', 'F', 'L', 'O', '0', '1', '\n'};

}  // namespace

void write_seg_dataset(const std::string& dir, const std::vector<SegSample>& samples) {
  fs::create_directories(dir);
  std::ofstream idx(fs::path(dir) / "index.txt");
  for (size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "seg_%05zu.bin", i);
    idx << name << '\n';
    std::ofstream f(fs::path(dir) / name, std::ios::binary);
    const auto& s = samples[i];
    write_header(f, kSegMagic, uint32_t(s.height), uint32_t(s.width));
    write_f32(f, s.image.data(), s.image.size());
    std::vector<double> lbl(s.labels.begin(), s.labels.end());
    write_f32(f, lbl.data(), lbl.size());
    check(f.good(), "dataset write failed");
  }
}

std::vector<SegSample> read_seg_dataset(const std::string& dir) {
  std::vector<SegSample> out;
  for (const auto& name : read_index(dir)) {
    std::ifstream f(fs::path(dir) / name, std::ios::binary);
    check(f.good(), "cannot open dataset record: " + name);
    uint32_t h = 0, w = 0;
    read_header(f, kSegMagic, &h, &w);
    SegSample s;
    s.height = int(h);
    s.width = int(w);
    s.image.resize(size_t(h) * w * 3);
    read_f32(f, s.image.data(), s.image.size());
    std::vector<double> lbl(size_t(h) * w);
    read_f32(f, lbl.data(), lbl.size());
    s.labels.resize(lbl.size());
    for (size_t i = 0; i < lbl.size(); ++i) s.labels[i] = static_cast<int>(std::lround(lbl[i]));
    out.push_back(std::move(s));
  }
  return out;
}

void write_flow_dataset(const std::string& dir, const std::vector<FlowSample>& samples) {
  fs::create_directories(dir);
  std::ofstream idx(fs::path(dir) / "index.txt");
  for (size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "flow_%05zu.bin", i);
    idx << name << '\n';
    std::ofstream f(fs::path(dir) / name, std::ios::binary);
    const auto& s = samples[i];
    write_header(f, kFlowMagic, uint32_t(s.height), uint32_t(s.width));
    write_f32(f, s.frame1.data(), s.frame1.size());
    write_f32(f, s.frame2.data(), s.frame2.size());
    write_f32(f, s.flow.u.data(), s.flow.u.size());
    write_f32(f, s.flow.v.data(), s.flow.v.size());
    std::vector<double> val(s.flow.valid.begin(), s.flow.valid.end());
    write_f32(f, val.data(), val.size());
    check(f.good(), "dataset write failed");
  }
}

std::vector<FlowSample> read_flow_dataset(const std::string& dir) {
  std::vector<FlowSample> out;
  for (const auto& name : read_index(dir)) {
    std::ifstream f(fs::path(dir) / name, std::ios::binary);
    check(f.good(), "cannot open dataset record: " + name);
    uint32_t h = 0, w = 0;
    read_header(f, kFlowMagic, &h, &w);
    FlowSample s;
    s.height = int(h);
    s.width = int(w);
    s.frame1.resize(size_t(h) * w * 3);
    s.frame2.resize(size_t(h) * w * 3);
    s.flow.resize(int(w), int(h));
    read_f32(f, s.frame1.data(), s.frame1.size());
    read_f32(f, s.frame2.data(), s.frame2.size());
    read_f32(f, s.flow.u.data(), s.flow.u.size());
    read_f32(f, s.flow.v.data(), s.flow.v.size());
    std::vector<double> val(size_t(h) * w);
    read_f32(f, val.data(), val.size());
    for (size_t i = 0; i < val.size(); ++i) s.flow.valid[i] = val[i] > 0.5 ? 1 : 0;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace multiwin
