#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "s3vos/data.hpp"

namespace s3vos {

LabelMask::LabelMask(int h, int w)
    : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}

std::set<int> LabelMask::ids() const {
  std::set<int> s;
  for (auto v : labels)
    if (v != 0) s.insert(v);
  return s;
}

std::vector<std::uint8_t> LabelMask::binary(int id) const {
  std::vector<std::uint8_t> b(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) b[i] = labels[i] == id ? 1 : 0;
  return b;
}

std::vector<Color> default_palette() {
  std::vector<Color> pal(256);
  for (int i = 0; i < 256; ++i) {
    int c = i;
    int r = 0, g = 0, b = 0;
    for (int j = 0; j < 8; ++j) {
      r |= ((c >> 0) & 1) << (7 - j);
      g |= ((c >> 1) & 1) << (7 - j);
      b |= ((c >> 2) & 1) << (7 - j);
      c >>= 3;
    }
    pal[static_cast<std::size_t>(i)] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                        static_cast<std::uint8_t>(b)};
  }
  return pal;
}

std::string frame_name(int t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d.png", t);
  return buf;
}

std::filesystem::path frame_path(const std::filesystem::path& root, const std::string& seq, int t) {
  return root / "JPEGImages" / seq / frame_name(t);
}

std::filesystem::path annotation_path(const std::filesystem::path& root, const std::string& seq,
                                      int t) {
  return root / "Annotations" / seq / frame_name(t);
}

void save_dataset(const std::filesystem::path& root, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const auto& s : ds.sequences) {
    fs::create_directories(root / "JPEGImages" / s.name, ec);
    if (!ec) fs::create_directories(root / "Annotations" / s.name, ec);
    if (ec) {
      throw std::runtime_error("cannot create dataset directory under " + root.string() + ": " +
                               ec.message());
    }
    for (std::size_t t = 0; t < s.frames.size(); ++t) {
      write_rgb(frame_path(root, s.name, static_cast<int>(t)), s.frames[t]);
      write_mask(annotation_path(root, s.name, static_cast<int>(t)), s.masks[t]);
    }
  }
}

Dataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const fs::path images = root / "JPEGImages";
  const fs::path annos = root / "Annotations";
  if (!fs::is_directory(images) || !fs::is_directory(annos)) {
    throw std::runtime_error("dataset root " + root.string() +
                             " must contain JPEGImages/ and Annotations/");
  }
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(images))
    if (e.is_directory()) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  Dataset ds;
  for (const auto& n : names) {
    Sequence s;
    s.name = n;
    for (int t = 0;; ++t) {
      const auto fp = frame_path(root, n, t);
      if (!fs::exists(fp)) break;
      s.frames.push_back(read_rgb(fp));
      const auto ap = annotation_path(root, n, t);
      if (!fs::exists(ap)) throw std::runtime_error("missing annotation " + ap.string());
      s.masks.push_back(read_mask(ap));
    }
    if (!s.frames.empty()) ds.sequences.push_back(std::move(s));
  }
  return ds;
}

double centroid_x(const LabelMask& mask, int id) {
  double sx = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(y, x) == id) {
        sx += x;
        ++n;
      }
    }
  }
  return n == 0 ? -1.0 : sx / static_cast<double>(n);
}

namespace {

struct Shape {
  std::string kind;  // disk, rectangle, triangle, bar
  double cx = 0, cy = 0;
  double rx = 0, ry = 0;  // half extents
  double vx = 0, vy = 0;
  double color[3] = {0, 0, 0};
  int label = 0;  // 0 for distractors painted without a label
  bool bounce = true;
};

bool covers(const Shape& s, double x, double y) {
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  if (s.kind == "disk") return (dx * dx) / (s.rx * s.rx) + (dy * dy) / (s.ry * s.ry) <= 1.0;
  if (s.kind == "rectangle" || s.kind == "bar") return std::abs(dx) <= s.rx && std::abs(dy) <= s.ry;
  // Upward isosceles triangle inscribed in the bounding box.
  const double t = (dy + s.ry) / (2.0 * s.ry);
  if (t < 0.0 || t > 1.0) return false;
  return std::abs(dx) <= s.rx * t;
}

void step(Shape& s, int height, int width) {
  s.cx += s.vx;
  s.cy += s.vy;
  if (!s.bounce) return;
  if (s.cx - s.rx < 0) {
    s.cx = s.rx + (s.rx - s.cx);
    s.vx = std::abs(s.vx);
  }
  if (s.cx + s.rx > width - 1) {
    s.cx = (width - 1 - s.rx) - (s.cx + s.rx - (width - 1));
    s.vx = -std::abs(s.vx);
  }
  if (s.cy - s.ry < 0) {
    s.cy = s.ry + (s.ry - s.cy);
    s.vy = std::abs(s.vy);
  }
  if (s.cy + s.ry > height - 1) {
    s.cy = (height - 1 - s.ry) - (s.cy + s.ry - (height - 1));
    s.vy = -std::abs(s.vy);
  }
}

void hsv_to_rgb(double h, double s, double v, double* rgb) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

class SceneBuilder {
 public:
  SceneBuilder(const SyntheticSpec& spec, Rng& rng) : spec_(spec), rng_(rng) {}

  double uni(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int pick(int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng_); }

  Shape random_shape(int label) {
    Shape s;
    s.kind = spec_.shapes[static_cast<std::size_t>(pick(static_cast<int>(spec_.shapes.size())))];
    const double base = std::min(spec_.height, spec_.width);
    s.rx = uni(base / 10.0, base / 5.5);
    s.ry = s.kind == "disk" ? s.rx * uni(0.8, 1.2) : uni(base / 10.0, base / 5.5);
    s.cx = uni(s.rx + 1, spec_.width - 2 - s.rx);
    s.cy = uni(s.ry + 1, spec_.height - 2 - s.ry);
    const double speed = uni(spec_.min_speed, spec_.max_speed);
    const double ang = uni(0.0, 2.0 * M_PI);
    s.vx = speed * std::cos(ang);
    s.vy = speed * std::sin(ang);
    hsv_to_rgb(uni(0.0, 1.0), uni(0.6, 1.0), uni(0.6, 1.0), s.color);
    s.label = label;
    return s;
  }

  // Background: two-color gradient with a low-frequency ripple.
  void background(double* c0, double* c1, double& fx, double& fy, double& phase) {
    hsv_to_rgb(uni(0.0, 1.0), uni(0.1, 0.4), uni(0.2, 0.5), c0);
    hsv_to_rgb(uni(0.0, 1.0), uni(0.1, 0.4), uni(0.2, 0.5), c1);
    fx = uni(0.05, 0.25);
    fy = uni(0.05, 0.25);
    phase = uni(0.0, 2.0 * M_PI);
  }

 private:
  const SyntheticSpec& spec_;
  Rng& rng_;
};

struct Render {
  Image image;
  LabelMask mask;
};

Render render(const std::vector<Shape>& shapes, int height, int width, const double* c0,
              const double* c1, double fx, double fy, double phase, Rng& noise_rng) {
  Render r;
  r.image.height = height;
  r.image.width = width;
  r.image.rgb = Tensor(static_cast<std::size_t>(height) * width, 3);
  r.mask = LabelMask(height, width);
  r.mask.palette = default_palette();
  std::normal_distribution<double> noise(0.0, 0.02);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * width + x;
      const double t = (static_cast<double>(x) / width + static_cast<double>(y) / height) / 2.0;
      const double ripple = 0.05 * std::sin(fx * x + fy * y + phase);
      double rgb[3];
      for (int c = 0; c < 3; ++c) rgb[c] = (1 - t) * c0[c] + t * c1[c] + ripple;
      for (const auto& s : shapes) {
        if (!covers(s, x + 0.5, y + 0.5)) continue;
        // Mild shading so objects are not flat color.
        const double shade = 0.9 + 0.1 * ((x + y) % 4 < 2 ? 1.0 : 0.0);
        for (int c = 0; c < 3; ++c) rgb[c] = s.color[c] * shade;
        r.mask.labels[p] = static_cast<std::uint8_t>(s.label);
      }
      for (int c = 0; c < 3; ++c) r.image.rgb(p, static_cast<std::size_t>(c)) = std::clamp(rgb[c] + noise(noise_rng), 0.0, 1.0);
    }
  }
  return r;
}

bool any_overlap(const std::vector<Shape>& shapes, int height, int width) {
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      int hits = 0;
      for (const auto& s : shapes)
        if (s.label != 0 && covers(s, x + 0.5, y + 0.5)) ++hits;
      if (hits > 1) return true;
    }
  }
  return false;
}

Sequence make_sequence(const SyntheticSpec& spec, const std::string& scenario, int index, Rng& rng) {
  SceneBuilder b(spec, rng);
  const int h = spec.height;
  const int w = spec.width;
  const int frames = spec.frames_per_seq;
  double c0[3], c1[3], fx, fy, phase;
  b.background(c0, c1, fx, fy, phase);

  std::vector<Shape> shapes;
  if (scenario == "crossing") {
    // Two look-alike objects swap sides along straight paths.
    Shape a = b.random_shape(1);
    Shape c = a;
    c.label = 2;
    double hsv_jitter[3];
    hsv_to_rgb(b.uni(0.0, 1.0), 0.8, 0.9, hsv_jitter);
    for (int k = 0; k < 3; ++k) c.color[k] = std::clamp(a.color[k] + 0.1 * (hsv_jitter[k] - 0.5), 0.0, 1.0);
    const double margin = std::max(a.rx, c.rx) + 1.0;
    a.cx = margin;
    c.cx = w - 1 - margin;
    a.cy = h * b.uni(0.3, 0.45);
    c.cy = h * b.uni(0.55, 0.7);
    a.vx = (c.cx - a.cx) / (frames - 1);
    c.vx = -a.vx;
    a.vy = c.vy = 0.0;
    a.bounce = c.bounce = false;
    shapes = {a, c};
    for (int k = 3; k <= spec.num_objects; ++k) shapes.push_back(b.random_shape(k));
  } else if (scenario == "occlusion") {
    // Object 1 passes behind object 2, which drifts slowly mid-frame.
    Shape front = b.random_shape(2);
    front.cx = w / 2.0;
    front.cy = h / 2.0;
    front.vx = b.uni(-0.2, 0.2);
    front.vy = b.uni(-0.2, 0.2);
    Shape back = b.random_shape(1);
    back.cy = h / 2.0 + b.uni(-front.ry / 2, front.ry / 2);
    back.cx = back.rx + 1.0;
    back.vx = (w - 2.0 - 2 * back.rx) / (frames - 1);
    back.vy = 0.0;
    back.bounce = false;
    shapes = {back, front};
    for (int k = 3; k <= spec.num_objects; ++k) shapes.push_back(b.random_shape(k));
  } else if (scenario == "part-split") {
    // A wide object is cut into two visible parts by an unlabeled bar.
    Shape wide;
    wide.kind = "rectangle";
    wide.rx = w * 0.3;
    wide.ry = h * b.uni(0.08, 0.14);
    wide.cx = w / 2.0;
    wide.cy = h / 2.0;
    wide.vx = b.uni(-0.3, 0.3);
    wide.vy = b.uni(-0.3, 0.3);
    hsv_to_rgb(b.uni(0.0, 1.0), 0.9, 0.9, wide.color);
    wide.label = 1;
    Shape bar;
    bar.kind = "bar";
    bar.rx = w * 0.05;
    bar.ry = h * 0.5;
    bar.cx = w * 0.15;
    bar.cy = h / 2.0;
    bar.vx = (w * 0.7) / (frames - 1);
    bar.vy = 0.0;
    bar.bounce = false;
    hsv_to_rgb(b.uni(0.0, 1.0), 0.2, 0.3, bar.color);
    bar.label = 0;
    shapes = {wide};
    for (int k = 2; k <= spec.num_objects; ++k) shapes.push_back(b.random_shape(k));
    shapes.push_back(bar);
  } else {
    for (int attempt = 0;; ++attempt) {
      shapes.clear();
      for (int k = 1; k <= spec.num_objects; ++k) shapes.push_back(b.random_shape(k));
      if (spec.allow_overlap) break;
      bool ok = true;
      std::vector<Shape> sim = shapes;
      for (int t = 0; t < frames && ok; ++t) {
        if (any_overlap(sim, h, w)) ok = false;
        for (auto& s : sim) step(s, h, w);
      }
      if (ok) break;
      if (attempt > 500) {
        throw std::runtime_error("generate_synthetic: cannot place non-overlapping objects; "
                                 "reduce num_objects or frames");
      }
    }
  }

  Sequence seq;
  char name[64];
  std::snprintf(name, sizeof(name), "seq%03d_%s", index, scenario.c_str());
  seq.name = name;
  seq.scenario = scenario;
  for (int t = 0; t < frames; ++t) {
    Render r = render(shapes, h, w, c0, c1, fx, fy, phase, rng);
    seq.frames.push_back(std::move(r.image));
    seq.masks.push_back(std::move(r.mask));
    for (auto& s : shapes) step(s, h, w);
  }
  return seq;
}

}  // namespace

Dataset generate_sequences(const SyntheticSpec& spec) {
  spec.validate();
  if ((spec.scenario == "crossing" || spec.scenario == "occlusion") && spec.num_objects < 2) {
    throw std::invalid_argument("synthetic spec: scenario '" + spec.scenario +
                                "' needs at least 2 objects");
  }
  Rng rng(spec.seed);
  static const char* kMixed[] = {"random", "crossing", "occlusion", "part-split"};
  Dataset ds;
  for (int i = 0; i < spec.num_sequences; ++i) {
    std::string scenario = spec.scenario;
    if (scenario == "mixed") {
      scenario = kMixed[i % 4];
      if (spec.num_objects < 2 && (scenario == "crossing" || scenario == "occlusion")) {
        scenario = "random";
      }
    }
    ds.sequences.push_back(make_sequence(spec, scenario, i, rng));
  }
  return ds;
}

void generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& root) {
  save_dataset(root, generate_sequences(spec));
}

}  // namespace s3vos
