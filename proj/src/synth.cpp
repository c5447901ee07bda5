#include "tfd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "tfd/rng.hpp"
#include "tfd/serialize.hpp"

namespace tfd {

void SceneConfig::validate() const {
  if (image_size < 32) throw std::invalid_argument("image_size must be >= 32");
  if (length < 1) throw std::invalid_argument("length must be >= 1");
  if (num_objects_min < 0 || num_objects_max < num_objects_min) {
    throw std::invalid_argument("bad object count range");
  }
  if (num_classes < 1 || num_classes > 4) {
    throw std::invalid_argument("num_classes must lie in [1,4]");
  }
  if (speed_min < 0 || speed_max < speed_min) throw std::invalid_argument("bad speed range");
  if (size_min < 2 || size_max < size_min) throw std::invalid_argument("bad size range");
  if (size_max >= image_size / 2.0) {
    throw std::invalid_argument("objects of size " + std::to_string(size_max) +
                                " do not fit a " + std::to_string(image_size) + "px image");
  }
  if (occlusion_rate < 0 || occlusion_rate > 1) throw std::invalid_argument("bad occlusion_rate");
  if (blur_len < 0) throw std::invalid_argument("blur_len must be >= 0");
  if (noise_sigma < 0) throw std::invalid_argument("noise_sigma must be >= 0");
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"length", c.length},
                     {"num_objects_min", c.num_objects_min},
                     {"num_objects_max", c.num_objects_max},
                     {"num_classes", c.num_classes},
                     {"speed_min", c.speed_min},
                     {"speed_max", c.speed_max},
                     {"size_min", c.size_min},
                     {"size_max", c.size_max},
                     {"occlusion_rate", c.occlusion_rate},
                     {"blur_len", c.blur_len},
                     {"noise_sigma", c.noise_sigma},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  SceneConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.length = j.value("length", d.length);
  c.num_objects_min = j.value("num_objects_min", d.num_objects_min);
  c.num_objects_max = j.value("num_objects_max", d.num_objects_max);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.speed_min = j.value("speed_min", d.speed_min);
  c.speed_max = j.value("speed_max", d.speed_max);
  c.size_min = j.value("size_min", d.size_min);
  c.size_max = j.value("size_max", d.size_max);
  c.occlusion_rate = j.value("occlusion_rate", d.occlusion_rate);
  c.blur_len = j.value("blur_len", d.blur_len);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  c.seed = j.value("seed", d.seed);
}

std::vector<GroundTruthBox> Sequence::all_gt() const {
  std::vector<GroundTruthBox> out;
  for (const auto& frame : gt) out.insert(out.end(), frame.begin(), frame.end());
  return out;
}

namespace {

struct MovingObject {
  int class_id = 0;
  double w = 0, h = 0;
  std::array<double, 3> color{};
  std::vector<double> cx, cy, vx, vy;  // per frame
};

struct Occluder {
  double x1, y1, x2, y2;
};

// pixel-center inside tests per shape family
bool inside_shape(int class_id, double dx, double dy, double w, double h) {
  const double hw = w / 2, hh = h / 2;
  switch (class_id % 4) {
    case 0:  // rectangle
      return std::abs(dx) <= hw && std::abs(dy) <= hh;
    case 1:  // ellipse
      return (dx * dx) / (hw * hw) + (dy * dy) / (hh * hh) <= 1.0;
    case 2:  // upward triangle
      if (dy < -hh || dy > hh) return false;
      return std::abs(dx) <= hw * (dy + hh) / h;
    default:  // diamond
      return std::abs(dx) / hw + std::abs(dy) / hh <= 1.0;
  }
}

const std::array<std::array<double, 3>, 4> kPalette = {{{0.85, 0.25, 0.20},
                                                        {0.20, 0.80, 0.30},
                                                        {0.25, 0.40, 0.90},
                                                        {0.90, 0.85, 0.25}}};

constexpr double kBackground = 0.12;
constexpr std::array<double, 3> kOccluderColor = {0.52, 0.52, 0.52};

// Coverage of one pixel by the (possibly motion-blurred) shape: mean of the
// inside test over blur sample offsets along the velocity direction.
double coverage(const MovingObject& o, int t, double px, double py, double blur_len) {
  const double speed = std::hypot(o.vx[t], o.vy[t]);
  int samples = 1;
  double ux = 0, uy = 0;
  if (blur_len > 0 && speed > 1e-9) {
    samples = std::max(2, static_cast<int>(std::ceil(blur_len)) + 1);
    ux = o.vx[t] / speed;
    uy = o.vy[t] / speed;
  }
  double acc = 0.0;
  for (int s = 0; s < samples; ++s) {
    const double off = samples == 1 ? 0.0 : (s / double(samples - 1) - 0.5) * blur_len;
    if (inside_shape(o.class_id, px - (o.cx[t] + ux * off), py - (o.cy[t] + uy * off), o.w, o.h)) {
      acc += 1.0;
    }
  }
  return acc / samples;
}

}  // namespace

Sequence generate(const SceneConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int H = config.image_size, W = config.image_size, L = config.length;

  const int count = rng.uniform_int(config.num_objects_min, config.num_objects_max);
  std::vector<MovingObject> objects;
  for (int i = 0; i < count; ++i) {
    MovingObject o;
    o.class_id = rng.uniform_int(0, config.num_classes - 1);
    const double size = rng.uniform(config.size_min, config.size_max);
    const double aspect = rng.uniform(0.75, 1.33);
    o.w = size * std::sqrt(aspect);
    o.h = size / std::sqrt(aspect);
    o.color = kPalette[static_cast<std::size_t>(o.class_id % 4)];
    for (double& ch : o.color) ch = std::min(1.0, std::max(0.0, ch + rng.uniform(-0.06, 0.06)));

    double cx = rng.uniform(o.w / 2, W - o.w / 2);
    double cy = rng.uniform(o.h / 2, H - o.h / 2);
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    double speed = rng.uniform(config.speed_min, config.speed_max);
    double vx = speed * std::cos(angle), vy = speed * std::sin(angle);
    const double accel = 0.12 * (config.speed_max > 0 ? config.speed_max : 1.0);

    for (int t = 0; t < L; ++t) {
      o.cx.push_back(cx);
      o.cy.push_back(cy);
      o.vx.push_back(vx);
      o.vy.push_back(vy);
      cx += vx;
      cy += vy;
      // bounce off the walls, keeping the full shape inside the image
      if (cx < o.w / 2) { cx = o.w - cx; vx = -vx; }
      if (cx > W - o.w / 2) { cx = 2 * (W - o.w / 2) - cx; vx = -vx; }
      if (cy < o.h / 2) { cy = o.h - cy; vy = -vy; }
      if (cy > H - o.h / 2) { cy = 2 * (H - o.h / 2) - cy; vy = -vy; }
      vx += rng.uniform(-accel, accel);
      vy += rng.uniform(-accel, accel);
      const double sp = std::hypot(vx, vy);
      if (sp > 1e-9) {
        const double clamped = std::min(std::max(sp, config.speed_min), config.speed_max);
        vx *= clamped / sp;
        vy *= clamped / sp;
      }
    }
    objects.push_back(std::move(o));
  }

  // static occluders parked on an object's future path, plus one decoy each
  // placed independently so occluders alone never imply an object
  std::vector<Occluder> occluders;
  for (const MovingObject& o : objects) {
    if (rng.uniform() >= config.occlusion_rate) continue;
    const int t_hit = rng.uniform_int(L / 4, std::max(L / 4, 3 * L / 4));
    const double grow = rng.uniform(0.95, 1.30);
    const double ow = o.w * grow, oh = o.h * grow;
    const double ocx = o.cx[t_hit] + rng.uniform(-2.0, 2.0);
    const double ocy = o.cy[t_hit] + rng.uniform(-2.0, 2.0);
    occluders.push_back(Occluder{ocx - ow / 2, ocy - oh / 2, ocx + ow / 2, ocy + oh / 2});
    const double dw = ow * rng.uniform(0.8, 1.2), dh = oh * rng.uniform(0.8, 1.2);
    const double dcx = rng.uniform(dw / 2, W - dw / 2), dcy = rng.uniform(dh / 2, H - dh / 2);
    occluders.push_back(Occluder{dcx - dw / 2, dcy - dh / 2, dcx + dw / 2, dcy + dh / 2});
  }

  Sequence seq;
  for (int t = 0; t < L; ++t) {
    Tensor frame = Tensor::full(Shape{1, H, W, 3}, kBackground);
    double* img = frame.data();
    std::vector<GroundTruthBox> frame_gt;

    for (const MovingObject& o : objects) {
      // raster extent of the unblurred, unoccluded shape = ground truth
      int gx1 = W, gy1 = H, gx2 = -1, gy2 = -1;
      const int x_lo = std::max(0, static_cast<int>(std::floor(o.cx[t] - o.w / 2 - 1)));
      const int x_hi = std::min(W - 1, static_cast<int>(std::ceil(o.cx[t] + o.w / 2 + 1)));
      const int y_lo = std::max(0, static_cast<int>(std::floor(o.cy[t] - o.h / 2 - 1)));
      const int y_hi = std::min(H - 1, static_cast<int>(std::ceil(o.cy[t] + o.h / 2 + 1)));
      for (int y = y_lo; y <= y_hi; ++y) {
        for (int x = x_lo; x <= x_hi; ++x) {
          if (inside_shape(o.class_id, x + 0.5 - o.cx[t], y + 0.5 - o.cy[t], o.w, o.h)) {
            gx1 = std::min(gx1, x);
            gy1 = std::min(gy1, y);
            gx2 = std::max(gx2, x);
            gy2 = std::max(gy2, y);
          }
        }
      }
      if (gx2 >= gx1 && gy2 >= gy1) {
        GroundTruthBox g;
        g.frame_index = t;
        g.class_id = o.class_id;
        g.box = Box{double(gx1), double(gy1), double(gx2 + 1), double(gy2 + 1)};
        frame_gt.push_back(g);
      }

      // composite with motion blur along the velocity
      const double margin = o.w / 2 + o.h / 2 + config.blur_len + 1;
      const int bx_lo = std::max(0, static_cast<int>(std::floor(o.cx[t] - margin)));
      const int bx_hi = std::min(W - 1, static_cast<int>(std::ceil(o.cx[t] + margin)));
      const int by_lo = std::max(0, static_cast<int>(std::floor(o.cy[t] - margin)));
      const int by_hi = std::min(H - 1, static_cast<int>(std::ceil(o.cy[t] + margin)));
      for (int y = by_lo; y <= by_hi; ++y) {
        for (int x = bx_lo; x <= bx_hi; ++x) {
          const double a = coverage(o, t, x + 0.5, y + 0.5, config.blur_len);
          if (a <= 0.0) continue;
          double* px = img + (static_cast<std::int64_t>(y) * W + x) * 3;
          for (int ch = 0; ch < 3; ++ch) px[ch] = px[ch] * (1 - a) + o.color[static_cast<std::size_t>(ch)] * a;
        }
      }
    }

    for (const Occluder& oc : occluders) {
      const int x_lo = std::max(0, static_cast<int>(std::floor(oc.x1)));
      const int x_hi = std::min(W - 1, static_cast<int>(std::ceil(oc.x2)));
      const int y_lo = std::max(0, static_cast<int>(std::floor(oc.y1)));
      const int y_hi = std::min(H - 1, static_cast<int>(std::ceil(oc.y2)));
      for (int y = y_lo; y <= y_hi; ++y) {
        for (int x = x_lo; x <= x_hi; ++x) {
          if (x + 0.5 < oc.x1 || x + 0.5 > oc.x2 || y + 0.5 < oc.y1 || y + 0.5 > oc.y2) continue;
          double* px = img + (static_cast<std::int64_t>(y) * W + x) * 3;
          for (int ch = 0; ch < 3; ++ch) px[ch] = kOccluderColor[static_cast<std::size_t>(ch)];
        }
      }
    }

    if (config.noise_sigma > 0) {
      for (std::int64_t i = 0; i < frame.numel(); ++i) {
        img[i] = std::min(1.0, std::max(0.0, img[i] + rng.normal(0.0, config.noise_sigma)));
      }
    }

    seq.frames.push_back(frame);
    seq.gt.push_back(std::move(frame_gt));
  }
  return seq;
}

FrameWindow window(int sequence_length, int t, int n) {
  if (t < 0 || t >= sequence_length) {
    throw std::out_of_range("window: frame " + std::to_string(t) + " outside sequence of length " +
                            std::to_string(sequence_length));
  }
  if (n < 0) throw std::invalid_argument("window: n must be >= 0");
  FrameWindow w;
  w.center = t;
  for (int j = t - n; j <= t + n; ++j) {
    const int clamped = std::min(std::max(j, 0), sequence_length - 1);
    w.indices.push_back(clamped);
    w.replicated.push_back(clamped != j);
  }
  return w;
}

std::pair<std::vector<int>, std::vector<int>> split_sequences(int count, double val_fraction,
                                                              std::uint64_t seed) {
  if (count < 2) throw std::invalid_argument("split needs at least 2 sequences");
  if (val_fraction <= 0 || val_fraction >= 1) throw std::invalid_argument("bad val_fraction");
  std::vector<int> ids(static_cast<std::size_t>(count));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed);
  for (int i = count - 1; i > 0; --i) {
    const int j = rng.uniform_int(0, i);
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
  }
  int val_count = static_cast<int>(std::ceil(count * val_fraction));
  val_count = std::min(std::max(val_count, 1), count - 1);
  std::vector<int> val(ids.begin(), ids.begin() + val_count);
  std::vector<int> train(ids.begin() + val_count, ids.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

void save_sequence(const std::filesystem::path& dir, const Sequence& seq, const SceneConfig& config) {
  std::filesystem::create_directories(dir);
  for (int t = 0; t < seq.length(); ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%05d.bin", t);
    save_tensor(dir / name, seq.frames[static_cast<std::size_t>(t)]);
  }
  save_gt_csv(dir / "gt.csv", seq.all_gt());
  nlohmann::json j = config;
  std::ofstream out(dir / "config.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "config.json").string());
  out << j.dump(2) << '\n';
}

Sequence load_sequence(const std::filesystem::path& dir) {
  Sequence seq;
  for (int t = 0;; ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%05d.bin", t);
    const auto path = dir / name;
    if (!std::filesystem::exists(path)) break;
    seq.frames.push_back(load_tensor(path));
  }
  if (seq.frames.empty()) throw std::runtime_error("no frames found in " + dir.string());
  seq.gt.assign(seq.frames.size(), {});
  for (const GroundTruthBox& g : load_gt_csv(dir / "gt.csv")) {
    if (g.frame_index < 0 || g.frame_index >= seq.length()) {
      throw std::runtime_error("gt frame index out of range in " + dir.string());
    }
    seq.gt[static_cast<std::size_t>(g.frame_index)].push_back(g);
  }
  return seq;
}

}  // namespace tfd
