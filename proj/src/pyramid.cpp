#include "tfd/pyramid.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

#include "tfd/backbone.hpp"

namespace tfd {

namespace {

Tensor zero_bias(int c) { return Tensor::zeros(Shape{1, 1, 1, c}); }

}  // namespace

FpnParams init_fpn(int c3, int c4, int c5, int d, Rng& rng) {
  FpnParams p;
  p.lat3_w = he_conv_init(1, 1, c3, d, rng);
  p.lat3_b = zero_bias(d);
  p.lat4_w = he_conv_init(1, 1, c4, d, rng);
  p.lat4_b = zero_bias(d);
  p.lat5_w = he_conv_init(1, 1, c5, d, rng);
  p.lat5_b = zero_bias(d);
  p.smooth3_w = he_conv_init(3, 3, d, d, rng);
  p.smooth3_b = zero_bias(d);
  p.smooth4_w = he_conv_init(3, 3, d, d, rng);
  p.smooth4_b = zero_bias(d);
  p.smooth5_w = he_conv_init(3, 3, d, d, rng);
  p.smooth5_b = zero_bias(d);
  p.down6_w = he_conv_init(3, 3, d, d, rng);
  p.down6_b = zero_bias(d);
  p.down7_w = he_conv_init(3, 3, d, d, rng);
  p.down7_b = zero_bias(d);
  return p;
}

std::vector<std::pair<std::string, Tensor>> named_params(const FpnParams& params) {
  return {
      {"fpn.lat3.weights", params.lat3_w},       {"fpn.lat3.bias", params.lat3_b},
      {"fpn.lat4.weights", params.lat4_w},       {"fpn.lat4.bias", params.lat4_b},
      {"fpn.lat5.weights", params.lat5_w},       {"fpn.lat5.bias", params.lat5_b},
      {"fpn.smooth3.weights", params.smooth3_w}, {"fpn.smooth3.bias", params.smooth3_b},
      {"fpn.smooth4.weights", params.smooth4_w}, {"fpn.smooth4.bias", params.smooth4_b},
      {"fpn.smooth5.weights", params.smooth5_w}, {"fpn.smooth5.bias", params.smooth5_b},
      {"fpn.down6.weights", params.down6_w},     {"fpn.down6.bias", params.down6_b},
      {"fpn.down7.weights", params.down7_w},     {"fpn.down7.bias", params.down7_b},
  };
}

Pyramid build_pyramid(const Tensor& b3, const Tensor& b4, const Tensor& b5, const FpnParams& params) {
  const Shape s3 = b3.shape(), s4 = b4.shape(), s5 = b5.shape();
  if (s4.h * 2 != s3.h || s4.w * 2 != s3.w) {
    throw ShapeError("height", "b4 must be half of b3: got " + s4.str() + " vs " + s3.str());
  }
  if (s5.h * 2 != s4.h || s5.w * 2 != s4.w) {
    throw ShapeError("height", "b5 must be half of b4: got " + s5.str() + " vs " + s4.str());
  }
  if (s3.h % 16 != 0 || s3.w % 16 != 0) {
    throw ShapeError("height", "pyramid needs b3 dims divisible by 16 so p7 stays integral, got " +
                                   s3.str());
  }

  Tensor l3 = conv2d(b3, params.lat3_w, params.lat3_b, 1, Padding::Same);
  Tensor l4 = conv2d(b4, params.lat4_w, params.lat4_b, 1, Padding::Same);
  Tensor l5 = conv2d(b5, params.lat5_w, params.lat5_b, 1, Padding::Same);

  Tensor t5 = l5;
  Tensor t4 = add(l4, upsample_nearest2(t5));
  Tensor t3 = add(l3, upsample_nearest2(t4));

  Pyramid out;
  out.p3 = conv2d(t3, params.smooth3_w, params.smooth3_b, 1, Padding::Same);
  out.p4 = conv2d(t4, params.smooth4_w, params.smooth4_b, 1, Padding::Same);
  out.p5 = conv2d(t5, params.smooth5_w, params.smooth5_b, 1, Padding::Same);
  out.p6 = conv2d(out.p5, params.down6_w, params.down6_b, 2, Padding::Same);
  out.p7 = conv2d(relu(out.p6), params.down7_w, params.down7_b, 2, Padding::Same);
  return out;
}

HeadParams init_heads(int d, int trunk_convs, int num_classes, int anchors_per_cell,
                      double prior_pi, Rng& rng) {
  if (trunk_convs < 0) throw std::invalid_argument("init_heads: trunk_convs must be >= 0");
  if (num_classes <= 0) throw std::invalid_argument("init_heads: num_classes must be positive");
  HeadParams p;
  p.num_classes = num_classes;
  p.anchors_per_cell = anchors_per_cell;
  for (int i = 0; i < trunk_convs; ++i) {
    p.cls_w.push_back(he_conv_init(3, 3, d, d, rng));
    p.cls_b.push_back(zero_bias(d));
  }
  // final classifier starts predicting probability prior_pi everywhere so the
  // focal loss is not swamped by background at step 0
  Tensor cls_out_w(Shape{3, 3, d, anchors_per_cell * num_classes});
  for (std::int64_t i = 0; i < cls_out_w.numel(); ++i) cls_out_w.data()[i] = rng.normal(0.0, 0.01);
  p.cls_w.push_back(cls_out_w);
  p.cls_b.push_back(Tensor::full(Shape{1, 1, 1, anchors_per_cell * num_classes},
                                 -std::log((1.0 - prior_pi) / prior_pi)));

  for (int i = 0; i < trunk_convs; ++i) {
    p.box_w.push_back(he_conv_init(3, 3, d, d, rng));
    p.box_b.push_back(zero_bias(d));
  }
  Tensor box_out_w(Shape{3, 3, d, anchors_per_cell * 4});
  for (std::int64_t i = 0; i < box_out_w.numel(); ++i) box_out_w.data()[i] = rng.normal(0.0, 0.01);
  p.box_w.push_back(box_out_w);
  p.box_b.push_back(zero_bias(anchors_per_cell * 4));
  return p;
}

std::vector<std::pair<std::string, Tensor>> named_params(const HeadParams& params) {
  std::vector<std::pair<std::string, Tensor>> out;
  const auto add_branch = [&out](const std::string& branch, const std::vector<Tensor>& ws,
                                 const std::vector<Tensor>& bs) {
    for (std::size_t i = 0; i < ws.size(); ++i) {
      const bool last = i + 1 == ws.size();
      const std::string stem = "head." + branch + (last ? ".out" : ".conv" + std::to_string(i + 1));
      out.emplace_back(stem + ".weights", ws[i]);
      out.emplace_back(stem + ".bias", bs[i]);
    }
  };
  add_branch("cls", params.cls_w, params.cls_b);
  add_branch("box", params.box_w, params.box_b);
  return out;
}

HeadOutput run_head(const Tensor& level, const HeadParams& params) {
  HeadOutput out;
  Tensor x = level;
  for (std::size_t i = 0; i + 1 < params.cls_w.size(); ++i) {
    x = relu(conv2d(x, params.cls_w[i], params.cls_b[i], 1, Padding::Same));
  }
  out.cls = conv2d(x, params.cls_w.back(), params.cls_b.back(), 1, Padding::Same);
  x = level;
  for (std::size_t i = 0; i + 1 < params.box_w.size(); ++i) {
    x = relu(conv2d(x, params.box_w[i], params.box_b[i], 1, Padding::Same));
  }
  out.box = conv2d(x, params.box_w.back(), params.box_b.back(), 1, Padding::Same);
  return out;
}

std::vector<Box> make_anchors(const AnchorConfig& config, int level_index, int h, int w) {
  if (level_index < 0 || level_index >= static_cast<int>(config.strides.size())) {
    throw std::out_of_range("make_anchors: level index " + std::to_string(level_index));
  }
  const double stride = config.strides[static_cast<std::size_t>(level_index)];
  const double base = config.base_scale * stride;
  std::vector<Box> anchors;
  anchors.reserve(static_cast<std::size_t>(h) * w * config.per_cell());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double cx = (x + 0.5) * stride;
      const double cy = (y + 0.5) * stride;
      for (double s : config.scales) {
        for (double r : config.aspect_ratios) {
          const double size = base * s;
          const double aw = size / std::sqrt(r);
          const double ah = size * std::sqrt(r);
          anchors.push_back(Box{cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2});
        }
      }
    }
  }
  return anchors;
}

void dump_anchors(std::ostream& os, const AnchorConfig& config,
                  const std::vector<std::pair<int, int>>& level_dims) {
  for (std::size_t i = 0; i < level_dims.size(); ++i) {
    const auto anchors = make_anchors(config, static_cast<int>(i), level_dims[i].first,
                                      level_dims[i].second);
    for (const Box& a : anchors) {
      os << (i + 3) << ' ' << a.cx() << ' ' << a.cy() << ' ' << a.width() << ' ' << a.height()
         << '\n';
    }
  }
}

std::array<double, 4> encode_box(const Box& anchor, const Box& target) {
  return {(target.cx() - anchor.cx()) / anchor.width(),
          (target.cy() - anchor.cy()) / anchor.height(),
          std::log(target.width() / anchor.width()),
          std::log(target.height() / anchor.height())};
}

Box decode_box(const Box& anchor, const std::array<double, 4>& deltas) {
  const double cx = anchor.cx() + deltas[0] * anchor.width();
  const double cy = anchor.cy() + deltas[1] * anchor.height();
  const double w = anchor.width() * std::exp(std::min(deltas[2], 8.0));
  const double h = anchor.height() * std::exp(std::min(deltas[3], 8.0));
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

double focal_loss_term(double p_prime, double gamma, double alpha_t) {
  const double p = std::min(std::max(p_prime, 1e-7), 1.0);
  return -alpha_t * std::pow(1.0 - p, gamma) * std::log(p);
}

std::vector<double> alpha_from_frequency(const std::vector<std::int64_t>& class_counts,
                                         double mean_alpha) {
  if (class_counts.empty()) throw std::invalid_argument("alpha_from_frequency: no classes");
  double inv_sum = 0.0;
  for (std::int64_t c : class_counts) {
    if (c <= 0) {
      throw std::invalid_argument(
          "alpha_from_frequency: class with zero instances; drop it from the class list");
    }
    inv_sum += 1.0 / static_cast<double>(c);
  }
  const double k = mean_alpha * static_cast<double>(class_counts.size()) / inv_sum;
  std::vector<double> alphas;
  alphas.reserve(class_counts.size());
  for (std::int64_t c : class_counts) {
    const double a = k / static_cast<double>(c);
    if (a >= 1.0) {
      throw std::invalid_argument("alpha_from_frequency: imbalance pushes alpha past 1");
    }
    alphas.push_back(a);
  }
  return alphas;
}

std::vector<int> match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gt_boxes,
                               double iou_fg, double iou_bg) {
  std::vector<int> assignment(anchors.size(), kAnchorNegative);
  if (gt_boxes.empty()) return assignment;

  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const double v = iou(anchors[a], gt_boxes[g]);
      if (v > best) {  // strict: ties keep the lowest gt index
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best >= iou_fg) {
      assignment[a] = best_gt;
    } else if (best < iou_bg) {
      assignment[a] = kAnchorNegative;
    } else {
      assignment[a] = kAnchorIgnore;
    }
  }

  // every gt keeps its best anchor even below the foreground threshold
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    double best = 0.0;
    int best_a = -1;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      const double v = iou(anchors[a], gt_boxes[g]);
      if (v > best) {
        best = v;
        best_a = static_cast<int>(a);
      }
    }
    if (best_a >= 0) assignment[static_cast<std::size_t>(best_a)] = static_cast<int>(g);
  }
  return assignment;
}

Targets build_targets(const std::vector<std::vector<Box>>& anchors_per_level,
                      const std::vector<Box>& gt_boxes, const std::vector<int>& gt_classes,
                      int num_classes, double iou_fg, double iou_bg) {
  if (gt_boxes.size() != gt_classes.size()) {
    throw std::invalid_argument("build_targets: gt box/class count mismatch");
  }
  std::vector<Box> flat;
  for (const auto& level : anchors_per_level) flat.insert(flat.end(), level.begin(), level.end());
  const std::vector<int> assignment = match_anchors(flat, gt_boxes, iou_fg, iou_bg);

  Targets out;
  std::size_t offset = 0;
  for (const auto& level : anchors_per_level) {
    LevelTargets lt;
    lt.cls.assign(level.size() * static_cast<std::size_t>(num_classes), 0);
    lt.box.assign(level.size() * 4, 0.0);
    lt.box_mask.assign(level.size() * 4, 0);
    for (std::size_t a = 0; a < level.size(); ++a) {
      const int as = assignment[offset + a];
      if (as == kAnchorIgnore) {
        for (int c = 0; c < num_classes; ++c) lt.cls[a * num_classes + c] = -1;
      } else if (as >= 0) {
        ++out.num_positive;
        const int cls = gt_classes[static_cast<std::size_t>(as)];
        if (cls < 0 || cls >= num_classes) {
          throw std::invalid_argument("build_targets: gt class " + std::to_string(cls) +
                                      " outside [0," + std::to_string(num_classes) + ")");
        }
        lt.cls[a * num_classes + static_cast<std::size_t>(cls)] = 1;
        const auto deltas = encode_box(level[a], gt_boxes[static_cast<std::size_t>(as)]);
        for (int i = 0; i < 4; ++i) {
          lt.box[a * 4 + static_cast<std::size_t>(i)] = deltas[static_cast<std::size_t>(i)];
          lt.box_mask[a * 4 + static_cast<std::size_t>(i)] = 1;
        }
      }
    }
    out.levels.push_back(std::move(lt));
    offset += level.size();
  }
  return out;
}

Tensor sigmoid_focal_loss(const Tensor& logits, const std::vector<signed char>& targets,
                          const std::vector<double>& alphas, int num_classes, double gamma,
                          double inv_norm) {
  const std::int64_t n = logits.numel();
  if (static_cast<std::int64_t>(targets.size()) != n) {
    throw ShapeError("channels", "focal loss target count " + std::to_string(targets.size()) +
                                     " != logit count " + std::to_string(n));
  }
  if (static_cast<int>(alphas.size()) != num_classes) {
    throw std::invalid_argument("focal loss needs one alpha per class");
  }
  if (logits.shape().c % num_classes != 0) {
    throw ShapeError("channels", "logit channels must be a multiple of num_classes");
  }
  constexpr double kEps = 1e-7;
  const double* z = logits.data();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const signed char t = targets[static_cast<std::size_t>(i)];
    if (t < 0) continue;
    const double a = alphas[static_cast<std::size_t>(i % num_classes)];
    double p = 1.0 / (1.0 + std::exp(-z[i]));
    p = std::min(std::max(p, kEps), 1.0 - kEps);
    if (t == 1) {
      total += -a * std::pow(1.0 - p, gamma) * std::log(p);
    } else {
      total += -(1.0 - a) * std::pow(p, gamma) * std::log(1.0 - p);
    }
  }
  Tensor out = Tensor::scalar(total * inv_norm);

  if (GradTape::current() != nullptr && logits.requires_grad()) {
    out.set_requires_grad(true);
    Tensor lt = logits;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      const double g0 = go[0] * inv_norm;
      double* dz = lt.grad().data();
      const double* zz = lt.data();
      for (std::int64_t i = 0; i < n; ++i) {
        const signed char t = targets[static_cast<std::size_t>(i)];
        if (t < 0) continue;
        const double a = alphas[static_cast<std::size_t>(i % num_classes)];
        double p = 1.0 / (1.0 + std::exp(-zz[i]));
        p = std::min(std::max(p, kEps), 1.0 - kEps);
        double d;
        if (t == 1) {
          d = a * std::pow(1.0 - p, gamma) * (gamma * p * std::log(p) - (1.0 - p));
        } else {
          d = (1.0 - a) * std::pow(p, gamma) * (p - gamma * (1.0 - p) * std::log(1.0 - p));
        }
        dz[i] += g0 * d;
      }
    });
  }
  return out;
}

Tensor smooth_l1_loss(const Tensor& pred, const std::vector<double>& targets,
                      const std::vector<unsigned char>& mask, double beta, double inv_norm) {
  const std::int64_t n = pred.numel();
  if (static_cast<std::int64_t>(targets.size()) != n ||
      static_cast<std::int64_t>(mask.size()) != n) {
    throw ShapeError("channels", "smooth-l1 target/mask count must match prediction count");
  }
  if (beta <= 0.0) throw std::invalid_argument("smooth_l1_loss: beta must be positive");
  const double* x = pred.data();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const double d = x[i] - targets[static_cast<std::size_t>(i)];
    const double ad = std::abs(d);
    total += ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
  }
  Tensor out = Tensor::scalar(total * inv_norm);

  if (GradTape::current() != nullptr && pred.requires_grad()) {
    out.set_requires_grad(true);
    Tensor pt = pred;
    GradTape::current()->record(out, [=](const std::vector<double>& go) mutable {
      const double g0 = go[0] * inv_norm;
      double* dx = pt.grad().data();
      const double* xx = pt.data();
      for (std::int64_t i = 0; i < n; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const double d = xx[i] - targets[static_cast<std::size_t>(i)];
        dx[i] += g0 * (std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0));
      }
    });
  }
  return out;
}

}  // namespace tfd
