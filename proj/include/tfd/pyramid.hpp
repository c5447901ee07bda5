#pragma once

#include <array>
#include <cmath>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "tfd/box.hpp"
#include "tfd/rng.hpp"
#include "tfd/tensor.hpp"

namespace tfd {

struct Pyramid {
  Tensor p3, p4, p5, p6, p7;
  std::array<const Tensor*, 5> levels() const { return {&p3, &p4, &p5, &p6, &p7}; }
};

struct FpnParams {
  // lateral 1x1 projections of b3/b4/b5 to the pyramid width
  Tensor lat3_w, lat3_b, lat4_w, lat4_b, lat5_w, lat5_b;
  // 3x3 smoothing on the merged maps
  Tensor smooth3_w, smooth3_b, smooth4_w, smooth4_b, smooth5_w, smooth5_b;
  // stride-2 3x3 convs producing p6 from p5 and p7 from relu(p6)
  Tensor down6_w, down6_b, down7_w, down7_b;
};

FpnParams init_fpn(int c3, int c4, int c5, int d, Rng& rng);
std::vector<std::pair<std::string, Tensor>> named_params(const FpnParams& params);

Pyramid build_pyramid(const Tensor& b3, const Tensor& b4, const Tensor& b5, const FpnParams& params);

struct HeadParams {
  std::vector<Tensor> cls_w, cls_b;  // trunk convs then final projection
  std::vector<Tensor> box_w, box_b;
  int num_classes = 0;
  int anchors_per_cell = 0;
};

HeadParams init_heads(int d, int trunk_convs, int num_classes, int anchors_per_cell,
                      double prior_pi, Rng& rng);
std::vector<std::pair<std::string, Tensor>> named_params(const HeadParams& params);

struct HeadOutput {
  Tensor cls;  // (b,h,w,anchors*num_classes) logits
  Tensor box;  // (b,h,w,anchors*4) deltas
};

// The same params run at every level (RetinaNet-style sharing).
HeadOutput run_head(const Tensor& level, const HeadParams& params);

struct AnchorConfig {
  std::vector<double> scales = {1.0, std::pow(2.0, -1.0 / 3.0), std::pow(2.0, -2.0 / 3.0)};
  std::vector<double> aspect_ratios = {0.5, 1.0, 2.0};  // height / width
  std::vector<int> strides = {8, 16, 32, 64, 128};
  double base_scale = 2.0;  // base anchor size = base_scale * stride

  int per_cell() const { return static_cast<int>(scales.size() * aspect_ratios.size()); }
};

// Anchors for one level in (y, x, anchor) scan order; anchor index is
// scale-major: a = scale_idx * |ratios| + ratio_idx.
std::vector<Box> make_anchors(const AnchorConfig& config, int level_index, int h, int w);

void dump_anchors(std::ostream& os, const AnchorConfig& config,
                  const std::vector<std::pair<int, int>>& level_dims);

// dx,dy scaled by anchor size; dw,dh log size ratios
std::array<double, 4> encode_box(const Box& anchor, const Box& target);
Box decode_box(const Box& anchor, const std::array<double, 4>& deltas);

double focal_loss_term(double p_prime, double gamma, double alpha_t);

std::vector<double> alpha_from_frequency(const std::vector<std::int64_t>& class_counts,
                                         double mean_alpha = 0.25);

// gt index >= 0 for positives
constexpr int kAnchorNegative = -1;
constexpr int kAnchorIgnore = -2;

std::vector<int> match_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gt_boxes,
                               double iou_fg = 0.5, double iou_bg = 0.4);

struct LevelTargets {
  std::vector<signed char> cls;   // per logit: 1 positive, 0 negative, -1 ignore
  std::vector<double> box;        // per delta coordinate
  std::vector<unsigned char> box_mask;
};

struct Targets {
  std::vector<LevelTargets> levels;
  int num_positive = 0;
};

Targets build_targets(const std::vector<std::vector<Box>>& anchors_per_level,
                      const std::vector<Box>& gt_boxes, const std::vector<int>& gt_classes,
                      int num_classes, double iou_fg = 0.5, double iou_bg = 0.4);

// Differentiable losses. Both return scalars already scaled by inv_norm.
Tensor sigmoid_focal_loss(const Tensor& logits, const std::vector<signed char>& targets,
                          const std::vector<double>& alphas, int num_classes, double gamma,
                          double inv_norm);
Tensor smooth_l1_loss(const Tensor& pred, const std::vector<double>& targets,
                      const std::vector<unsigned char>& mask, double beta, double inv_norm);

}  // namespace tfd
