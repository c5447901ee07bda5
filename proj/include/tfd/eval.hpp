#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tfd/box.hpp"
#include "tfd/tensor.hpp"

namespace tfd {

struct Detection {
  int frame_index = 0;
  int class_id = 0;
  Box box;
  double score = 0.0;
};

struct GroundTruthBox {
  int frame_index = 0;
  int class_id = 0;
  Box box;
};

struct PRCurve {
  int class_id = 0;
  std::vector<double> recall;
  std::vector<double> precision;
  double ap = 0.0;
};

// Turn one level's head outputs into scored boxes: per-class sigmoid scores,
// anchor deltas inverted, boxes clipped to the image, top-k by score kept.
// frame_index is left at -1 for the caller to fill.
std::vector<Detection> decode_level(const Tensor& cls_logits, const Tensor& box_deltas,
                                    const std::vector<Box>& anchors, int num_classes,
                                    double score_thresh = 0.05, int topk = 1000,
                                    double img_w = 0, double img_h = 0);

// Greedy per-class suppression: descending score, ties keep the earlier
// input index; a box is dropped when IoU >= thresh against any kept box.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh = 0.5);

// Single-class AP at the given IoU floor, PR points emitted once per score
// tie group, area under the precision envelope (all-points interpolation).
std::pair<double, PRCurve> average_precision(const std::vector<Detection>& dets,
                                             const std::vector<GroundTruthBox>& gts,
                                             double iou_min = 0.7);

double mean_ap(const std::vector<double>& per_class_aps);

struct EvalResult {
  std::map<int, PRCurve> per_class;  // keyed by class id present in gt
  double map = 0.0;
  std::vector<int> unknown_det_classes;  // det classes absent from gt
};

EvalResult evaluate_detections(const std::vector<Detection>& dets,
                               const std::vector<GroundTruthBox>& gts, double iou_min = 0.7);

// Writes pr.csv (class,recall,precision) and pr.svg (one polyline per class).
void export_pr(const std::vector<PRCurve>& curves, const std::filesystem::path& out_dir);

// CSV contract: detections `frame,class,x1,y1,x2,y2,score`; gt drops score.
void save_detections_csv(const std::filesystem::path& path, const std::vector<Detection>& dets);
std::vector<Detection> load_detections_csv(const std::filesystem::path& path);
void save_gt_csv(const std::filesystem::path& path, const std::vector<GroundTruthBox>& gts);
std::vector<GroundTruthBox> load_gt_csv(const std::filesystem::path& path);

}  // namespace tfd
