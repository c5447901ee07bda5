#include "tfd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "tfd/pyramid.hpp"

namespace tfd {

std::vector<Detection> decode_level(const Tensor& cls_logits, const Tensor& box_deltas,
                                    const std::vector<Box>& anchors, int num_classes,
                                    double score_thresh, int topk, double img_w, double img_h) {
  const Shape cs = cls_logits.shape();
  const Shape bs = box_deltas.shape();
  if (cs.c % num_classes != 0) {
    throw ShapeError("channels", "class logits not a multiple of num_classes");
  }
  const int per_cell = cs.c / num_classes;
  if (bs.c != per_cell * 4 || bs.h != cs.h || bs.w != cs.w) {
    throw ShapeError("channels", "box deltas " + bs.str() + " do not match class logits " + cs.str());
  }
  const std::size_t cells = static_cast<std::size_t>(cs.h) * cs.w * per_cell;
  if (anchors.size() != cells) {
    throw ShapeError("channels", "anchor count " + std::to_string(anchors.size()) +
                                     " != head cells " + std::to_string(cells));
  }

  const double* zc = cls_logits.data();
  const double* zb = box_deltas.data();
  std::vector<Detection> dets;
  for (std::size_t a = 0; a < cells; ++a) {
    const std::array<double, 4> deltas = {zb[a * 4], zb[a * 4 + 1], zb[a * 4 + 2], zb[a * 4 + 3]};
    for (int c = 0; c < num_classes; ++c) {
      const double score = 1.0 / (1.0 + std::exp(-zc[a * static_cast<std::size_t>(num_classes) +
                                                    static_cast<std::size_t>(c)]));
      if (score < score_thresh) continue;
      Box b = decode_box(anchors[a], deltas);
      if (img_w > 0 && img_h > 0) {
        b.x1 = std::min(std::max(b.x1, 0.0), img_w);
        b.x2 = std::min(std::max(b.x2, 0.0), img_w);
        b.y1 = std::min(std::max(b.y1, 0.0), img_h);
        b.y2 = std::min(std::max(b.y2, 0.0), img_h);
      }
      if (b.x2 <= b.x1 || b.y2 <= b.y1) continue;
      Detection d;
      d.frame_index = -1;
      d.class_id = c;
      d.box = b;
      d.score = score;
      dets.push_back(d);
    }
  }
  if (topk > 0 && static_cast<int>(dets.size()) > topk) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    dets.resize(static_cast<std::size_t>(topk));
  }
  return dets;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&dets](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });

  std::vector<Detection> kept;
  for (std::size_t i : order) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (iou(dets[i].box, k.box) >= iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

std::pair<double, PRCurve> average_precision(const std::vector<Detection>& dets,
                                             const std::vector<GroundTruthBox>& gts,
                                             double iou_min) {
  PRCurve curve;
  if (gts.empty()) {
    curve.ap = dets.empty() ? 1.0 : 0.0;
    return {curve.ap, curve};
  }
  if (dets.empty()) {
    curve.ap = 0.0;
    return {0.0, curve};
  }

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&dets](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return a < b;
  });

  std::vector<bool> matched(gts.size(), false);
  const double total_gt = static_cast<double>(gts.size());
  int tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Detection& d = dets[order[i]];
    double best = 0.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (matched[g] || gts[g].frame_index != d.frame_index) continue;
      const double v = iou(d.box, gts[g].box);
      if (v > best) {  // ties keep the lowest gt index
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0 && best >= iou_min) {
      matched[static_cast<std::size_t>(best_gt)] = true;
      ++tp;
    } else {
      ++fp;
    }
    // one PR point per score tie group, so the curve equals a sweep over
    // distinct score thresholds
    const bool group_end =
        i + 1 == order.size() || dets[order[i + 1]].score != dets[order[i]].score;
    if (group_end) {
      curve.recall.push_back(tp / total_gt);
      curve.precision.push_back(static_cast<double>(tp) / (tp + fp));
    }
  }

  // area under the precision envelope
  std::vector<double> env = curve.precision;
  for (std::size_t i = env.size(); i-- > 1;) env[i - 1] = std::max(env[i - 1], env[i]);
  double ap = 0.0;
  double prev_r = 0.0;
  for (std::size_t i = 0; i < env.size(); ++i) {
    ap += (curve.recall[i] - prev_r) * env[i];
    prev_r = curve.recall[i];
  }
  curve.ap = ap;
  return {ap, curve};
}

double mean_ap(const std::vector<double>& per_class_aps) {
  if (per_class_aps.empty()) throw std::invalid_argument("mean_ap: no classes");
  double sum = 0.0;
  for (double a : per_class_aps) sum += a;
  return sum / static_cast<double>(per_class_aps.size());
}

EvalResult evaluate_detections(const std::vector<Detection>& dets,
                               const std::vector<GroundTruthBox>& gts, double iou_min) {
  EvalResult result;
  std::set<int> gt_classes;
  for (const GroundTruthBox& g : gts) gt_classes.insert(g.class_id);
  std::set<int> det_only;
  for (const Detection& d : dets) {
    if (!gt_classes.count(d.class_id)) det_only.insert(d.class_id);
  }
  result.unknown_det_classes.assign(det_only.begin(), det_only.end());

  if (gt_classes.empty()) {
    result.map = dets.empty() ? 1.0 : 0.0;
    return result;
  }
  std::vector<double> aps;
  for (int cls : gt_classes) {
    std::vector<Detection> cd;
    for (const Detection& d : dets) {
      if (d.class_id == cls) cd.push_back(d);
    }
    std::vector<GroundTruthBox> cg;
    for (const GroundTruthBox& g : gts) {
      if (g.class_id == cls) cg.push_back(g);
    }
    auto [ap, curve] = average_precision(cd, cg, iou_min);
    curve.class_id = cls;
    result.per_class[cls] = curve;
    aps.push_back(ap);
  }
  result.map = mean_ap(aps);
  return result;
}

void export_pr(const std::vector<PRCurve>& curves, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream csv(out_dir / "pr.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + (out_dir / "pr.csv").string());
    csv << "class,recall,precision\n";
    for (const PRCurve& c : curves) {
      for (std::size_t i = 0; i < c.recall.size(); ++i) {
        csv << c.class_id << ',' << c.recall[i] << ',' << c.precision[i] << '\n';
      }
    }
  }

  const int W = 480, H = 480, M = 50;  // canvas and margin
  std::ofstream svg(out_dir / "pr.svg", std::ios::trunc);
  if (!svg) throw std::runtime_error("cannot write " + (out_dir / "pr.svg").string());
  const auto px = [&](double r) { return M + r * (W - 2 * M); };
  const auto py = [&](double p) { return H - M - p * (H - 2 * M); };
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n";
  svg << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
  svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(0)
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(0) << "\" y2=\"" << py(1)
      << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">recall</text>\n";
  svg << "<text x=\"14\" y=\"" << H / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << H / 2 << ")\">precision</text>\n";
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  for (std::size_t ci = 0; ci < curves.size(); ++ci) {
    const PRCurve& c = curves[ci];
    if (c.recall.empty()) continue;
    svg << "<polyline fill=\"none\" stroke=\"" << palette[ci % 6] << "\" stroke-width=\"1.5\" points=\"";
    svg << px(0) << ',' << py(c.precision.front()) << ' ';
    for (std::size_t i = 0; i < c.recall.size(); ++i) {
      svg << px(c.recall[i]) << ',' << py(c.precision[i]);
      if (i + 1 < c.recall.size()) svg << ' ';
    }
    svg << "\"/>\n";
    svg << "<text x=\"" << W - M + 4 << "\" y=\"" << M + 16 * ci << "\" fill=\"" << palette[ci % 6]
        << "\" font-size=\"12\">c" << c.class_id << "</text>\n";
  }
  svg << "</svg>\n";
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

}  // namespace

void save_detections_csv(const std::filesystem::path& path, const std::vector<Detection>& dets) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "frame,class,x1,y1,x2,y2,score\n";
  for (const Detection& d : dets) {
    out << d.frame_index << ',' << d.class_id << ',' << d.box.x1 << ',' << d.box.y1 << ','
        << d.box.x2 << ',' << d.box.y2 << ',' << d.score << '\n';
  }
}

std::vector<Detection> load_detections_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<Detection> dets;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("frame", 0) == 0) continue;
    }
    const auto f = split_csv_line(line);
    if (f.size() != 7) throw std::runtime_error("bad detection row in " + path.string() + ": " + line);
    Detection d;
    d.frame_index = std::stoi(f[0]);
    d.class_id = std::stoi(f[1]);
    d.box = Box{std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])};
    d.score = std::stod(f[6]);
    dets.push_back(d);
  }
  return dets;
}

void save_gt_csv(const std::filesystem::path& path, const std::vector<GroundTruthBox>& gts) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "frame,class,x1,y1,x2,y2\n";
  for (const GroundTruthBox& g : gts) {
    out << g.frame_index << ',' << g.class_id << ',' << g.box.x1 << ',' << g.box.y1 << ','
        << g.box.x2 << ',' << g.box.y2 << '\n';
  }
}

std::vector<GroundTruthBox> load_gt_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<GroundTruthBox> gts;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("frame", 0) == 0) continue;
    }
    const auto f = split_csv_line(line);
    if (f.size() != 6) throw std::runtime_error("bad gt row in " + path.string() + ": " + line);
    GroundTruthBox g;
    g.frame_index = std::stoi(f[0]);
    g.class_id = std::stoi(f[1]);
    g.box = Box{std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])};
    gts.push_back(g);
  }
  return gts;
}

}  // namespace tfd
