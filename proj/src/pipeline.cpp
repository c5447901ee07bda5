#include "tfd/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "tfd/eval.hpp"
#include "tfd/rng.hpp"

namespace tfd {

void TrainConfig::validate() const {
  if (n < 0) throw ConfigError("n must be >= 0");
  if (n > 3 && !allow_large_n) {
    throw ConfigError("n > 3 multiplies memory per step; pass allow_large_n to override");
  }
  if (fusion_mode == FusionMode::single_frame && n != 0) {
    throw ConfigError("single_frame mode requires n = 0");
  }
  if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (val_windows < 1) throw ConfigError("val_windows must be >= 1");
  if (focal_gamma < 0) throw ConfigError("focal_gamma must be >= 0");
  if (box_loss_weight < 0) throw ConfigError("box_loss_weight must be >= 0");
  try {
    model_config().validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig mc;
  mc.backbone.block_channels = block_channels;
  mc.backbone.frozen_blocks = frozen_blocks;
  mc.n = n;
  mc.fusion_mode = fusion_mode;
  mc.pyramid_channels = pyramid_channels;
  mc.num_classes = num_classes;
  mc.head_convs = head_convs;
  mc.image_size = image_size;
  return mc;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  const std::string preset = j.value("preset", std::string());
  if (preset == "paper") {
    // published settings: fine-tuning rate, first four blocks frozen
    c.learning_rate = 1e-5;
    c.frozen_blocks = 4;
  } else if (!preset.empty() && preset != "desk") {
    throw ConfigError("unknown preset '" + preset + "' (expected 'desk' or 'paper')");
  }
  c.n = j.value("n", c.n);
  if (j.contains("fusion_mode")) {
    try {
      c.fusion_mode = fusion_mode_from_name(j.at("fusion_mode").get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.patience = j.value("patience", c.patience);
  c.val_windows = j.value("val_windows", c.val_windows);
  c.seed = j.value("seed", c.seed);
  c.frozen_blocks = j.value("frozen_blocks", c.frozen_blocks);
  c.allow_large_n = j.value("allow_large_n", c.allow_large_n);
  c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
  c.box_loss_weight = j.value("box_loss_weight", c.box_loss_weight);
  c.pyramid_channels = j.value("pyramid_channels", c.pyramid_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.head_convs = j.value("head_convs", c.head_convs);
  c.image_size = j.value("image_size", c.image_size);
  c.block_channels = j.value("block_channels", c.block_channels);
  return c;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"n", c.n},
                        {"fusion_mode", fusion_mode_name(c.fusion_mode)},
                        {"learning_rate", c.learning_rate},
                        {"batch_size", c.batch_size},
                        {"beta1", c.beta1},
                        {"beta2", c.beta2},
                        {"adam_eps", c.adam_eps},
                        {"max_steps", c.max_steps},
                        {"eval_every", c.eval_every},
                        {"patience", c.patience},
                        {"val_windows", c.val_windows},
                        {"seed", c.seed},
                        {"frozen_blocks", c.frozen_blocks},
                        {"allow_large_n", c.allow_large_n},
                        {"focal_gamma", c.focal_gamma},
                        {"box_loss_weight", c.box_loss_weight},
                        {"pyramid_channels", c.pyramid_channels},
                        {"num_classes", c.num_classes},
                        {"head_convs", c.head_convs},
                        {"image_size", c.image_size},
                        {"block_channels", c.block_channels}};
}

FeatureCache::FeatureCache(int capacity) : capacity_(capacity) {
  if (capacity < 1) throw ConfigError("feature cache capacity must be >= 1");
}

const BackboneFeatures& FeatureCache::get_or_compute(
    int frame, const std::function<BackboneFeatures(int)>& compute) {
  auto it = entries_.find(frame);
  if (it != entries_.end()) {
    ++hits_;
    return it->second;
  }
  ++misses_;
  it = entries_.emplace(frame, compute(frame)).first;
  while (entries_.size() > static_cast<std::size_t>(capacity_)) {
    auto victim = entries_.begin();  // oldest frame index first
    if (victim == it) ++victim;      // never evict the entry being handed out
    entries_.erase(victim);
  }
  return it->second;
}

void FeatureCache::clear() {
  entries_.clear();
  hits_ = 0;
  misses_ = 0;
}

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, std::map<std::string, bool> mask,
           double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), mask_(std::move(mask)), lr_(lr), beta1_(beta1), beta2_(beta2),
      eps_(eps) {
  for (const auto& [name, tensor] : params_) {
    (void)name;
    m_.emplace_back(static_cast<std::size_t>(tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(tensor.numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    const auto it = mask_.find(params_[i].first);
    const bool trainable = it == mask_.end() || it->second;
    if (trainable) {
      double* x = p.data();
      const std::vector<double>& g = p.grad();
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      for (std::size_t k = 0; k < g.size(); ++k) {
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
        x[k] -= lr_ * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps_);
      }
    }
    p.zero_grad();
  }
}

namespace {

std::vector<BackboneFeatures> window_features(const DetectorModel& model, const Sequence& seq,
                                              const FrameWindow& w) {
  std::map<int, BackboneFeatures> computed;
  std::vector<BackboneFeatures> out;
  for (int idx : w.indices) {
    auto it = computed.find(idx);
    if (it == computed.end()) {
      it = computed.emplace(idx, model.extract_frame(seq.frames[static_cast<std::size_t>(idx)], idx))
               .first;
    }
    out.push_back(it->second);
  }
  return out;
}

Tensor window_loss(const DetectorModel& model, const std::vector<BackboneFeatures>& feats,
                   const std::vector<GroundTruthBox>& frame_gt, const std::vector<double>& alphas,
                   double gamma, double box_weight) {
  const auto outputs = model.forward(feats);
  std::vector<Box> boxes;
  std::vector<int> classes;
  for (const GroundTruthBox& g : frame_gt) {
    boxes.push_back(g.box);
    classes.push_back(g.class_id);
  }
  const int C = model.config().num_classes;
  const Targets targets = build_targets(model.anchor_grids(), boxes, classes, C);
  const double inv_norm = 1.0 / std::max(1, targets.num_positive);

  Tensor total;
  for (std::size_t i = 0; i < outputs.heads.size(); ++i) {
    Tensor fl = sigmoid_focal_loss(outputs.heads[i].cls, targets.levels[i].cls, alphas, C, gamma,
                                   inv_norm);
    Tensor bl = smooth_l1_loss(outputs.heads[i].box, targets.levels[i].box,
                               targets.levels[i].box_mask, 1.0 / 9.0, inv_norm * box_weight);
    Tensor level = add(fl, bl);
    total = total.defined() ? add(total, level) : level;
  }
  return total;
}

// inverse class frequency over the classes that occur, anchor 0.25 elsewhere
std::vector<double> alphas_from_data(const std::vector<Sequence>& seqs, int num_classes) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (const Sequence& s : seqs) {
    for (const auto& frame : s.gt) {
      for (const GroundTruthBox& g : frame) {
        if (g.class_id >= 0 && g.class_id < num_classes) ++counts[static_cast<std::size_t>(g.class_id)];
      }
    }
  }
  std::vector<std::int64_t> present;
  for (std::int64_t c : counts) {
    if (c > 0) present.push_back(c);
  }
  std::vector<double> alphas(static_cast<std::size_t>(num_classes), 0.25);
  if (present.empty()) return alphas;
  const std::vector<double> present_alphas = alpha_from_frequency(present);
  std::size_t j = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] > 0) alphas[i] = present_alphas[j++];
  }
  return alphas;
}

struct ParamSnapshot {
  std::vector<std::vector<double>> values;

  static ParamSnapshot take(const DetectorModel& model) {
    ParamSnapshot s;
    for (const auto& [name, tensor] : model.parameters()) {
      (void)name;
      s.values.emplace_back(tensor.data(), tensor.data() + tensor.numel());
    }
    return s;
  }

  void restore(DetectorModel& model) const {
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::copy(values[i].begin(), values[i].end(), params[i].second.data());
    }
  }
};

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<Sequence>& train_seqs,
                  const std::vector<Sequence>& val_seqs, DetectorModel& model,
                  const std::filesystem::path& out_dir) {
  config.validate();
  if (train_seqs.empty()) throw ConfigError("no training sequences");
  for (const Sequence& s : train_seqs) {
    if (s.length() == 0) throw ConfigError("empty training sequence");
    const Shape fs = s.frames[0].shape();
    if (fs.h != config.image_size || fs.w != config.image_size) {
      throw ConfigError("sequence frames are " + fs.str() + ", config expects " +
                        std::to_string(config.image_size) + "px");
    }
  }

  model = DetectorModel(config.model_config(), config.seed);
  const std::vector<double> alphas = alphas_from_data(train_seqs, config.num_classes);

  std::vector<std::pair<int, int>> samples;
  for (std::size_t s = 0; s < train_seqs.size(); ++s) {
    for (int t = 0; t < train_seqs[s].length(); ++t) samples.emplace_back(static_cast<int>(s), t);
  }

  std::vector<std::pair<int, int>> val_samples;
  for (std::size_t s = 0; s < val_seqs.size(); ++s) {
    for (int t = 0; t < val_seqs[s].length(); ++t) val_samples.emplace_back(static_cast<int>(s), t);
  }
  Rng val_rng(config.seed ^ 0xc2b2ae3d27d4eb4fULL);
  for (std::size_t i = val_samples.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(val_rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(val_samples[i - 1], val_samples[j]);
  }
  if (val_samples.size() > static_cast<std::size_t>(config.val_windows)) {
    val_samples.resize(static_cast<std::size_t>(config.val_windows));
  }

  const auto validation_loss = [&]() {
    double sum = 0.0;
    for (const auto& [s, t] : val_samples) {
      const Sequence& seq = val_seqs[static_cast<std::size_t>(s)];
      const FrameWindow w = window(seq.length(), t, config.n);
      const auto feats = window_features(model, seq, w);
      sum += window_loss(model, feats, seq.gt[static_cast<std::size_t>(t)], alphas,
                         config.focal_gamma, config.box_loss_weight)
                 .item();
    }
    return sum / static_cast<double>(val_samples.size());
  };

  Adam opt(model.parameters(), model.update_mask(), config.learning_rate, config.beta1,
           config.beta2, config.adam_eps);
  Rng order_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  TrainResult result;
  ParamSnapshot best;
  bool have_best = false;
  int strikes = 0;
  std::size_t cursor = samples.size();  // forces an initial shuffle

  for (int step = 1; step <= config.max_steps; ++step) {
    if (cursor >= samples.size()) {
      for (std::size_t i = samples.size(); i > 1; --i) {
        const std::size_t j =
            static_cast<std::size_t>(order_rng.uniform_int(0, static_cast<int>(i) - 1));
        std::swap(samples[i - 1], samples[j]);
      }
      cursor = 0;
    }
    const auto [s, t] = samples[cursor++];
    const Sequence& seq = train_seqs[static_cast<std::size_t>(s)];
    const FrameWindow w = window(seq.length(), t, config.n);

    double loss_value = 0.0;
    {
      GradTape tape;
      GradTape::Scope scope(tape);
      const auto feats = window_features(model, seq, w);
      Tensor loss = window_loss(model, feats, seq.gt[static_cast<std::size_t>(t)], alphas,
                                config.focal_gamma, config.box_loss_weight);
      loss_value = loss.item();
      tape.backward(loss);
    }
    if (!std::isfinite(loss_value)) {
      throw DivergenceError("training loss diverged at step " + std::to_string(step));
    }
    result.loss_history.push_back(loss_value);
    if (step % config.batch_size == 0) opt.step();
    result.steps_run = step;

    const bool eval_now = !val_samples.empty() &&
                          (step % config.eval_every == 0 || step == config.max_steps);
    if (eval_now) {
      const double vl = validation_loss();
      if (!std::isfinite(vl)) {
        throw DivergenceError("validation loss diverged at step " + std::to_string(step));
      }
      result.val_history.emplace_back(step, vl);
      if (!have_best || vl < result.best_val) {
        result.best_val = vl;
        result.best_step = step;
        best = ParamSnapshot::take(model);
        have_best = true;
        strikes = 0;
      } else {
        ++strikes;
        if (strikes >= config.patience) {
          result.early_stopped = true;
          break;
        }
      }
    }
  }

  if (have_best) best.restore(model);

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    model.save(out_dir / "checkpoint");
    {
      std::ofstream csv(out_dir / "loss_history.csv", std::ios::trunc);
      csv << "step,train_loss\n";
      for (std::size_t i = 0; i < result.loss_history.size(); ++i) {
        csv << (i + 1) << ',' << result.loss_history[i] << '\n';
      }
    }
    std::ofstream csv(out_dir / "val_history.csv", std::ios::trunc);
    csv << "step,val_loss\n";
    for (const auto& [st, vl] : result.val_history) csv << st << ',' << vl << '\n';
  }
  return result;
}

std::vector<Detection> infer_sequence(const DetectorModel& model, const Sequence& seq, int n,
                                      bool use_cache, InferStats* stats, double score_thresh,
                                      double nms_iou) {
  if (n < 0) throw ConfigError("n must be >= 0");
  if (seq.length() == 0) throw ConfigError("empty sequence");
  InferStats local;
  InferStats& st = stats ? *stats : local;
  st = InferStats{};
  const auto t0 = std::chrono::steady_clock::now();

  FeatureCache cache(2 * n + 1);
  const auto compute = [&](int f) {
    ++st.backbone_calls;
    return model.extract_frame(seq.frames[static_cast<std::size_t>(f)], f);
  };

  const double img = model.config().image_size;
  const int C = model.config().num_classes;
  std::vector<Detection> all;
  for (int t = 0; t < seq.length(); ++t) {
    const FrameWindow w = window(seq.length(), t, n);
    std::vector<BackboneFeatures> feats;
    if (use_cache) {
      for (int idx : w.indices) feats.push_back(cache.get_or_compute(idx, compute));
    } else {
      std::map<int, BackboneFeatures> computed;
      for (int idx : w.indices) {
        auto it = computed.find(idx);
        if (it == computed.end()) it = computed.emplace(idx, compute(idx)).first;
        feats.push_back(it->second);
      }
    }

    const auto outputs = model.forward(feats);
    std::vector<Detection> frame_dets;
    for (std::size_t i = 0; i < outputs.heads.size(); ++i) {
      const auto dets = decode_level(outputs.heads[i].cls, outputs.heads[i].box,
                                     model.anchor_grids()[i], C, score_thresh, 1000, img, img);
      frame_dets.insert(frame_dets.end(), dets.begin(), dets.end());
    }
    for (int c = 0; c < C; ++c) {
      std::vector<Detection> cls_dets;
      for (const Detection& d : frame_dets) {
        if (d.class_id == c) cls_dets.push_back(d);
      }
      for (Detection d : nms(cls_dets, nms_iou)) {
        d.frame_index = t;
        all.push_back(d);
      }
    }
  }

  st.cache_hits = cache.hits();
  st.cache_misses = cache.misses();
  st.cache_lookups = cache.hits() + cache.misses();
  st.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return all;
}

namespace {

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace

std::vector<AblationRow> run_ablation(const AblationConfig& config,
                                      const std::filesystem::path& out_dir, bool progress) {
  const int total = config.train_sequences + config.val_sequences + config.test_sequences;
  std::vector<Sequence> train_data, val_data, test_data;
  for (int i = 0; i < total; ++i) {
    SceneConfig sc = config.scene;
    sc.seed = config.scene.seed + static_cast<std::uint64_t>(i);
    Sequence seq = generate(sc);
    if (i < config.train_sequences) {
      train_data.push_back(std::move(seq));
    } else if (i < config.train_sequences + config.val_sequences) {
      val_data.push_back(std::move(seq));
    } else {
      test_data.push_back(std::move(seq));
    }
  }
  return run_ablation(config, train_data, val_data, test_data, out_dir, progress);
}

std::vector<AblationRow> run_ablation(const AblationConfig& config,
                                      const std::vector<Sequence>& train_data,
                                      const std::vector<Sequence>& val_data,
                                      const std::vector<Sequence>& test_data,
                                      const std::filesystem::path& out_dir, bool progress) {
  if (train_data.empty() || val_data.empty() || test_data.empty()) {
    throw ConfigError("ablation needs at least one sequence per split");
  }
  if (config.seeds.empty()) throw ConfigError("ablation needs at least one seed");

  std::vector<GroundTruthBox> test_gt;
  for (std::size_t s = 0; s < test_data.size(); ++s) {
    for (const GroundTruthBox& g : test_data[s].all_gt()) {
      GroundTruthBox shifted = g;
      shifted.frame_index += static_cast<int>(s) * 1000000;
      test_gt.push_back(shifted);
    }
  }

  struct Variant {
    const char* name;
    FusionMode mode;
    int n;
  };
  const Variant variants[] = {{"baseline_n0", FusionMode::single_frame, 0},
                              {"fused_n1", FusionMode::learned_fusion, 1},
                              {"fused_n2", FusionMode::learned_fusion, 2},
                              {"concat_n2", FusionMode::concat_no_fusion, 2}};

  std::vector<AblationRow> rows;
  for (const Variant& v : variants) {
    AblationRow row;
    row.variant = v.name;
    row.num_frames = 2 * v.n + 1;
    for (std::uint64_t seed : config.seeds) {
      TrainConfig tc = config.base;
      tc.n = v.n;
      tc.fusion_mode = v.mode;
      tc.seed = seed;
      tc.num_classes = config.scene.num_classes;
      tc.image_size = config.scene.image_size;

      if (progress) {
        std::cerr << "[ablate] " << v.name << " seed " << seed << ": training..." << std::endl;
      }
      DetectorModel model;
      const TrainResult tr = train(tc, train_data, val_data, model);

      std::vector<Detection> dets;
      for (std::size_t s = 0; s < test_data.size(); ++s) {
        const auto seq_dets = infer_sequence(model, test_data[s], v.n, true);
        for (Detection d : seq_dets) {
          d.frame_index += static_cast<int>(s) * 1000000;
          dets.push_back(d);
        }
      }
      const EvalResult er = evaluate_detections(dets, test_gt, 0.7);
      row.per_seed.push_back(er.map);
      if (progress) {
        std::cerr << "[ablate] " << v.name << " seed " << seed << ": steps " << tr.steps_run
                  << ", best val " << tr.best_val << ", test mAP " << er.map << std::endl;
      }
    }
    row.map = mean_of(row.per_seed);
    rows.push_back(row);
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_ablation_csv(out_dir / "ablation.csv", rows);
  }
  return rows;
}

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream csv(path, std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + path.string());
  std::size_t seeds = 0;
  for (const AblationRow& r : rows) seeds = std::max(seeds, r.per_seed.size());
  csv << "variant,num_frames,mAP";
  for (std::size_t i = 0; i < seeds; ++i) csv << ",mAP_seed" << i;
  csv << '\n';
  for (const AblationRow& r : rows) {
    csv << r.variant << ',' << r.num_frames << ',' << r.map;
    for (double v : r.per_seed) csv << ',' << v;
    csv << '\n';
  }
}

std::vector<Sequence> load_dataset(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> seq_dirs;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_directory() && entry.path().filename().string().rfind("seq_", 0) == 0) {
      seq_dirs.push_back(entry.path());
    }
  }
  if (seq_dirs.empty()) throw ConfigError("no seq_* directories under " + dir.string());
  std::sort(seq_dirs.begin(), seq_dirs.end());
  std::vector<Sequence> seqs;
  for (const auto& d : seq_dirs) seqs.push_back(load_sequence(d));
  return seqs;
}

EvalResult evaluate_files(const std::filesystem::path& dets_csv, const std::filesystem::path& gt_csv,
                          const std::filesystem::path& out_dir, double iou_min) {
  const auto dets = load_detections_csv(dets_csv);
  const auto gts = load_gt_csv(gt_csv);
  const EvalResult result = evaluate_detections(dets, gts, iou_min);

  std::filesystem::create_directories(out_dir);
  std::vector<PRCurve> curves;
  for (const auto& [cls, curve] : result.per_class) curves.push_back(curve);
  export_pr(curves, out_dir);

  nlohmann::json metrics;
  metrics["mAP"] = result.map;
  metrics["iou_min"] = iou_min;
  for (const auto& [cls, curve] : result.per_class) {
    metrics["per_class"][std::to_string(cls)] = curve.ap;
  }
  metrics["unknown_detection_classes"] = result.unknown_det_classes;
  std::ofstream out(out_dir / "metrics.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (out_dir / "metrics.json").string());
  out << metrics.dump(2) << '\n';
  return result;
}

}  // namespace tfd
