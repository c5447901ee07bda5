#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tfd/model.hpp"
#include "tfd/synth.hpp"

namespace tfd {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& message) : std::runtime_error(message) {}
};

struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& message) : std::runtime_error(message) {}
};

struct TrainConfig {
  int n = 2;
  FusionMode fusion_mode = FusionMode::learned_fusion;
  double learning_rate = 1e-3;  // the "paper" preset drops this to 1e-5
  int batch_size = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int max_steps = 500;
  int eval_every = 125;
  int patience = 3;
  int val_windows = 24;  // validation-loss sample size per evaluation
  std::uint64_t seed = 1;
  int frozen_blocks = 0;
  bool allow_large_n = false;  // lifts the n <= 3 memory guard
  double focal_gamma = 2.0;
  double box_loss_weight = 1.0;

  int pyramid_channels = 64;
  int num_classes = 3;
  int head_convs = 2;
  int image_size = 128;
  std::vector<int> block_channels = {8, 16, 32, 64, 64};

  void validate() const;  // throws ConfigError
  ModelConfig model_config() const;
};

// JSON mirror of TrainConfig; the optional "preset" key ("paper") applies a
// fine-tuning-style profile (low rate, mostly frozen backbone) before explicit
// keys override it.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json train_config_to_json(const TrainConfig& c);

class FeatureCache {
 public:
  explicit FeatureCache(int capacity);

  const BackboneFeatures& get_or_compute(int frame,
                                         const std::function<BackboneFeatures(int)>& compute);
  bool contains(int frame) const { return entries_.count(frame) > 0; }
  int capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  std::int64_t hits() const { return hits_; }
  std::int64_t misses() const { return misses_; }
  void clear();

 private:
  int capacity_;
  std::map<int, BackboneFeatures> entries_;  // keyed by frame index; begin() is oldest
  std::int64_t hits_ = 0;
  std::int64_t misses_ = 0;
};

class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor>> params, std::map<std::string, bool> mask,
       double lr, double beta1, double beta2, double eps);

  // applies one update from the accumulated gradients, then clears all grads
  void step();
  int steps_taken() const { return t_; }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::map<std::string, bool> mask_;
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainResult {
  std::vector<double> loss_history;                 // one entry per step
  std::vector<std::pair<int, double>> val_history;  // (step, validation loss)
  double best_val = 0.0;
  int best_step = -1;
  int steps_run = 0;
  bool early_stopped = false;
};

// Trains on the given sequences; the returned model carries the
// best-validation parameters. out_dir (when nonempty) receives checkpoint/
// plus loss CSVs.
TrainResult train(const TrainConfig& config, const std::vector<Sequence>& train_seqs,
                  const std::vector<Sequence>& val_seqs, DetectorModel& model,
                  const std::filesystem::path& out_dir = {});

struct InferStats {
  std::int64_t backbone_calls = 0;
  std::int64_t cache_hits = 0;
  std::int64_t cache_misses = 0;
  std::int64_t cache_lookups = 0;
  double wall_seconds = 0.0;
};

std::vector<Detection> infer_sequence(const DetectorModel& model, const Sequence& seq, int n,
                                      bool use_cache, InferStats* stats = nullptr,
                                      double score_thresh = 0.05, double nms_iou = 0.5);

struct AblationConfig {
  SceneConfig scene;          // benchmark generator knobs (seed = data seed)
  int train_sequences = 30;
  int val_sequences = 6;
  int test_sequences = 6;
  std::vector<std::uint64_t> seeds = {1, 2, 3};  // training seeds to average over
  TrainConfig base;           // shared training budget; n/fusion_mode overridden per variant
};

struct AblationRow {
  std::string variant;
  int num_frames = 0;
  double map = 0.0;
  std::vector<double> per_seed;
};

// Variants: n=0 single-frame baseline, n=1 fused, n=2 fused, n=2 concat.
// The first form generates the benchmark data from config.scene; the second
// trains and scores on sequences the caller provides.
std::vector<AblationRow> run_ablation(const AblationConfig& config,
                                      const std::filesystem::path& out_dir,
                                      bool progress = false);
std::vector<AblationRow> run_ablation(const AblationConfig& config,
                                      const std::vector<Sequence>& train_data,
                                      const std::vector<Sequence>& val_data,
                                      const std::vector<Sequence>& test_data,
                                      const std::filesystem::path& out_dir,
                                      bool progress = false);

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

// Data-directory helpers shared by the CLI: dataset dirs hold seq_%03d/
std::vector<Sequence> load_dataset(const std::filesystem::path& dir);

EvalResult evaluate_files(const std::filesystem::path& dets_csv, const std::filesystem::path& gt_csv,
                          const std::filesystem::path& out_dir, double iou_min = 0.7);

}  // namespace tfd
