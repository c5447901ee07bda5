#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "tfd/pipeline.hpp"

using tfd::DetectorModel;
using tfd::FeatureCache;
using tfd::FusionMode;
using tfd::GradTape;
using tfd::Rng;
using tfd::SceneConfig;
using tfd::Sequence;
using tfd::Shape;
using tfd::Tensor;
using tfd::TrainConfig;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.block_channels = {2, 2, 3, 3, 3};
  c.pyramid_channels = 8;
  c.num_classes = 2;
  c.head_convs = 1;
  c.image_size = 128;
  c.n = 0;
  c.fusion_mode = FusionMode::single_frame;
  c.max_steps = 10;
  c.eval_every = 5;
  c.val_windows = 4;
  c.seed = 3;
  return c;
}

SceneConfig tiny_scene(std::uint64_t seed, int length = 6) {
  SceneConfig s;
  s.image_size = 128;
  s.length = length;
  s.num_objects_min = 1;
  s.num_objects_max = 1;
  s.num_classes = 2;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("train config presets and validation") {
  TrainConfig c = tiny_train_config();
  CHECK_NOTHROW(c.validate());

  nlohmann::json j = tfd::train_config_to_json(c);
  TrainConfig back = tfd::train_config_from_json(j);
  CHECK(back.n == c.n);
  CHECK(back.learning_rate == c.learning_rate);
  CHECK(back.block_channels == c.block_channels);
  CHECK(back.max_steps == c.max_steps);

  // the published-settings preset switches rate and freezing before overrides
  TrainConfig paper = tfd::train_config_from_json({{"preset", "paper"}});
  CHECK(paper.learning_rate == 1e-5);
  CHECK(paper.frozen_blocks == 4);
  TrainConfig mixed = tfd::train_config_from_json({{"preset", "paper"}, {"learning_rate", 0.5}});
  CHECK(mixed.learning_rate == 0.5);
  CHECK(mixed.frozen_blocks == 4);
  CHECK_THROWS_AS(tfd::train_config_from_json({{"preset", "cluster"}}), tfd::ConfigError);

  TrainConfig big_n = tiny_train_config();
  big_n.fusion_mode = FusionMode::learned_fusion;
  big_n.n = 5;
  CHECK_THROWS_AS(big_n.validate(), tfd::ConfigError);
  big_n.allow_large_n = true;
  CHECK_NOTHROW(big_n.validate());

  TrainConfig bad = tiny_train_config();
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), tfd::ConfigError);
  bad = tiny_train_config();
  bad.max_steps = 0;
  CHECK_THROWS_AS(bad.validate(), tfd::ConfigError);
  bad = tiny_train_config();
  bad.fusion_mode = FusionMode::single_frame;
  bad.n = 1;
  CHECK_THROWS_AS(bad.validate(), tfd::ConfigError);
}

TEST_CASE("feature cache evicts the oldest frame and counts hits") {
  FeatureCache cache(3);
  int computed = 0;
  auto compute = [&](int frame) {
    ++computed;
    tfd::BackboneFeatures f;
    f.b3 = Tensor::full(Shape{1, 1, 1, 1}, static_cast<double>(frame));
    f.frame_index = frame;
    return f;
  };

  for (int frame : {0, 1, 2}) cache.get_or_compute(frame, compute);
  CHECK(computed == 3);
  CHECK(cache.size() == 3);

  // hit does not recompute
  const auto& f1 = cache.get_or_compute(1, compute);
  CHECK(computed == 3);
  CHECK(f1.b3.item() == 1.0);

  // inserting frame 3 evicts frame 0 (the oldest index)
  cache.get_or_compute(3, compute);
  CHECK(computed == 4);
  CHECK(cache.size() == 3);
  CHECK_FALSE(cache.contains(0));
  CHECK(cache.contains(1));
  CHECK(cache.contains(3));

  cache.get_or_compute(0, compute);  // miss again after eviction
  CHECK(computed == 5);
  CHECK(cache.hits() == 1);
  CHECK(cache.misses() == 5);

  cache.clear();
  CHECK(cache.size() == 0);
  CHECK_THROWS(FeatureCache(0));
}

TEST_CASE("adam minimizes a quadratic and respects the freeze mask") {
  Tensor x = Tensor::from(Shape{1, 1, 1, 1}, {10.0});
  x.set_requires_grad(true);
  Tensor frozen = Tensor::from(Shape{1, 1, 1, 1}, {4.0});
  frozen.set_requires_grad(true);

  tfd::Adam opt({{"x", x}, {"frozen", frozen}}, {{"x", true}, {"frozen", false}}, 0.3, 0.9,
                0.999, 1e-8);
  Tensor target = Tensor::from(Shape{1, 1, 1, 1}, {3.0});
  for (int step = 0; step < 200; ++step) {
    GradTape tape;
    {
      GradTape::Scope scope(tape);
      Tensor d = tfd::add(x, tfd::scale(target, -1.0));
      Tensor loss = tfd::add(tfd::mul(d, d), tfd::mul(frozen, frozen));
      tape.backward(tfd::reduce_sum(loss));
    }
    opt.step();
  }
  CHECK(std::abs(x.item() - 3.0) < 1e-3);
  CHECK(frozen.item() == 4.0);         // masked out: value never moves
  CHECK(frozen.grad()[0] == 0.0);      // but its gradient is still cleared
  CHECK(opt.steps_taken() == 200);
}

TEST_CASE("training on a one-object scene halves the loss") {
  Sequence seq = tfd::generate(tiny_scene(31, 10));
  Sequence val = tfd::generate(tiny_scene(32, 4));

  TrainConfig cfg = tiny_train_config();
  cfg.max_steps = 200;
  cfg.eval_every = 100;
  cfg.learning_rate = 1e-3;
  DetectorModel model;
  tfd::TrainResult res = tfd::train(cfg, {seq}, {val}, model);

  REQUIRE(static_cast<int>(res.loss_history.size()) == 200);
  const double head =
      std::accumulate(res.loss_history.begin(), res.loss_history.begin() + 10, 0.0) / 10.0;
  const double tail =
      std::accumulate(res.loss_history.end() - 10, res.loss_history.end(), 0.0) / 10.0;
  CHECK(tail < 0.5 * head);
  CHECK(res.best_step >= 0);
  for (double v : res.loss_history) CHECK(std::isfinite(v));
}

TEST_CASE("training is deterministic for a fixed seed") {
  Sequence seq = tfd::generate(tiny_scene(41, 6));
  Sequence val = tfd::generate(tiny_scene(42, 4));
  TrainConfig cfg = tiny_train_config();
  cfg.max_steps = 8;
  cfg.eval_every = 4;

  DetectorModel m1, m2;
  auto r1 = tfd::train(cfg, {seq}, {val}, m1);
  auto r2 = tfd::train(cfg, {seq}, {val}, m2);
  CHECK(r1.loss_history == r2.loss_history);
  REQUIRE(r1.val_history.size() == r2.val_history.size());
  for (std::size_t i = 0; i < r1.val_history.size(); ++i) {
    CHECK(r1.val_history[i].second == r2.val_history[i].second);
  }
  auto p1 = m1.parameters(), p2 = m2.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(oracle::max_abs_diff(p1[i].second, p2[i].second) == 0.0);
  }
}

TEST_CASE("fusion weights move off the one-hot start within a few steps") {
  Sequence seq = tfd::generate(tiny_scene(51, 6));
  Sequence val = tfd::generate(tiny_scene(52, 4));
  TrainConfig cfg = tiny_train_config();
  cfg.n = 1;
  cfg.fusion_mode = FusionMode::learned_fusion;
  cfg.max_steps = 10;
  cfg.eval_every = 10;

  DetectorModel model;
  tfd::train(cfg, {seq}, {val}, model);
  double delta = 0.0;
  for (auto& [name, t] : model.parameters()) {
    if (name != "fusion.b3.weights") continue;
    for (int k = 0; k < t.shape().w; ++k) {
      for (int j = 0; j < t.shape().c; ++j) {
        const double init = j == 1 ? 1.0 : 0.0;
        delta += std::abs(t.at(0, 0, k, j) - init);
      }
    }
  }
  CHECK(delta > 0.0);
}

TEST_CASE("frozen blocks stay at their initial values during training") {
  Sequence seq = tfd::generate(tiny_scene(61, 6));
  Sequence val = tfd::generate(tiny_scene(62, 4));
  TrainConfig cfg = tiny_train_config();
  cfg.frozen_blocks = 5;
  cfg.max_steps = 6;
  cfg.eval_every = 6;

  DetectorModel reference(cfg.model_config(), cfg.seed);
  DetectorModel model;
  tfd::train(cfg, {seq}, {val}, model);

  auto ref = reference.parameters();
  auto got = model.parameters();
  REQUIRE(ref.size() == got.size());
  double backbone_delta = 0.0, rest_delta = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = oracle::max_abs_diff(ref[i].second, got[i].second);
    if (ref[i].first.rfind("backbone.", 0) == 0) {
      backbone_delta += d;
    } else {
      rest_delta += d;
    }
  }
  CHECK(backbone_delta == 0.0);
  CHECK(rest_delta > 0.0);
}

TEST_CASE("non-finite loss raises a divergence error naming the step") {
  // a runaway learning rate blows the params to +-1e308 on step one; the box
  // errors at the matched anchors then sum past DBL_MAX and the loss stops
  // being finite
  Sequence seq = tfd::generate(tiny_scene(71, 4));
  Sequence val = tfd::generate(tiny_scene(72, 4));
  TrainConfig cfg = tiny_train_config();
  cfg.learning_rate = 1e308;
  cfg.max_steps = 4;

  DetectorModel model;
  CHECK_THROWS_AS(tfd::train(cfg, {seq}, {val}, model), tfd::DivergenceError);
  try {
    DetectorModel m2;
    tfd::train(cfg, {seq}, {val}, m2);
  } catch (const tfd::DivergenceError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("train writes checkpoint and history files") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tfd_train_out";
  fs::remove_all(dir);

  Sequence seq = tfd::generate(tiny_scene(81, 6));
  Sequence val = tfd::generate(tiny_scene(82, 4));
  TrainConfig cfg = tiny_train_config();
  cfg.max_steps = 4;
  cfg.eval_every = 2;
  DetectorModel model;
  tfd::train(cfg, {seq}, {val}, model, dir);

  CHECK(fs::exists(dir / "checkpoint" / "model_config.json"));
  CHECK(fs::exists(dir / "checkpoint" / "manifest.json"));
  CHECK(fs::exists(dir / "loss_history.csv"));
  CHECK(fs::exists(dir / "val_history.csv"));

  std::ifstream loss_csv(dir / "loss_history.csv");
  std::string line;
  std::getline(loss_csv, line);
  CHECK(line == "step,train_loss");
  int rows = 0;
  while (std::getline(loss_csv, line)) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == 4);

  // the checkpoint reloads into a working model
  DetectorModel back = DetectorModel::load(dir / "checkpoint");
  CHECK(back.config().num_classes == cfg.num_classes);
  fs::remove_all(dir);
}

TEST_CASE("cached and uncached inference agree bit for bit") {
  Sequence seq = tfd::generate(tiny_scene(91, 10));
  TrainConfig cfg = tiny_train_config();
  cfg.n = 2;
  cfg.fusion_mode = FusionMode::learned_fusion;
  DetectorModel model(cfg.model_config(), 5);

  tfd::InferStats cached_stats, plain_stats;
  auto cached = tfd::infer_sequence(model, seq, 2, true, &cached_stats, 1e-4);
  auto plain = tfd::infer_sequence(model, seq, 2, false, &plain_stats, 1e-4);

  REQUIRE(cached.size() == plain.size());
  for (std::size_t i = 0; i < cached.size(); ++i) {
    CHECK(cached[i].frame_index == plain[i].frame_index);
    CHECK(cached[i].class_id == plain[i].class_id);
    CHECK(cached[i].score == plain[i].score);
    CHECK(cached[i].box.x1 == plain[i].box.x1);
    CHECK(cached[i].box.y2 == plain[i].box.y2);
  }

  // L=10, n=2: 50 lookups, one miss per frame, the rest hits
  CHECK(cached_stats.cache_lookups == 50);
  CHECK(cached_stats.cache_misses == 10);
  CHECK(cached_stats.cache_hits == 40);
  CHECK(cached_stats.backbone_calls == 10);

  // the uncached path still deduplicates within each window
  CHECK(plain_stats.cache_hits == 0);
  CHECK(plain_stats.backbone_calls > 10);
}

TEST_CASE("each frame runs the backbone once regardless of window radius") {
  Sequence seq = tfd::generate(tiny_scene(101, 8));
  for (int n : {0, 1, 2}) {
    TrainConfig cfg = tiny_train_config();
    if (n > 0) {
      cfg.n = n;
      cfg.fusion_mode = FusionMode::learned_fusion;
    }
    DetectorModel model(cfg.model_config(), 5);
    tfd::InferStats stats;
    tfd::infer_sequence(model, seq, n, true, &stats, 1e-4);
    CHECK(stats.backbone_calls == 8);
  }
}

TEST_CASE("border frames yield detections through replicated windows") {
  Sequence seq = tfd::generate(tiny_scene(111, 6));
  TrainConfig cfg = tiny_train_config();
  cfg.n = 2;
  cfg.fusion_mode = FusionMode::learned_fusion;
  DetectorModel model(cfg.model_config(), 5);
  auto dets = tfd::infer_sequence(model, seq, 2, true, nullptr, 1e-6);

  std::set<int> frames_with_dets;
  for (const auto& d : dets) frames_with_dets.insert(d.frame_index);
  for (int t = 0; t < 6; ++t) CHECK(frames_with_dets.count(t) == 1);
}

TEST_CASE("single-frame to fused hand-off: identical detections at step zero") {
  Sequence seq = tfd::generate(tiny_scene(121, 6));
  TrainConfig base = tiny_train_config();  // single_frame, n = 0
  TrainConfig fused_cfg = tiny_train_config();
  fused_cfg.n = 2;
  fused_cfg.fusion_mode = FusionMode::learned_fusion;

  DetectorModel baseline(base.model_config(), 9);
  DetectorModel fused(fused_cfg.model_config(), 9);

  auto a = tfd::infer_sequence(baseline, seq, 0, true, nullptr, 1e-4);
  auto b = tfd::infer_sequence(fused, seq, 2, true, nullptr, 1e-4);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].frame_index == b[i].frame_index);
    CHECK(a[i].class_id == b[i].class_id);
    CHECK(a[i].score == b[i].score);
    CHECK(a[i].box.x1 == b[i].box.x1);
    CHECK(a[i].box.x2 == b[i].box.x2);
  }
}

TEST_CASE("dataset directories load in sorted order") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tfd_dataset";
  fs::remove_all(dir);

  SceneConfig c0 = tiny_scene(131, 4);
  SceneConfig c1 = tiny_scene(132, 5);
  tfd::save_sequence(dir / "seq_000", tfd::generate(c0), c0);
  tfd::save_sequence(dir / "seq_001", tfd::generate(c1), c1);

  auto seqs = tfd::load_dataset(dir);
  REQUIRE(seqs.size() == 2);
  CHECK(seqs[0].length() == 4);
  CHECK(seqs[1].length() == 5);
  CHECK_THROWS(tfd::load_dataset(dir / "absent"));
  fs::remove_all(dir);
}

TEST_CASE("evaluate_files reports map and writes the pr artifacts") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tfd_eval_files";
  fs::remove_all(dir);
  fs::create_directories(dir);

  // one gt; FP above TP -> AP 1/2 at IoU 0.7
  std::vector<tfd::GroundTruthBox> gts(1);
  gts[0].frame_index = 0;
  gts[0].class_id = 0;
  gts[0].box = {0, 0, 10, 10};
  std::vector<tfd::Detection> dets(2);
  dets[0].frame_index = 0;
  dets[0].class_id = 0;
  dets[0].box = {50, 50, 60, 60};
  dets[0].score = 0.9;
  dets[1].frame_index = 0;
  dets[1].class_id = 0;
  dets[1].box = {0, 0, 10, 10};
  dets[1].score = 0.8;
  tfd::save_detections_csv(dir / "dets.csv", dets);
  tfd::save_gt_csv(dir / "gt.csv", gts);

  auto res = tfd::evaluate_files(dir / "dets.csv", dir / "gt.csv", dir / "out", 0.7);
  CHECK(res.map == 0.5);
  CHECK(fs::exists(dir / "out" / "pr.csv"));
  CHECK(fs::exists(dir / "out" / "pr.svg"));
  CHECK(fs::exists(dir / "out" / "metrics.json"));

  std::ifstream mj(dir / "out" / "metrics.json");
  nlohmann::json parsed = nlohmann::json::parse(mj);
  CHECK(parsed.at("mAP").get<double>() == 0.5);
  fs::remove_all(dir);
}

TEST_CASE("micro ablation exercises all four variants end to end") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tfd_micro_ablation";
  fs::remove_all(dir);

  tfd::AblationConfig cfg;
  cfg.scene = tiny_scene(141, 6);
  cfg.scene.num_classes = 2;
  cfg.train_sequences = 2;
  cfg.val_sequences = 1;
  cfg.test_sequences = 1;
  cfg.seeds = {1};
  cfg.base = tiny_train_config();
  cfg.base.max_steps = 2;
  cfg.base.eval_every = 2;
  cfg.base.val_windows = 2;

  auto rows = tfd::run_ablation(cfg, dir);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].variant == "baseline_n0");
  CHECK(rows[1].variant == "fused_n1");
  CHECK(rows[2].variant == "fused_n2");
  CHECK(rows[3].variant == "concat_n2");
  CHECK(rows[0].num_frames == 1);
  CHECK(rows[2].num_frames == 5);
  for (const auto& row : rows) {
    REQUIRE(row.per_seed.size() == 1);
    CHECK(row.map >= 0.0);
    CHECK(row.map <= 1.0);
  }
  CHECK(fs::exists(dir / "ablation.csv"));

  std::ifstream csv(dir / "ablation.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header.rfind("variant,num_frames,mAP", 0) == 0);
  fs::remove_all(dir);
}

TEST_CASE("ablation accepts caller-provided splits and matches the generating path") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tfd_ablation_data";
  fs::remove_all(dir);

  tfd::AblationConfig cfg;
  cfg.scene = tiny_scene(151, 6);
  cfg.scene.num_classes = 2;
  cfg.train_sequences = 2;
  cfg.val_sequences = 1;
  cfg.test_sequences = 1;
  cfg.seeds = {1};
  cfg.base = tiny_train_config();
  cfg.base.max_steps = 2;
  cfg.base.eval_every = 2;
  cfg.base.val_windows = 2;

  // the same sequences the generating overload would make for this config
  std::vector<tfd::Sequence> splits[3];
  for (int i = 0; i < 4; ++i) {
    tfd::SceneConfig sc = cfg.scene;
    sc.seed = cfg.scene.seed + static_cast<std::uint64_t>(i);
    splits[i < 2 ? 0 : (i == 2 ? 1 : 2)].push_back(tfd::generate(sc));
  }
  auto direct = tfd::run_ablation(cfg, splits[0], splits[1], splits[2], dir);
  auto generated = tfd::run_ablation(cfg, "");
  REQUIRE(direct.size() == generated.size());
  for (std::size_t i = 0; i < direct.size(); ++i) {
    CHECK(direct[i].variant == generated[i].variant);
    CHECK(direct[i].map == generated[i].map);  // same data, same seeds, same bits
  }
  CHECK_THROWS_AS(tfd::run_ablation(cfg, splits[0], {}, splits[2], ""), tfd::ConfigError);
  fs::remove_all(dir);
}
