#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "tfd/pipeline.hpp"

namespace {

// TFD_SEED wins over config files and flags so sweep scripts can re-seed
// without editing configs
bool env_seed(std::uint64_t& out) {
  const char* s = std::getenv("TFD_SEED");
  if (s == nullptr || *s == '\0') return false;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (end == nullptr || *end != '\0') {
    throw tfd::ConfigError("TFD_SEED is not an integer: '" + std::string(s) + "'");
  }
  out = static_cast<std::uint64_t>(v);
  return true;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"temporal-fusion video object detection pipeline"};
  app.require_subcommand(1);

  // ---- generate ----------------------------------------------------------
  auto* gen = app.add_subcommand("generate", "render synthetic sequences with ground truth");
  std::string gen_out;
  int gen_count = 1;
  tfd::SceneConfig scene;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--count", gen_count, "number of sequences (seeds increment from --seed)");
  gen->add_option("--seed", scene.seed, "generator seed");
  gen->add_option("--length", scene.length, "frames per sequence");
  gen->add_option("--image-size", scene.image_size, "square frame size in px");
  gen->add_option("--objects-min", scene.num_objects_min, "min objects per scene");
  gen->add_option("--objects-max", scene.num_objects_max, "max objects per scene");
  gen->add_option("--classes", scene.num_classes, "number of object classes (1-4)");
  gen->add_option("--speed-min", scene.speed_min, "min speed px/frame");
  gen->add_option("--speed-max", scene.speed_max, "max speed px/frame");
  gen->add_option("--size-min", scene.size_min, "min object size px");
  gen->add_option("--size-max", scene.size_max, "max object size px");
  gen->add_option("--occlusion", scene.occlusion_rate, "per-object occluder probability");
  gen->add_option("--blur", scene.blur_len, "motion blur length px");
  gen->add_option("--noise", scene.noise_sigma, "gaussian pixel noise sigma");
  gen->callback([&]() {
    env_seed(scene.seed);
    if (gen_count < 1) throw tfd::ConfigError("--count must be >= 1");
    try {
      scene.validate();
    } catch (const std::invalid_argument& e) {
      throw tfd::ConfigError(e.what());
    }
    std::filesystem::create_directories(gen_out);
    for (int i = 0; i < gen_count; ++i) {
      tfd::SceneConfig sc = scene;
      sc.seed = scene.seed + static_cast<std::uint64_t>(i);
      char name[16];
      std::snprintf(name, sizeof(name), "seq_%03d", i);
      tfd::save_sequence(std::filesystem::path(gen_out) / name, tfd::generate(sc), sc);
    }
    nlohmann::json meta;
    meta["count"] = gen_count;
    meta["scene"] = scene;
    std::ofstream out(std::filesystem::path(gen_out) / "dataset.json", std::ios::trunc);
    out << meta.dump(2) << '\n';
    std::cout << "wrote " << gen_count << " sequences to " << gen_out << std::endl;
  });

  // ---- train -------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "train a detector on a generated dataset");
  std::string tr_config, tr_data, tr_out = "run";
  double tr_val_fraction = 0.2;
  tr->add_option("--config", tr_config, "JSON training config")->check(CLI::ExistingFile);
  tr->add_option("--data", tr_data, "dataset directory (seq_* subdirs)")->required();
  tr->add_option("--out", tr_out, "output directory for checkpoint and history");
  tr->add_option("--val-fraction", tr_val_fraction, "whole-sequence validation share");
  tr->callback([&]() {
    tfd::TrainConfig config;
    if (!tr_config.empty()) {
      std::ifstream in(tr_config);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(in);
      } catch (const nlohmann::json::parse_error& e) {
        throw tfd::ConfigError("bad config JSON: " + std::string(e.what()));
      }
      config = tfd::train_config_from_json(j);
    }
    env_seed(config.seed);
    config.validate();

    const auto all = tfd::load_dataset(tr_data);
    const auto [train_ids, val_ids] =
        tfd::split_sequences(static_cast<int>(all.size()), tr_val_fraction, config.seed);
    std::vector<tfd::Sequence> train_seqs, val_seqs;
    for (int i : train_ids) train_seqs.push_back(all[static_cast<std::size_t>(i)]);
    for (int i : val_ids) val_seqs.push_back(all[static_cast<std::size_t>(i)]);

    tfd::DetectorModel model;
    const tfd::TrainResult result = tfd::train(config, train_seqs, val_seqs, model, tr_out);
    std::cout << "steps: " << result.steps_run << (result.early_stopped ? " (early stop)" : "")
              << "\nfinal train loss: "
              << (result.loss_history.empty() ? 0.0 : result.loss_history.back())
              << "\nbest val loss: " << result.best_val << " at step " << result.best_step
              << "\ncheckpoint: " << (std::filesystem::path(tr_out) / "checkpoint").string()
              << std::endl;
  });

  // ---- infer -------------------------------------------------------------
  auto* inf = app.add_subcommand("infer", "run sliding-window inference over a sequence");
  std::string inf_ckpt, inf_seq, inf_out;
  int inf_n = -1;
  bool inf_no_cache = false;
  double inf_score = 0.05;
  inf->add_option("--checkpoint", inf_ckpt, "checkpoint directory")->required();
  inf->add_option("--sequence", inf_seq, "sequence directory")->required();
  inf->add_option("--out", inf_out, "output detections CSV")->required();
  inf->add_option("--n", inf_n, "temporal radius (default: checkpoint value)");
  inf->add_flag("--no-cache", inf_no_cache, "recompute backbone features for every window");
  inf->add_option("--score-thresh", inf_score, "detection score floor");
  inf->callback([&]() {
    const tfd::DetectorModel model = tfd::DetectorModel::load(inf_ckpt);
    const int n = inf_n >= 0 ? inf_n : model.config().n;
    if (n != model.config().n && model.config().fusion_mode != tfd::FusionMode::single_frame) {
      throw tfd::ConfigError("--n " + std::to_string(n) + " does not match the checkpoint (n = " +
                             std::to_string(model.config().n) + ")");
    }
    const tfd::Sequence seq = tfd::load_sequence(inf_seq);
    tfd::InferStats stats;
    const auto dets = tfd::infer_sequence(model, seq, n, !inf_no_cache, &stats, inf_score);
    tfd::save_detections_csv(inf_out, dets);
    std::cout << "frames: " << seq.length() << "\ndetections: " << dets.size()
              << "\nbackbone calls: " << stats.backbone_calls << "\ncache hits/misses: "
              << stats.cache_hits << "/" << stats.cache_misses << "\nwall seconds: "
              << stats.wall_seconds << " (" << stats.wall_seconds / seq.length() << " per frame)"
              << std::endl;
  });

  // ---- evaluate ----------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "score detections against ground truth");
  std::string ev_dets, ev_gt, ev_out = "eval";
  double ev_iou = 0.7;
  ev->add_option("--dets", ev_dets, "detections CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--gt", ev_gt, "ground-truth CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "output directory for PR curves and metrics");
  ev->add_option("--iou", ev_iou, "IoU matching floor");
  ev->callback([&]() {
    const tfd::EvalResult result = tfd::evaluate_files(ev_dets, ev_gt, ev_out, ev_iou);
    for (int cls : result.unknown_det_classes) {
      std::cerr << "warning: detections contain class " << cls
                << " absent from ground truth; counted as false positives" << std::endl;
    }
    std::cout << "mAP@" << ev_iou << ": " << result.map << '\n';
    for (const auto& [cls, curve] : result.per_class) {
      std::cout << "  class " << cls << " AP: " << curve.ap << '\n';
    }
    std::cout << "reports: " << ev_out << std::endl;
  });

  // ---- ablate ------------------------------------------------------------
  auto* ab = app.add_subcommand("ablate", "train and score the temporal-window variants");
  std::string ab_out = "ablation";
  std::string ab_data;
  tfd::AblationConfig acfg;
  acfg.scene.occlusion_rate = 0.3;
  acfg.scene.blur_len = 3.0;
  acfg.scene.noise_sigma = 0.02;
  acfg.scene.seed = 100;
  std::vector<std::uint64_t> ab_seeds = {1, 2, 3};
  ab->add_option("--data", ab_data,
                 "existing dataset directory; sequences are split in name order by the "
                 "--*-seqs counts (default: generate the benchmark data)")
      ->check(CLI::ExistingDirectory);
  ab->add_option("--out", ab_out, "output directory");
  ab->add_option("--train-seqs", acfg.train_sequences, "training sequences");
  ab->add_option("--val-seqs", acfg.val_sequences, "validation sequences");
  ab->add_option("--test-seqs", acfg.test_sequences, "test sequences");
  ab->add_option("--length", acfg.scene.length, "frames per sequence");
  ab->add_option("--classes", acfg.scene.num_classes, "object classes");
  ab->add_option("--occlusion", acfg.scene.occlusion_rate, "occluder probability");
  ab->add_option("--blur", acfg.scene.blur_len, "motion blur length px");
  ab->add_option("--noise", acfg.scene.noise_sigma, "pixel noise sigma");
  ab->add_option("--data-seed", acfg.scene.seed, "generator seed for the benchmark data");
  ab->add_option("--seeds", ab_seeds, "training seeds to average over");
  ab->add_option("--steps", acfg.base.max_steps, "training steps per run");
  ab->add_option("--lr", acfg.base.learning_rate, "learning rate");
  ab->add_option("--eval-every", acfg.base.eval_every, "validation cadence in steps");
  ab->callback([&]() {
    std::uint64_t seed_override;
    if (env_seed(seed_override)) acfg.scene.seed = seed_override;
    acfg.seeds = ab_seeds;
    std::vector<tfd::AblationRow> rows;
    if (ab_data.empty()) {
      rows = tfd::run_ablation(acfg, ab_out, true);
    } else {
      auto all = tfd::load_dataset(ab_data);
      const int want = acfg.train_sequences + acfg.val_sequences + acfg.test_sequences;
      if (static_cast<int>(all.size()) != want) {
        throw tfd::ConfigError("--data holds " + std::to_string(all.size()) +
                               " sequences but the split counts sum to " + std::to_string(want));
      }
      // the model has to match the data, not the generator defaults
      acfg.scene.image_size = all.front().frames.front().shape().h;
      int max_class = 0;
      for (const auto& seq : all) {
        for (const auto& g : seq.all_gt()) max_class = std::max(max_class, g.class_id);
      }
      acfg.scene.num_classes = max_class + 1;
      auto mid = all.begin() + acfg.train_sequences;
      auto end_val = mid + acfg.val_sequences;
      const std::vector<tfd::Sequence> train_data(all.begin(), mid);
      const std::vector<tfd::Sequence> val_data(mid, end_val);
      const std::vector<tfd::Sequence> test_data(end_val, all.end());
      rows = tfd::run_ablation(acfg, train_data, val_data, test_data, ab_out, true);
    }
    std::cout << "variant,num_frames,mAP\n";
    for (const auto& r : rows) std::cout << r.variant << ',' << r.num_frames << ',' << r.map << '\n';
    std::cout << "table: " << (std::filesystem::path(ab_out) / "ablation.csv").string() << std::endl;
  });

  // ---- anchors ------------------------------------------------------------
  auto* an = app.add_subcommand("anchors", "dump the anchor grid for debugging");
  int an_img = 128;
  std::string an_out;
  an->add_option("--image-size", an_img, "square image size");
  an->add_option("--out", an_out, "output file (default stdout)");
  an->callback([&]() {
    if (an_img % 128 != 0) throw tfd::ConfigError("--image-size must divide by 128");
    tfd::AnchorConfig config;
    std::vector<std::pair<int, int>> dims;
    int s = an_img / 8;
    for (int i = 0; i < 5; ++i, s /= 2) dims.emplace_back(s, s);
    if (an_out.empty()) {
      tfd::dump_anchors(std::cout, config, dims);
    } else {
      std::ofstream out(an_out, std::ios::trunc);
      if (!out) throw std::runtime_error("cannot write " + an_out);
      tfd::dump_anchors(out, config, dims);
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const tfd::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << std::endl;
    return 3;
  } catch (const tfd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const tfd::ShapeError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
