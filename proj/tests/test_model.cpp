#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "tfd/model.hpp"
#include "tfd/serialize.hpp"

using tfd::BackboneFeatures;
using tfd::DetectorModel;
using tfd::FusionInit;
using tfd::FusionMode;
using tfd::ModelConfig;
using tfd::Rng;
using tfd::Shape;
using tfd::Tensor;

namespace {

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.backbone.block_channels = {2, 2, 3, 4, 4};
  c.backbone.convs_per_block = {1, 1, 1, 1, 1};
  c.pyramid_channels = 8;
  c.num_classes = 2;
  c.head_convs = 1;
  c.image_size = 128;
  return c;
}

Tensor random_frame(Rng& rng, int size) {
  return random_tensor(rng, Shape{1, size, size, 3}, 0.0, 1.0);
}

}  // namespace

TEST_CASE("model config json round-trips and validates") {
  ModelConfig c = tiny_model_config();
  c.n = 1;
  c.fusion_mode = FusionMode::concat_no_fusion;
  c.prior_pi = 0.02;
  nlohmann::json j = c;
  ModelConfig back = j.get<ModelConfig>();
  CHECK(back.n == 1);
  CHECK(back.fusion_mode == FusionMode::concat_no_fusion);
  CHECK(back.prior_pi == 0.02);
  CHECK(back.backbone.block_channels == c.backbone.block_channels);
  CHECK(back.pyramid_channels == c.pyramid_channels);

  ModelConfig bad = tiny_model_config();
  bad.image_size = 100;  // the five-level pyramid needs multiples of 128
  CHECK_THROWS(bad.validate());

  ModelConfig single = tiny_model_config();
  single.fusion_mode = FusionMode::single_frame;
  single.n = 2;  // single-frame mode contradicts a temporal window
  CHECK_THROWS(single.validate());
  single.n = 0;
  CHECK_NOTHROW(single.validate());

  ModelConfig neg = tiny_model_config();
  neg.n = -1;
  CHECK_THROWS(neg.validate());
}

TEST_CASE("parameter names are unique and mode-appropriate") {
  Rng rng(71);
  ModelConfig c = tiny_model_config();
  DetectorModel fused(c, 7);
  auto params = fused.parameters();
  std::set<std::string> names;
  for (auto& [name, t] : params) names.insert(name);
  CHECK(names.size() == params.size());
  CHECK(names.count("fusion.b3.weights") == 1);
  CHECK(names.count("fusion.b5.bias") == 1);
  CHECK(names.count("backbone.b1.conv1.weights") == 1);
  CHECK(names.count("fpn.lat3.weights") == 1);
  CHECK(names.count("head.cls.out.weights") == 1);

  // every parameter requires grad and appears in the update mask
  auto mask = fused.update_mask();
  for (auto& [name, t] : params) {
    CHECK(t.requires_grad());
    CHECK(mask.count(name) == 1);
  }

  ModelConfig sc = tiny_model_config();
  sc.fusion_mode = FusionMode::single_frame;
  sc.n = 0;
  DetectorModel single(sc, 7);
  for (auto& [name, t] : single.parameters()) {
    CHECK(name.find("fusion.") == std::string::npos);
  }

  ModelConfig cc = tiny_model_config();
  cc.fusion_mode = FusionMode::concat_no_fusion;
  DetectorModel concat(cc, 7);
  for (auto& [name, t] : concat.parameters()) {
    CHECK(name.find("fusion.") == std::string::npos);
  }
}

TEST_CASE("concat mode widens the lateral convolutions by the window size") {
  ModelConfig c = tiny_model_config();
  c.fusion_mode = FusionMode::concat_no_fusion;
  c.n = 2;
  DetectorModel m(c, 3);
  for (auto& [name, t] : m.parameters()) {
    if (name == "fpn.lat3.weights") CHECK(t.shape().w == 3 * 5);  // cin axis
    if (name == "fpn.lat5.weights") CHECK(t.shape().w == 4 * 5);
  }

  DetectorModel fused(tiny_model_config(), 3);
  for (auto& [name, t] : fused.parameters()) {
    if (name == "fpn.lat3.weights") CHECK(t.shape().w == 3);
  }
}

TEST_CASE("level dims and anchor grids follow the stride ladder") {
  DetectorModel m(tiny_model_config(), 1);
  auto dims = m.level_dims();
  REQUIRE(dims.size() == 5);
  CHECK(dims[0] == std::pair<int, int>{16, 16});
  CHECK(dims[4] == std::pair<int, int>{1, 1});

  const auto& grids = m.anchor_grids();
  REQUIRE(grids.size() == 5);
  CHECK(grids[0].size() == 16 * 16 * 9);
  CHECK(grids[4].size() == 9);
  // stride-8 anchors center on half-stride offsets
  CHECK(grids[0][0].cx() == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("center-one-hot fusion reproduces the single-frame model exactly") {
  ModelConfig fused_cfg = tiny_model_config();
  fused_cfg.n = 1;
  fused_cfg.fusion_init = FusionInit::center_one_hot;
  ModelConfig single_cfg = tiny_model_config();
  single_cfg.fusion_mode = FusionMode::single_frame;
  single_cfg.n = 0;

  DetectorModel fused(fused_cfg, 11);
  DetectorModel single(single_cfg, 11);

  Rng rng(72);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor prev = random_frame(rng, 128);
    Tensor cur = random_frame(rng, 128);
    Tensor next = random_frame(rng, 128);
    std::vector<BackboneFeatures> win = {fused.extract_frame(prev), fused.extract_frame(cur),
                                         fused.extract_frame(next)};
    auto out_fused = fused.forward(win);
    auto out_single = single.forward({single.extract_frame(cur)});
    REQUIRE(out_fused.heads.size() == 5);
    for (int lvl = 0; lvl < 5; ++lvl) {
      CHECK(oracle::max_abs_diff(out_fused.heads[lvl].cls, out_single.heads[lvl].cls) == 0.0);
      CHECK(oracle::max_abs_diff(out_fused.heads[lvl].box, out_single.heads[lvl].box) == 0.0);
    }
  }
}

TEST_CASE("forward rejects the wrong window length and frame size") {
  ModelConfig c = tiny_model_config();
  c.n = 1;
  DetectorModel m(c, 2);
  Rng rng(73);
  Tensor frame = random_frame(rng, 128);
  auto f = m.extract_frame(frame);
  CHECK_THROWS(m.forward({f}));  // needs 3 features
  CHECK_THROWS_AS(m.extract_frame(random_frame(rng, 64)), tfd::ShapeError);
}

TEST_CASE("checkpoints round-trip bit for bit") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "tfd_model_ckpt";
  fs::remove_all(dir);

  ModelConfig c = tiny_model_config();
  c.n = 1;
  DetectorModel m(c, 23);
  m.save(dir);
  CHECK(fs::exists(dir / "model_config.json"));
  CHECK(fs::exists(dir / "manifest.json"));

  DetectorModel back = DetectorModel::load(dir);
  CHECK(back.config().n == 1);
  auto pa = m.parameters();
  auto pb = back.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(oracle::max_abs_diff(pa[i].second, pb[i].second) == 0.0);
  }

  // same outputs on the same input
  Rng rng(74);
  Tensor frame = random_frame(rng, 128);
  std::vector<BackboneFeatures> wa = {m.extract_frame(frame), m.extract_frame(frame),
                                      m.extract_frame(frame)};
  std::vector<BackboneFeatures> wb = {back.extract_frame(frame), back.extract_frame(frame),
                                      back.extract_frame(frame)};
  auto oa = m.forward(wa);
  auto ob = back.forward(wb);
  CHECK(oracle::max_abs_diff(oa.heads[0].cls, ob.heads[0].cls) == 0.0);

  // a tensor file with the wrong shape must be rejected
  tfd::save_tensor((dir / "fusion.b3.weights.bin").string(),
                   Tensor::zeros(Shape{1, 1, 2, 2}));
  CHECK_THROWS(DetectorModel::load(dir));

  // a missing tensor file must be rejected too
  fs::remove(dir / "fusion.b3.weights.bin");
  CHECK_THROWS(DetectorModel::load(dir));
  fs::remove_all(dir);
}
