#include "tfd/model.hpp"

#include <fstream>

#include "tfd/serialize.hpp"

namespace tfd {

void ModelConfig::validate() const {
  backbone.validate();
  if (n < 0) throw std::invalid_argument("n must be >= 0");
  if (fusion_mode == FusionMode::single_frame && n != 0) {
    throw std::invalid_argument("single_frame mode requires n = 0");
  }
  if (pyramid_channels <= 0) throw std::invalid_argument("pyramid_channels must be positive");
  if (num_classes <= 0) throw std::invalid_argument("num_classes must be positive");
  if (head_convs < 0) throw std::invalid_argument("head_convs must be >= 0");
  if (prior_pi <= 0 || prior_pi >= 1) throw std::invalid_argument("prior_pi must lie in (0,1)");
  if (image_size % 128 != 0) {
    throw std::invalid_argument("image_size must divide by 128 so the pyramid halves exactly "
                                "down to p7, got " + std::to_string(image_size));
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"block_channels", c.backbone.block_channels},
                     {"convs_per_block", c.backbone.convs_per_block},
                     {"in_channels", c.backbone.in_channels},
                     {"frozen_blocks", c.backbone.frozen_blocks},
                     {"n", c.n},
                     {"fusion_mode", fusion_mode_name(c.fusion_mode)},
                     {"fusion_init", c.fusion_init == FusionInit::center_one_hot ? "center_one_hot"
                                                                                 : "uniform"},
                     {"pyramid_channels", c.pyramid_channels},
                     {"num_classes", c.num_classes},
                     {"head_convs", c.head_convs},
                     {"image_size", c.image_size},
                     {"prior_pi", c.prior_pi},
                     {"anchor_scales", c.anchors.scales},
                     {"anchor_ratios", c.anchors.aspect_ratios},
                     {"anchor_base_scale", c.anchors.base_scale}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.backbone.block_channels = j.value("block_channels", d.backbone.block_channels);
  c.backbone.convs_per_block = j.value("convs_per_block", d.backbone.convs_per_block);
  c.backbone.in_channels = j.value("in_channels", d.backbone.in_channels);
  c.backbone.frozen_blocks = j.value("frozen_blocks", d.backbone.frozen_blocks);
  c.n = j.value("n", d.n);
  c.fusion_mode = fusion_mode_from_name(j.value("fusion_mode", fusion_mode_name(d.fusion_mode)));
  const std::string init = j.value("fusion_init", std::string("center_one_hot"));
  if (init == "center_one_hot") {
    c.fusion_init = FusionInit::center_one_hot;
  } else if (init == "uniform") {
    c.fusion_init = FusionInit::uniform;
  } else {
    throw std::invalid_argument("unknown fusion_init '" + init + "'");
  }
  c.pyramid_channels = j.value("pyramid_channels", d.pyramid_channels);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.head_convs = j.value("head_convs", d.head_convs);
  c.image_size = j.value("image_size", d.image_size);
  c.prior_pi = j.value("prior_pi", d.prior_pi);
  c.anchors.scales = j.value("anchor_scales", d.anchors.scales);
  c.anchors.aspect_ratios = j.value("anchor_ratios", d.anchors.aspect_ratios);
  c.anchors.base_scale = j.value("anchor_base_scale", d.anchors.base_scale);
}

DetectorModel::DetectorModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  backbone_ = init_backbone(config_.backbone, rng);

  // lateral input widths depend on how the temporal maps are merged; the
  // fusion params themselves draw nothing from the rng, so a fused model and
  // a single-frame model share every other parameter bit for bit
  const int mult = config_.fusion_mode == FusionMode::concat_no_fusion ? config_.window_size() : 1;
  const int c3 = config_.backbone.block_channels[2] * mult;
  const int c4 = config_.backbone.block_channels[3] * mult;
  const int c5 = config_.backbone.block_channels[4] * mult;
  fpn_ = init_fpn(c3, c4, c5, config_.pyramid_channels, rng);
  heads_ = init_heads(config_.pyramid_channels, config_.head_convs, config_.num_classes,
                      config_.anchors.per_cell(), config_.prior_pi, rng);

  if (config_.fusion_mode == FusionMode::learned_fusion) {
    fusion_.n = config_.n;
    fusion_.b3 = init_fusion(config_.backbone.block_channels[2], config_.n, config_.fusion_init);
    fusion_.b4 = init_fusion(config_.backbone.block_channels[3], config_.n, config_.fusion_init);
    fusion_.b5 = init_fusion(config_.backbone.block_channels[4], config_.n, config_.fusion_init);
  }

  for (auto& [name, tensor] : parameters()) {
    (void)name;
    tensor.set_requires_grad(true);
  }
  build_anchor_grids();
}

BackboneFeatures DetectorModel::extract_frame(const Tensor& frame, int frame_index) const {
  const Shape& s = frame.shape();
  if (s.h != config_.image_size || s.w != config_.image_size) {
    throw ShapeError("spatial", "extract_frame: model expects " +
                                    std::to_string(config_.image_size) + "x" +
                                    std::to_string(config_.image_size) + " frames");
  }
  return extract(frame, config_.backbone, backbone_, frame_index);
}

DetectorModel::Outputs DetectorModel::forward(const std::vector<BackboneFeatures>& window) const {
  if (static_cast<int>(window.size()) != config_.window_size()) {
    throw std::invalid_argument("forward expects " + std::to_string(config_.window_size()) +
                                " frames, got " + std::to_string(window.size()));
  }
  Tensor m3, m4, m5;
  switch (config_.fusion_mode) {
    case FusionMode::single_frame: {
      const auto& center = window[static_cast<std::size_t>(config_.n)];
      m3 = center.b3;
      m4 = center.b4;
      m5 = center.b5;
      break;
    }
    case FusionMode::learned_fusion: {
      std::vector<Tensor> t3, t4, t5;
      for (const auto& f : window) {
        t3.push_back(f.b3);
        t4.push_back(f.b4);
        t5.push_back(f.b5);
      }
      m3 = fuse(t3, fusion_.b3);
      m4 = fuse(t4, fusion_.b4);
      m5 = fuse(t5, fusion_.b5);
      break;
    }
    case FusionMode::concat_no_fusion: {
      std::vector<Tensor> t3, t4, t5;
      for (const auto& f : window) {
        t3.push_back(f.b3);
        t4.push_back(f.b4);
        t5.push_back(f.b5);
      }
      m3 = concat_variant(t3);
      m4 = concat_variant(t4);
      m5 = concat_variant(t5);
      break;
    }
  }

  Outputs out;
  out.pyramid = build_pyramid(m3, m4, m5, fpn_);
  for (const Tensor* level : out.pyramid.levels()) {
    out.heads.push_back(run_head(*level, heads_));
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> DetectorModel::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out = named_params(backbone_);
  if (config_.fusion_mode == FusionMode::learned_fusion) {
    out.emplace_back("fusion.b3.weights", fusion_.b3.weights);
    out.emplace_back("fusion.b3.bias", fusion_.b3.bias);
    out.emplace_back("fusion.b4.weights", fusion_.b4.weights);
    out.emplace_back("fusion.b4.bias", fusion_.b4.bias);
    out.emplace_back("fusion.b5.weights", fusion_.b5.weights);
    out.emplace_back("fusion.b5.bias", fusion_.b5.bias);
  }
  for (auto& p : named_params(fpn_)) out.push_back(p);
  for (auto& p : named_params(heads_)) out.push_back(p);
  return out;
}

std::map<std::string, bool> DetectorModel::update_mask() const {
  std::map<std::string, bool> mask = freeze_mask(config_.backbone, backbone_);
  for (const auto& [name, tensor] : parameters()) {
    (void)tensor;
    if (!mask.count(name)) mask[name] = true;
  }
  return mask;
}

std::vector<std::pair<int, int>> DetectorModel::level_dims() const {
  std::vector<std::pair<int, int>> dims;
  int s = config_.image_size / 8;
  for (int i = 0; i < 5; ++i) {
    dims.emplace_back(s, s);
    s /= 2;
  }
  return dims;
}

void DetectorModel::build_anchor_grids() {
  anchor_grids_.clear();
  const auto dims = level_dims();
  for (int i = 0; i < 5; ++i) {
    anchor_grids_.push_back(
        make_anchors(config_.anchors, i, dims[static_cast<std::size_t>(i)].first,
                     dims[static_cast<std::size_t>(i)].second));
  }
}

void DetectorModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  {
    nlohmann::json j = config_;
    std::ofstream out(dir / "model_config.json", std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / "model_config.json").string());
    out << j.dump(2) << '\n';
  }
  nlohmann::json manifest;
  manifest["format"] = 1;
  for (const auto& [name, tensor] : parameters()) {
    const Shape s = tensor.shape();
    manifest["tensors"][name] = {s.b, s.h, s.w, s.c};
    save_tensor(dir / (name + ".bin"), tensor);
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

DetectorModel DetectorModel::load(const std::filesystem::path& dir) {
  std::ifstream cfg_in(dir / "model_config.json");
  if (!cfg_in) throw std::runtime_error("cannot read " + (dir / "model_config.json").string());
  ModelConfig config = nlohmann::json::parse(cfg_in).get<ModelConfig>();

  DetectorModel model(config, 0);

  std::ifstream man_in(dir / "manifest.json");
  if (!man_in) throw std::runtime_error("cannot read " + (dir / "manifest.json").string());
  const nlohmann::json manifest = nlohmann::json::parse(man_in);
  const auto& tensors = manifest.at("tensors");

  for (auto& [name, tensor] : model.parameters()) {
    if (!tensors.contains(name)) {
      throw std::runtime_error("checkpoint misses tensor '" + name + "'");
    }
    Tensor loaded = load_tensor(dir / (name + ".bin"));
    const auto dims = tensors.at(name).get<std::vector<int>>();
    const Shape want{dims.at(0), dims.at(1), dims.at(2), dims.at(3)};
    if (!(loaded.shape() == want) || !(tensor.shape() == want)) {
      throw std::runtime_error("checkpoint shape mismatch for '" + name + "': file " +
                               loaded.shape().str() + ", manifest " + want.str() + ", model " +
                               tensor.shape().str());
    }
    std::copy(loaded.data(), loaded.data() + loaded.numel(), tensor.data());
  }
  return model;
}

}  // namespace tfd
