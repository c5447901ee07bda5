#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "tfd/backbone.hpp"
#include "tfd/fusion.hpp"
#include "tfd/pyramid.hpp"

namespace tfd {

struct ModelConfig {
  BackboneConfig backbone;
  int n = 2;
  FusionMode fusion_mode = FusionMode::learned_fusion;
  FusionInit fusion_init = FusionInit::center_one_hot;
  int pyramid_channels = 64;
  int num_classes = 3;
  int head_convs = 2;
  int image_size = 128;
  double prior_pi = 0.01;
  AnchorConfig anchors;

  int window_size() const { return 2 * n + 1; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

class DetectorModel {
 public:
  DetectorModel() = default;
  DetectorModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  BackboneFeatures extract_frame(const Tensor& frame, int frame_index = -1) const;

  struct Outputs {
    Pyramid pyramid;
    std::vector<HeadOutput> heads;  // p3..p7
  };
  // window must hold 2n+1 per-frame features in temporal order
  Outputs forward(const std::vector<BackboneFeatures>& window) const;

  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::map<std::string, bool> update_mask() const;

  const std::vector<std::vector<Box>>& anchor_grids() const { return anchor_grids_; }
  std::vector<std::pair<int, int>> level_dims() const;

  void save(const std::filesystem::path& dir) const;
  static DetectorModel load(const std::filesystem::path& dir);

 private:
  void build_anchor_grids();

  ModelConfig config_;
  BackboneParams backbone_;
  FusionParams fusion_;
  FpnParams fpn_;
  HeadParams heads_;
  std::vector<std::vector<Box>> anchor_grids_;
};

}  // namespace tfd
