#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tfd/rng.hpp"
#include "tfd/tensor.hpp"

namespace tfd {

struct BackboneConfig {
  std::vector<int> block_channels = {8, 16, 32, 64, 64};
  std::vector<int> convs_per_block = {2, 2, 3, 3, 3};
  int in_channels = 3;
  int frozen_blocks = 0;

  void validate() const;
};

struct BackboneFeatures {
  Tensor b3, b4, b5;
  int frame_index = -1;
};

struct ConvLayer {
  Tensor weights;  // (kh, kw, cin, cout)
  Tensor bias;     // (1, 1, 1, cout)
};

struct BackboneParams {
  std::vector<std::vector<ConvLayer>> blocks;  // 5 blocks of 3x3 conv layers
};

// He fan-in normal init, one rng draw per weight in row-major order
Tensor he_conv_init(int kh, int kw, int cin, int cout, Rng& rng);

BackboneParams init_backbone(const BackboneConfig& config, Rng& rng);

// name -> tensor, in a fixed deterministic order (block-major, then layer)
std::vector<std::pair<std::string, Tensor>> named_params(const BackboneParams& params);

// name -> true when the optimizer should update it; blocks below
// config.frozen_blocks are masked out.
std::map<std::string, bool> freeze_mask(const BackboneConfig& config, const BackboneParams& params);

// Throws ShapeError unless height/width divide by 32 and channels match.
void check_input(const BackboneConfig& config, const Shape& frame_shape);

BackboneFeatures extract(const Tensor& frame, const BackboneConfig& config,
                         const BackboneParams& params, int frame_index = -1);

}  // namespace tfd
