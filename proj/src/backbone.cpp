#include "tfd/backbone.hpp"

#include <cmath>

namespace tfd {

void BackboneConfig::validate() const {
  if (block_channels.size() != 5) {
    throw std::invalid_argument("backbone needs 5 block channel counts, got " +
                                std::to_string(block_channels.size()));
  }
  if (convs_per_block.size() != 5) {
    throw std::invalid_argument("backbone needs 5 conv counts, got " +
                                std::to_string(convs_per_block.size()));
  }
  for (int c : block_channels) {
    if (c <= 0) throw std::invalid_argument("block channel counts must be positive");
  }
  for (int i = 0; i < 3; ++i) {
    if (block_channels[i] > block_channels[i + 1]) {
      throw std::invalid_argument("block channels must be nondecreasing through blocks 1-4");
    }
  }
  for (int k : convs_per_block) {
    if (k <= 0) throw std::invalid_argument("convs per block must be positive");
  }
  if (in_channels <= 0) throw std::invalid_argument("in_channels must be positive");
  if (frozen_blocks < 0 || frozen_blocks > 5) {
    throw std::invalid_argument("frozen_blocks must lie in [0,5], got " +
                                std::to_string(frozen_blocks));
  }
}

Tensor he_conv_init(int kh, int kw, int cin, int cout, Rng& rng) {
  Tensor w(Shape{kh, kw, cin, cout});
  const double stddev = std::sqrt(2.0 / (static_cast<double>(kh) * kw * cin));
  double* d = w.data();
  for (std::int64_t i = 0; i < w.numel(); ++i) d[i] = rng.normal(0.0, stddev);
  return w;
}

BackboneParams init_backbone(const BackboneConfig& config, Rng& rng) {
  config.validate();
  BackboneParams params;
  int cin = config.in_channels;
  for (int b = 0; b < 5; ++b) {
    std::vector<ConvLayer> layers;
    const int cout = config.block_channels[b];
    for (int l = 0; l < config.convs_per_block[b]; ++l) {
      ConvLayer layer;
      layer.weights = he_conv_init(3, 3, cin, cout, rng);
      layer.bias = Tensor::zeros(Shape{1, 1, 1, cout});
      layers.push_back(layer);
      cin = cout;
    }
    params.blocks.push_back(std::move(layers));
  }
  return params;
}

std::vector<std::pair<std::string, Tensor>> named_params(const BackboneParams& params) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    for (std::size_t l = 0; l < params.blocks[b].size(); ++l) {
      const std::string stem = "backbone.b" + std::to_string(b + 1) + ".conv" + std::to_string(l + 1);
      out.emplace_back(stem + ".weights", params.blocks[b][l].weights);
      out.emplace_back(stem + ".bias", params.blocks[b][l].bias);
    }
  }
  return out;
}

std::map<std::string, bool> freeze_mask(const BackboneConfig& config, const BackboneParams& params) {
  std::map<std::string, bool> mask;
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    const bool trainable = static_cast<int>(b) >= config.frozen_blocks;
    for (std::size_t l = 0; l < params.blocks[b].size(); ++l) {
      const std::string stem = "backbone.b" + std::to_string(b + 1) + ".conv" + std::to_string(l + 1);
      mask[stem + ".weights"] = trainable;
      mask[stem + ".bias"] = trainable;
    }
  }
  return mask;
}

void check_input(const BackboneConfig& config, const Shape& frame_shape) {
  if (frame_shape.c != config.in_channels) {
    throw ShapeError("channels", "frame has " + std::to_string(frame_shape.c) +
                                     " channels, backbone expects " +
                                     std::to_string(config.in_channels));
  }
  if (frame_shape.h % 32 != 0) {
    throw ShapeError("height", "frame height " + std::to_string(frame_shape.h) +
                                   " must divide by 32 (five pooling stages)");
  }
  if (frame_shape.w % 32 != 0) {
    throw ShapeError("width", "frame width " + std::to_string(frame_shape.w) +
                                  " must divide by 32 (five pooling stages)");
  }
}

BackboneFeatures extract(const Tensor& frame, const BackboneConfig& config,
                         const BackboneParams& params, int frame_index) {
  check_input(config, frame.shape());
  BackboneFeatures feats;
  feats.frame_index = frame_index;
  Tensor x = frame;
  for (int b = 0; b < 5; ++b) {
    for (const ConvLayer& layer : params.blocks[b]) {
      x = relu(conv2d(x, layer.weights, layer.bias, 1, Padding::Same));
    }
    x = maxpool2(x);
    if (b == 2) feats.b3 = x;
    if (b == 3) feats.b4 = x;
    if (b == 4) feats.b5 = x;
  }
  return feats;
}

}  // namespace tfd
