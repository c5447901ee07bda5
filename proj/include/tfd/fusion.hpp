#pragma once

#include <string>
#include <vector>

#include "tfd/tensor.hpp"

namespace tfd {

enum class FusionMode { learned_fusion, concat_no_fusion, single_frame };

std::string fusion_mode_name(FusionMode mode);
FusionMode fusion_mode_from_name(const std::string& name);

enum class FusionInit { center_one_hot, uniform };

// One tap-point's merge parameters: weights (1,1,c,2n+1) holds one row of
// 2n+1 temporal coefficients per channel; bias is (1,1,1,c).
struct FusionSlice {
  Tensor weights;
  Tensor bias;
  int channels() const { return weights.shape().w; }
  int frames() const { return weights.shape().c; }
};

struct FusionParams {
  FusionSlice b3, b4, b5;
  int n = 0;
};

FusionSlice init_fusion(int channels, int n, FusionInit policy);

// output(x,y,k) = sum_j weights[k][j] * maps[j](x,y,k) + bias[k]
Tensor fuse(const std::vector<Tensor>& maps, const FusionSlice& params);

// Same result computed the long way: per-channel gather across frames,
// 1x1 convolution with a (1,1,2n+1,1) kernel, channel-wise re-concat.
Tensor fuse_via_gather(const std::vector<Tensor>& maps, const FusionSlice& params);

// Ablation path: plain channel concatenation in temporal order.
Tensor concat_variant(const std::vector<Tensor>& maps);

}  // namespace tfd
