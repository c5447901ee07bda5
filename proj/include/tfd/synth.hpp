#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tfd/eval.hpp"
#include "tfd/tensor.hpp"

namespace tfd {

struct SceneConfig {
  int image_size = 128;
  int length = 40;
  int num_objects_min = 3;
  int num_objects_max = 6;
  int num_classes = 3;
  double speed_min = 2.5;
  double speed_max = 5.5;
  double size_min = 10.0;
  double size_max = 22.0;
  double occlusion_rate = 0.0;
  double blur_len = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

struct Sequence {
  std::vector<Tensor> frames;                    // each (1,H,W,3) in [0,1]
  std::vector<std::vector<GroundTruthBox>> gt;   // per frame, frame_index set
  int length() const { return static_cast<int>(frames.size()); }
  std::vector<GroundTruthBox> all_gt() const;
};

// Deterministic: the same config (seed included) reproduces the sequence
// byte for byte. Ground truth always covers the full object extent, also
// while an occluder hides it.
Sequence generate(const SceneConfig& config);

struct FrameWindow {
  std::vector<int> indices;      // 2n+1 entries, border-clamped
  std::vector<bool> replicated;  // true where clamping replaced the index
  int center = 0;
};

FrameWindow window(int sequence_length, int t, int n);

// Whole-sequence split: shuffled by seed, ceil(count * val_fraction) of at
// least 1 go to validation.
std::pair<std::vector<int>, std::vector<int>> split_sequences(int count, double val_fraction,
                                                              std::uint64_t seed);

// Directory layout: frame_%05d.bin + gt.csv + config.json
void save_sequence(const std::filesystem::path& dir, const Sequence& seq, const SceneConfig& config);
Sequence load_sequence(const std::filesystem::path& dir);

}  // namespace tfd
