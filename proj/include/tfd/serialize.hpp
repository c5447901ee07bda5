#pragma once

#include <filesystem>
#include <string>

#include "tfd/tensor.hpp"

namespace tfd {

// Binary tensor file: 16-byte header of four little-endian uint32 dims
// (batch, height, width, channels) followed by numel little-endian IEEE-754
// doubles in row-major NHWC order.
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace tfd
