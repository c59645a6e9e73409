#pragma once

// Flat binary weight checkpoints, little-endian:
//   magic "CGV1" | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u32 dims[rank] |
//               f32 data[numel]

#include <map>
#include <string>
#include <vector>

#include "cosinegate/model.hpp"
#include "cosinegate/tensor.hpp"

namespace cosinegate {

void save_checkpoint(const std::string& path,
                     const std::vector<NamedTensor<float>>& tensors);

std::map<std::string, Tensor> load_checkpoint(const std::string& path);

// Strict restore: the file must contain exactly the named tensors, with
// matching shapes.
void load_checkpoint_into(const std::string& path,
                          std::vector<NamedTensor<float>>& tensors);

}  // namespace cosinegate
