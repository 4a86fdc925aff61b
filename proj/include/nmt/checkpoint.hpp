#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "nmt/tensor.hpp"

namespace nmt {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Writes tensors in the "NMTF1" container: magic, u64 count, then per
/// tensor a u64 name length, UTF-8 name, u64 rank, u64 extents and the
/// row-major values as little-endian float32.
void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);

/// Reads an "NMTF1" container. Loaded tensors do not require gradients.
std::vector<NamedTensor> load_tensors(const std::filesystem::path& path);

}  // namespace nmt
