#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "glab/tensor.hpp"

namespace glab {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// GLAB1 container: the bytes "GLAB1\n", a single-line JSON header
/// {"names":[...],"shapes":[[...],...],"dtype":"f64"} terminated by '\n', then
/// each tensor's values as little-endian IEEE-754 doubles in header order.
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const NamedTensors& tensors);
NamedTensors decode_checkpoint(const std::string& bytes);

/// Looks a tensor up by name; throws std::out_of_range when absent.
const Tensor& find_tensor(const NamedTensors& tensors, const std::string& name);

}  // namespace glab
