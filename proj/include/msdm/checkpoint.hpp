#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "msdm/tensor.hpp"

namespace msdm {

using NamedTensor = std::pair<std::string, Tensor>;
using NamedTensors = std::vector<NamedTensor>;

inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'D', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (all integers little-endian):
//   "MSDM" | version u32 | count u32 |
//   per tensor: name_len u32 | name bytes | rank u32 | extents u64[rank] | f64[numel]
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors);
NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// Copies values from `source` into same-named tensors of `target` in place.
// Every target name must be present with an identical shape.
void assign_by_name(NamedTensors& target, const NamedTensors& source);

// Stable 64-bit digest of names, shapes and payload bits.
std::uint64_t digest(const NamedTensors& tensors);

}  // namespace msdm
