#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mtkd/tensor.hpp"

namespace mtkd {

// Named-tensor container serialized as: "MTKD" magic, u32 version, u32 tensor
// count, then per tensor (u32 name length, name bytes, u32 rank, u64 extents,
// little-endian f32 data), then a u64 FNV-1a checksum of everything between
// the magic and the checksum itself.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::uint64_t fnv1a64_bytes(const unsigned char* data, std::size_t n,
                            std::uint64_t h = 0xcbf29ce484222325ULL);

void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace mtkd
