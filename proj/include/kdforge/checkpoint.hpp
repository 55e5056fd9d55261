// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor checkpoints: "KDFG", version u32, tensor count u32, then per
// tensor a u32-prefixed UTF-8 name, dtype u8 (0 = f32), ndim u32, dims u32[]
// and little-endian data.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "kdforge/nn.hpp"

namespace kdforge {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(std::ostream& os, const NamedTensors& tensors);
// Loaded tensors do not require grad.
NamedTensors read_checkpoint(std::istream& is);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

}  // namespace kdforge
