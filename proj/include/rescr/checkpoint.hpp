#pragma once

#include <filesystem>
#include <iosfwd>

#include "rescr/network.hpp"

namespace rescr {

// Binary container, all integers and floats little-endian:
//   "RCRN" | u32 version | NetworkConfig | u64 count | count x tensor
// where a tensor is u32 name length, name bytes, u8 dtype (0 f64, 1 f32),
// u8 rank, rank x u64 extent, row-major payload.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_checkpoint(std::ostream& os, const ResCrNet<T>& model);

// Reads a checkpoint of either dtype and converts the payload to T.
template <typename T>
ResCrNet<T> read_checkpoint(std::istream& is);

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ResCrNet<T>& model);

template <typename T>
ResCrNet<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace rescr
