#pragma once

// Model checkpoints.
//
// A text header carrying the ModelConfig, terminated by a line "end", then a
// flat binary container of named tensors:
//   u32 count, then per tensor: u32 name length, name bytes, u32 rank,
//   u64 extents, float64 payload.
// All integers and floats are little-endian.

#include <filesystem>
#include <string>

#include "cemformer/encoder.hpp"

namespace cem::checkpoint {

std::string to_bytes(const encoder::Model& model);
encoder::Model from_bytes(const std::string& bytes, const std::string& where = "<memory>");

void save(const encoder::Model& model, const std::filesystem::path& path);
/// Throws FormatError naming the path on any header, name or shape problem.
encoder::Model load(const std::filesystem::path& path);

}  // namespace cem::checkpoint
