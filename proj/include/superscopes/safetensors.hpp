#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "superscopes/tensor.hpp"

namespace superscopes {

/// Reads a safetensors container: u64 little-endian header length, JSON header
/// (name -> {dtype, shape, data_offsets}), raw little-endian payload.
/// F32 and F16 are accepted; F16 is widened. Any other dtype is a SchemaViolation.
TensorMap read_safetensors(const std::filesystem::path &path);

/// Parses an in-memory container. Same rules as read_safetensors.
TensorMap parse_safetensors(std::span<const uint8_t> bytes);

/// Writes every tensor as F32. Tensor names are emitted in map order.
void write_safetensors(const std::filesystem::path &path, const TensorMap &tensors);

float half_to_float(uint16_t h);

} // namespace superscopes
