#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ctxseg/tensor.hpp"

namespace ctxseg {

struct NamedTensor {
  std::string name;
  std::variant<Tensor<float>, Tensor<double>> value;
};

/// Binary layout (little-endian):
///   "CSEG" | u32 version | u64 body length | body | u32 CRC32 of all preceding bytes
///   body = u32 meta length | meta JSON | u32 tensor count |
///          per tensor: u32 name length | name | u8 dtype (0 f32, 1 f64) | u32 rank |
///                      u64 extents[rank] | row-major payload
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::ordered_json meta;  // config snapshot, labels, optimiser/PRNG counters, epoch
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws truncated, bad_magic, unsupported_version, checksum or parse.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ctxseg
