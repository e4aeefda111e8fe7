#pragma once

// Binary checkpoint container.
//
//   "PDCK"  u32 version
//   u32 config bytes, config text (key=value lines, includes network=...)
//   u32 tensor count, then per tensor:
//       u16 name bytes, name, u8 rank, u64 dims[rank], u64 offset (in values)
//   u64 value count, f32 values
//   u64 FNV-1a digest of every preceding byte
//
// All integers and floats little-endian.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pointdiff/model.hpp"
#include "pointdiff/tensor.hpp"

namespace pointdiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  tensor::Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::map<std::string, std::string> config;  // model keys plus "network"
  std::vector<CheckpointTensor> tensors;

  std::string network() const;
  ModelConfig model_config() const;
};

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) noexcept;

template <typename T>
Checkpoint make_checkpoint(const std::string& network, const ModelConfig& cfg,
                           const tensor::ParameterStore<T>& params);

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies every tensor into `params`; names and shapes must match exactly.
template <typename T>
void apply_checkpoint(const Checkpoint& ckpt, tensor::ParameterStore<T>& params);

template <typename T>
Encoder<T> load_encoder(const std::filesystem::path& path);
template <typename T>
Decoder<T> load_decoder(const std::filesystem::path& path);

}  // namespace pointdiff
