#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "taskroute/tensor.hpp"

namespace taskroute {

/// One named tensor in a checkpoint. Values are held in double so that both
/// float32 and float64 records load without loss.
struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
  enum class DType : std::uint32_t { f32 = 1, f64 = 2 } dtype = DType::f32;
};

struct Checkpoint {
  std::string metadata;  // UTF-8 JSON document
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout (all integers little-endian) is documented in
/// docs/checkpoint-format.md.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace taskroute
