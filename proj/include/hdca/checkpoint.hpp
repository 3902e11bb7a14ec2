#pragma once

// Binary checkpoint: "HDCA", u32 version, u32 count, then per tensor
// u16 name length, name, u8 dtype, u8 rank, u64 dims, little-endian data.
// An optional second block with the same layout carries optimizer state.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hdca/model.hpp"
#include "hdca/training.hpp"

namespace hdca {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class BadVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
/// Model and checkpoint disagree on tensor names or shapes.
class CheckpointMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct CheckpointData {
  std::vector<NamedTensor> tensors;
  std::optional<std::vector<NamedTensor>> optimizer;  // names start with "opt."
};

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data);
CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes);

/// meta.* config tensors, then every parameter and buffer in registration order.
CheckpointData snapshot(const SegModel& model, const OptimizerState* optimizer = nullptr);

ModelConfig config_from_checkpoint(const CheckpointData& data);

/// Copies parameter values into `model`. Any missing, unexpected or reshaped
/// tensor raises CheckpointMismatchError listing every difference by name.
void restore_parameters(SegModel& model, const CheckpointData& data);
OptimizerState restore_optimizer(const CheckpointData& data);

void save_checkpoint(const std::filesystem::path& path, const SegModel& model,
                     const OptimizerState* optimizer = nullptr);
CheckpointData read_checkpoint(const std::filesystem::path& path);

struct LoadedModel {
  std::unique_ptr<SegModel> model;
  std::optional<OptimizerState> optimizer;
};
/// Rebuilds the model from its stored config and loads its parameters.
LoadedModel load_model(const std::filesystem::path& path);

}  // namespace hdca
