#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "circuitscope/model.hpp"
#include "json.hpp"

namespace circuitscope {

struct OptimizerState {
  Weights m;
  Weights v;
  std::int64_t t = 0;
};

struct Checkpoint {
  int step = 0;
  ModelConfig model_config;
  Weights weights;
  std::optional<OptimizerState> optimizer;
  double train_loss = 0.0;
  nlohmann::json run_config = nlohmann::json::object();  // train + corpus snapshot

  Transformer model() const { return Transformer(model_config, weights); }
};

// File layout:
//   "CKPTv001" | u64 LE header length | UTF-8 JSON header | zero pad to 64 |
//   float32 LE payloads, each starting on a 64-byte boundary.
// Header "tensors" entries carry name, shape, dtype ("f32"), offset (relative
// to the start of the payload section), nbytes and crc32.
inline constexpr char kCheckpointMagic[] = "CKPTv001";
inline constexpr std::size_t kCheckpointAlignment = 64;

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct CheckpointFile {
  int step = 0;
  std::filesystem::path path;
};

// ckpt_<step>.bin files in a directory, ordered by step.
std::vector<CheckpointFile> list_checkpoints(const std::filesystem::path& dir);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace circuitscope
