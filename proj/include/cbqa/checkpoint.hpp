#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "cbqa/adafactor.hpp"
#include "cbqa/model.hpp"

namespace cbqa {

// On disk: the line "CBQA-CKPT v1", one line of canonical JSON holding the
// model config, trainer metadata and tensor counts, then named tensors
// (u32 name length, name, u32 rows, u32 cols, little-endian float32 data in
// row-major order): parameters first, then optimizer accumulators.
struct Checkpoint {
  ModelConfig config;
  Parameters<float> params;
  std::optional<AdafactorState<float>> optimizer;
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// SHA-256 over tensor names, shapes and float32 bytes.
std::string parameter_digest(const Parameters<float>& params);

}  // namespace cbqa
