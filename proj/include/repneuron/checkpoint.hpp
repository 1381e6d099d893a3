#pragma once

#include <string>

#include <json.hpp>

#include "repneuron/model.hpp"

namespace repneuron {

// Checkpoint layout (little-endian):
//   8 bytes  magic "RNCKPT\0\0"
//   u32      format version (1)
//   u32      header length H
//   H bytes  JSON header: {"config": {...}, "tensors": [{name, offset, rows, cols}], "parameters": N}
//   N x f64  flat parameter buffer
inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::ordered_json ModelConfigToJson(const ModelConfig& config);
// Unknown keys are rejected; missing keys keep their defaults.
ModelConfig ModelConfigFromJson(const nlohmann::json& json);

void SaveCheckpoint(const std::string& path, const Model& model);
Model LoadCheckpoint(const std::string& path);

}  // namespace repneuron
