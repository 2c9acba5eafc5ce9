// SPDX-License-Identifier: Apache-2.0
// Binary weight files plus a JSON manifest sidecar (<file>.json).
#pragma once

#include <filesystem>

#include "json.hpp"

#include "lime/model.hpp"

namespace lime::model {

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

/// Writes the tensors of w in named_tensors() order and a manifest carrying
/// the config, tensor shapes, and `metadata` verbatim.
void save_weights(const ModelWeights& w, const std::filesystem::path& file,
                  const nlohmann::json& metadata = nlohmann::json::object());

/// Throws IoError on a missing or malformed file or a shape mismatch.
ModelWeights load_weights(const std::filesystem::path& file);
nlohmann::json load_metadata(const std::filesystem::path& file);

}  // namespace lime::model
