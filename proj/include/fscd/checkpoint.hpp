#pragma once

#include <json.hpp>

#include <string>

#include "fscd/nn/optim.hpp"

namespace fscd {

/// Binary weight container: magic, format version, a JSON metadata blob
/// (model configuration, stage, schema version), then named float64 tensors
/// in list order.
void save_checkpoint(const std::string& path, const nn::ParamList& params,
                     const nlohmann::json& meta);

/// Reads metadata without touching weights.
nlohmann::json peek_checkpoint_meta(const std::string& path);

/// Loads weights into an existing parameter list. Every stored tensor must
/// match a parameter of the same name and shape, and vice versa.
nlohmann::json load_checkpoint(const std::string& path, nn::ParamList& params);

}  // namespace fscd
