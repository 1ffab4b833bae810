#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "fscd/pipeline.hpp"
#include "fscd/synth.hpp"

namespace fscd {

/// Full snapshot of a training configuration, nested as
/// {epochs, ..., weights: {...}, model: {backbone: {...}, detector: {...}}}.
nlohmann::json train_config_to_json(const TrainConfig& cfg);

/// Builds a TrainConfig from defaults plus the keys present in `j`.
/// Unknown keys raise SchemaViolationError so typos never pass silently.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Reads and parses a JSON config file. MissingFileError when absent,
/// SchemaViolationError when unparsable or holding unknown keys.
TrainConfig load_train_config(const std::string& path);

/// Applies one `dotted.path=value` assignment to a JSON document. The value
/// is parsed as JSON when possible (numbers, booleans) and kept as a string
/// otherwise. Throws ValueError on a malformed assignment.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Scene-generation job: one scene spec plus per-split image counts. Each
/// split is generated with `seed + split index` and ids prefixed by the
/// split name, so splits never collide.
struct SynthJobSpec {
  SyntheticSceneSpec scene;
  long train_images = 16;
  long val_images = 4;
  long test_images = 4;
};

nlohmann::json synth_job_to_json(const SynthJobSpec& job);
SynthJobSpec synth_job_from_json(const nlohmann::json& j);
SynthJobSpec load_synth_job(const std::string& path);

}  // namespace fscd
