#pragma once

// Checkpoint directory: manifest.json (format version, model config,
// parameter table) plus params.bin (concatenated little-endian float32).

#include <string>

#include "tsrm/config.hpp"
#include "tsrm/model.hpp"

namespace tsrm {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  TsrmModel<float> model;
  Json extras = Json::object();  // normalization stats, task, ...
};

/// Writes `dir`/manifest.json and `dir`/params.bin, creating `dir` if needed.
void save_checkpoint(const TsrmModel<float>& model, const std::string& dir,
                     const Json& extras = Json::object());

/// Errors: Io (missing files), CorruptCheckpoint (unparseable manifest or
/// blob size disagreeing with the table), ShapeMismatch (table disagrees with
/// the configured model), UnsupportedVersion.
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace tsrm
