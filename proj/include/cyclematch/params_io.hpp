#pragma once

#include <filesystem>

#include "cyclematch/multiscale.hpp"
#include "json.hpp"

namespace cyclematch {

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

/// CycleParams as JSON: projectors nested class -> scale -> {W_feat_map, W_feat},
/// plus "fpn", "w_scale", "w_mask" and "thresholds" (null until fitted).
nlohmann::json params_to_json(const CycleParams& p);
/// Throws FormatError on missing keys, unknown keys or inconsistent shapes.
CycleParams params_from_json(const nlohmann::json& j);

CycleParams load_params(const std::filesystem::path& path);
void save_params(const std::filesystem::path& path, const CycleParams& p);

/// Canonical text form used for files and byte-level comparisons.
std::string dump_json(const nlohmann::json& j);

}  // namespace cyclematch
