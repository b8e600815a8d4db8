#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cyclematch/pipeline.hpp"
#include "cyclematch/synth.hpp"
#include "cyclematch/training.hpp"
#include "json.hpp"

namespace cyclematch {

/// Per-scale feature files plus a label mask for one image.
struct ImageInput {
    std::string id;
    std::vector<std::filesystem::path> features;
    std::filesystem::path mask;
};

struct BenchConfig {
    int d_match = 64;
    int d_enc = 256;
    bool naive = true;  ///< also time the naive kernel and report the difference
};

struct RunConfig {
    std::optional<ImageInput> reference;
    std::optional<ImageInput> train_view;  ///< augmented copy of the reference
    std::optional<ImageInput> test;
    std::optional<std::filesystem::path> params;
    std::optional<std::filesystem::path> prediction;

    int classes = 0;  ///< 0: take from params or the reference mask
    std::vector<int> d_match;
    int d_fpn = 32;
    int d_proj = 16;
    double lambda_l1 = 1.0;
    std::uint64_t seed = 0;
    std::string decoder = "oracle";

    PipelineOptions pipeline;
    WarmupConfig warmup;
    MaskConfig mask;
    SynthConfig synth;
    BenchConfig bench;
};

/// Validates everything up front. Relative paths resolve against `base`.
/// Unknown keys and ill-typed or out-of-range values raise ConfigError.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base);
RunConfig load_run_config(const std::filesystem::path& path);

/// Config for a scene written by `synth` into `dir` (paths relative to it).
nlohmann::json synth_run_config(const SynthConfig& cfg, std::uint64_t seed);

}  // namespace cyclematch
