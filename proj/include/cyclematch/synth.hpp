#pragma once

#include <cstdint>
#include <vector>

#include "cyclematch/multiscale.hpp"

namespace cyclematch {

struct SynthConfig {
    int classes = 3;
    int extent = 64;                  ///< image (mask) side length
    std::vector<int> scales{32, 16};  ///< feature grid side per scale, finest first
    std::vector<int> channels{16, 32};
    float noise = 0.3f;               ///< per-cell Gaussian noise norm relative to the unit direction
    float distractor_level = 0.0f;    ///< fraction of background pixels turned into distractors
    float distractor_offset = 0.3f;   ///< weight of the shared distractor direction
    float blob_fraction = 0.12f;      ///< target fraction of the coarsest grid per class blob
};

/// Raw (unnormalized) multi-scale features with masks. `aug` is the reference
/// layout with fresh noise; `test` is an independent layout with the same class
/// directions.
struct SynthScene {
    std::uint64_t seed = 0;
    float distractor_level = 0.0f;
    ScaleSet ref, aug, test;
    ClassMask ref_mask, aug_mask, test_mask;
};

/// Bit-exactly reproducible from (seed, config).
SynthScene synth_scene(std::uint64_t seed, const SynthConfig& cfg);

}  // namespace cyclematch
