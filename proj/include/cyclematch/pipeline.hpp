#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cyclematch/decoder.hpp"
#include "cyclematch/multiscale.hpp"
#include "cyclematch/prompts.hpp"

namespace cyclematch {

/// Prompt-sampling ablations.
struct Ablation {
    bool single_point = false;             ///< one positive at the argmax, no negatives
    bool no_negatives = false;             ///< positives only
    bool no_scc = false;                   ///< same as lambda_scc = 0
    std::optional<float> fixed_threshold;  ///< replaces the fitted per-class threshold
};

struct PipelineOptions {
    int k = 10;
    int points = 16;
    float lambda_scc = 2.0f;
    Ablation ablation;
    KernelOptions kernel;

    CycleSelectOptions match_options() const;
};

struct ClassOutcome {
    int class_id = 0;
    std::optional<SimilarityMap> similarity;  ///< nullopt when the class is absent from the reference
    PromptSet prompts;
    float threshold = 0.0f;
    float score = 0.0f;  ///< max aggregated similarity
};

/// Threshold used for class c: the ablation's fixed value, else the fitted one,
/// else no threshold at all (-inf) when parameters have not been fitted yet.
float class_threshold(const CycleParams& params, int class_id, const PipelineOptions& opts);

/// Matching plus prompt sampling for one class of one test image.
ClassOutcome prompt_class(const ScaleSet& ref, const ClassMask& ref_mask, const ScaleSet& test, ImageExtent image,
                          int class_id, const CycleParams& params, const PipelineOptions& opts);

struct SegmentOutcome {
    std::vector<ClassOutcome> classes;
    std::vector<LogitGrid> logits;  ///< combined mask logits per class (absent -> all negative)
    ClassMask labels;
};

/// Prompts every class, decodes each prompt set and blends the three candidates with w_mask.
SegmentOutcome segment_image(const ScaleSet& ref, const ClassMask& ref_mask, const ScaleSet& test, ImageExtent image,
                             const std::string& image_id, const CycleParams& params, MaskDecoder& decoder,
                             const PipelineOptions& opts);

}  // namespace cyclematch
