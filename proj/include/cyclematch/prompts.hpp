#pragma once

#include <array>
#include <span>
#include <vector>

#include "cyclematch/cycleselect.hpp"
#include "json.hpp"

namespace cyclematch {

enum class Polarity { positive, negative };

struct ImageExtent {
    int width = 0;
    int height = 0;
    bool operator==(const ImageExtent&) const = default;
};

struct PromptPoint {
    int x = 0;  ///< image column
    int y = 0;  ///< image row
    Polarity polarity = Polarity::positive;
    float score = 0.0f;
    GridPoint cell;  ///< source cell in the similarity grid (not serialized)

    bool operator==(const PromptPoint&) const = default;
};

struct PromptSet {
    int class_id = 0;
    ImageExtent image;
    std::vector<PromptPoint> positives;
    std::vector<PromptPoint> negatives;

    /// No positive prompt: the class is reported absent and the decoder is skipped.
    bool absent() const { return positives.empty(); }
    bool operator==(const PromptSet&) const = default;
};

/// Midpoint of the area-normalized foreground and background mean similarities.
struct ClassThreshold {
    float value = 0.0f;
    float foreground_mean = 0.0f;
    float background_mean = 0.0f;
};

/// Throws DegenerateMask unless the mask has both foreground and background cells.
ClassThreshold compute_threshold(const SimilarityMap& s, const BinaryMask& b);

struct Clustering {
    std::vector<int> bins;             ///< 0 = lowest centroid
    std::array<double, 3> centroids{};  ///< ascending
};

/// Deterministic 1-D Lloyd clustering into three bins: centroids start at
/// min/median/max, assignment ties go to the lower bin, and iteration stops at
/// an assignment fixpoint (at most 100 rounds).
Clustering cluster_3bins(std::span<const float> values);

/// Image pixel whose center is nearest the center of grid cell `cell`.
PromptPoint cell_to_prompt(GridPoint cell, int grid_h, int grid_w, ImageExtent image, Polarity polarity, float score);

/// Up to k positives at or above the threshold and, when `with_negatives`, up to
/// k negatives from the lowest similarity bin, both by descending score with
/// ties going to the smaller flat index.
PromptSet sample_prompts(const SimilarityMap& s, float threshold, int k, ImageExtent image, int class_id,
                         bool with_negatives = true);

/// One positive at the global argmax, no negatives.
PromptSet single_point_mode(const SimilarityMap& s, ImageExtent image, int class_id);

nlohmann::json prompts_to_json(const PromptSet& p);
PromptSet prompts_from_json(const nlohmann::json& j);

}  // namespace cyclematch
