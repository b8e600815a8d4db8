#pragma once

#include <cstdint>
#include <vector>

#include "cyclematch/kernels.hpp"
#include "cyclematch/tensor.hpp"

namespace cyclematch {

/// 1 where the matching-resolution reference mask carries the class of interest.
struct BinaryMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> cells;

    BinaryMask() = default;
    BinaryMask(int h, int w, std::uint8_t fill = 0) : height(h), width(w), cells(static_cast<std::size_t>(h) * w, fill) {}

    std::size_t count() const;
    bool operator==(const BinaryMask&) const = default;
};

/// Cycle-consistency verdict per test location: 1 when its best reference
/// match lands inside the reference foreground.
struct CycleMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> cells;

    bool operator==(const CycleMask&) const = default;
};

struct SimilarityMap {
    int height = 0;
    int width = 0;
    std::vector<float> values;
    float penalty_floor = -1.0f;  ///< lower bound for unit-norm features: -1 - lambda_scc

    bool operator==(const SimilarityMap&) const = default;
};

struct GridPoint {
    int y = 0;
    int x = 0;
    bool operator==(const GridPoint&) const = default;
};

/// Sampled foreground point features followed by the renormalized foreground mean.
struct TargetFeatures {
    FeatureRows features;
    std::vector<GridPoint> points;  ///< grid positions of the sampled rows
};

BinaryMask binarize_mask(const ClassMask& m, int class_id);

/// Evenly spaced foreground cells in row-major rank order: ranks floor(i * N / count).
/// Throws EmptyForeground when the mask has no foreground.
std::vector<GridPoint> sample_foreground_points(const BinaryMask& b, int count);

/// `ref` must be channel-normalized and share the mask's spatial extent.
TargetFeatures build_target_features(const FeatureMap& ref, const BinaryMask& b, int count);

/// Per test location, the target similarity of largest magnitude: max over
/// targets when that similarity is nonnegative, min over targets otherwise.
SimilarityMap similarity_aggregate(const TargetFeatures& t, const FeatureMap& test, const KernelOptions& opts = {});

CycleMask cycle_consistency_mask(const FeatureMap& test, const FeatureMap& ref, const BinaryMask& b,
                                 const KernelOptions& opts = {});

/// Subtracts lambda_scc from every cell whose cycle verdict is 0.
SimilarityMap apply_scc_penalty(const SimilarityMap& s, const CycleMask& m, float lambda_scc);

struct CycleSelectOptions {
    int points = 16;          ///< sampled foreground points per class
    float lambda_scc = 2.0f;  ///< penalty for cycle-inconsistent cells
    KernelOptions kernel;
};

/// Single-scale matching of class `class_id` from reference to test. Both maps
/// must be channel-normalized with identical extents; the mask is resized
/// (nearest) to that extent if needed.
SimilarityMap cycleselect(const FeatureMap& ref, const FeatureMap& test, const ClassMask& mask, int class_id,
                          const CycleSelectOptions& opts = {});

}  // namespace cyclematch
