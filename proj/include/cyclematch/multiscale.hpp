#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cyclematch/cycleselect.hpp"
#include "cyclematch/tensor.hpp"

namespace cyclematch {

/// Feature maps of one image, finest scale first.
using ScaleSet = std::vector<FeatureMap>;

/// Row-major f32 matrix.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(int r, int c, float fill = 0.0f) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    float& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    float at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

    static Matrix identity(int n);
    bool operator==(const Matrix&) const = default;
};

/// Asymmetric projectors for one (class, scale): `feat_map` is applied to the
/// test map, `feat` to the reference map the targets are built from.
struct ProjectorPair {
    Matrix feat_map;
    Matrix feat;
    bool operator==(const ProjectorPair&) const = default;
};

/// Lateral d_fpn x d_enc[s] matrix per scale.
struct FpnWeights {
    std::vector<Matrix> lateral;
    bool operator==(const FpnWeights&) const = default;
};

/// All trainable state.
struct CycleParams {
    int classes = 0;
    int d_fpn = 0;
    int d_proj = 0;
    std::vector<int> d_enc;  ///< encoder channels per scale
    FpnWeights fpn;
    std::vector<std::vector<ProjectorPair>> projectors;  ///< [class - 1][scale]
    Matrix w_scale;                                      ///< classes x scales
    Matrix w_mask;                                       ///< classes x 3
    std::vector<float> thresholds;                       ///< per class; empty until fitted

    int scales() const { return static_cast<int>(d_enc.size()); }
    const ProjectorPair& projector(int class_id, int scale) const { return projectors.at(class_id - 1).at(scale); }
    bool operator==(const CycleParams&) const = default;
};

/// Gaussian-initialized projectors and FPN (variance 1 / fan-in); zero scale and mask weights.
CycleParams init_params(int classes, std::vector<int> d_enc, int d_fpn, int d_proj, std::uint64_t seed);

/// Identity FPN and projectors; needs every d_enc equal to d_fpn == d_proj.
CycleParams identity_params(int classes, int scales, int channels);

/// Resizes each raw encoder map to its matching extent and channel-normalizes it.
ScaleSet prepare_scales(const ScaleSet& raw, const std::vector<int>& d_match);

/// Top-down linear pyramid: P_S = L_S H_S, P_s = L_s H_s + up(P_{s+1}), each
/// output normalized. Scales are processed finest-to-coarsest by extent, so the
/// result does not depend on the order (scale, lateral) pairs are supplied in.
ScaleSet fuse_fpn(const ScaleSet& scales, const FpnWeights& w);

enum class ProjectSide { map, target };

/// Applies W_feat_map (map side) or W_feat (target side) per location, then normalizes.
FeatureMap project(const FeatureMap& m, const ProjectorPair& p, ProjectSide side);
FeatureRows project(const FeatureRows& rows, const ProjectorPair& p, ProjectSide side);

/// Softmax of a weight row restricted to `present` entries (others get 0).
std::vector<double> softnorm(const float* w, int n, const std::vector<bool>& present);

struct MultiscaleResult {
    SimilarityMap aggregate;                           ///< at the scale-1 extent
    std::vector<std::optional<SimilarityMap>> scales;  ///< per-scale maps before resizing
};

/// Runs CycleSelect at every scale with FPN fusion and per-class projections
/// and blends the resized maps with softmax(w_scale[c]). Scales where the class
/// vanishes from the resized reference mask are dropped from the blend; returns
/// nullopt when it vanishes at every scale.
std::optional<MultiscaleResult> multiscale_cycleselect(const ScaleSet& ref, const ScaleSet& test,
                                                       const ClassMask& ref_mask, int class_id,
                                                       const CycleParams& params,
                                                       const CycleSelectOptions& opts = {});

}  // namespace cyclematch
