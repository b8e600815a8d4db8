#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cyclematch/cycleselect.hpp"
#include "cyclematch/decoder.hpp"
#include "cyclematch/multiscale.hpp"
#include "cyclematch/pipeline.hpp"

namespace cyclematch {

/// Row-major f64 matrix for training arithmetic.
struct DMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    DMatrix() = default;
    DMatrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
};

/// Location-major f64 copy of a feature map / target matrix.
DMatrix to_dmatrix(const FeatureMap& m);
DMatrix to_dmatrix(const FeatureRows& r);

/// One-shot training pair: the reference and an augmented copy of it.
struct TrainView {
    std::string image_id;
    ScaleSet ref;  ///< channel-normalized, finest scale first
    ClassMask ref_mask;
    ScaleSet test;
    ClassMask test_mask;
};

struct WarmupConfig {
    double step = 1e-2;
    int epochs = 200;
    float lambda_scc = 2.0f;
    double lambda_l1 = 1.0;
    int points = 16;
    KernelOptions kernel;
};

/// f64 working copy of everything the warmup stage trains.
struct WarmupParams {
    std::vector<DMatrix> fpn;
    std::vector<std::vector<DMatrix>> feat_map;  ///< [class - 1][scale]
    std::vector<std::vector<DMatrix>> feat;
    DMatrix w_scale;

    static WarmupParams from(const CycleParams& p);
    /// Rounds into the f32 fields of `p`; other fields are left alone.
    void store(CycleParams& p) const;
    WarmupParams zeros_like() const;

    std::vector<double> flatten() const;
    void unflatten(std::span<const double> values);
    void axpy(double alpha, const WarmupParams& x);  ///< this += alpha * x
};

/// 0.5 * (1 - mean foreground cosine) + 0.5 * (max background cosine) over all
/// (cell, target row) pairs. `test_rows` and `targets` are unit-norm (or zero) rows.
double contrastive_loss(const DMatrix& test_rows, const BinaryMask& m, const DMatrix& targets);

/// Mean absolute difference between the similarity map and the mask.
double scale_weight_loss(const SimilarityMap& s, const BinaryMask& m);

struct WarmupEval {
    double loss = 0.0;  ///< sim_loss + lambda_l1 * scale_loss
    double sim_loss = 0.0;
    double scale_loss = 0.0;
    /// Hash of every discrete choice made in the forward pass (aggregation
    /// rows, cycle masks, hardest negative, L1 signs). Equal hashes mean the
    /// loss is a smooth function between the two parameter points.
    std::uint64_t decisions = 0;
    WarmupParams grad;
};

/// Warmup loss for one view and class and, when requested, its analytic
/// gradient. Argmax choices and cycle masks are constants of the forward pass;
/// max terms pass gradient only to the attained element.
WarmupEval warmup_grads(const WarmupParams& p, const TrainView& view, int class_id, const WarmupConfig& cfg,
                        bool with_grad = true);

/// Central differences per coordinate.
std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double eps);

struct TrainReport {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_sim_loss;
};

/// Fixed-step gradient descent over classes then views, in order; afterwards
/// fits per-class thresholds on the final aggregated similarity maps.
CycleParams train_warmup(const std::vector<TrainView>& views, CycleParams params, const WarmupConfig& cfg,
                         TrainReport* report = nullptr);

/// Per-class thresholds averaged over the views containing the class.
std::vector<float> fit_thresholds(const std::vector<TrainView>& views, const CycleParams& params,
                                  const CycleSelectOptions& opts);

/// Cell-wise softmax(w)-weighted sum of three logit grids.
LogitGrid combine_masks(const std::array<LogitGrid, 3>& candidates, std::span<const float, 3> w);

/// 0.5 * soft Dice (smoothing 1) + 0.5 * mean binary cross-entropy on logistic(pred).
double dice_bce_loss(const LogitGrid& pred_logits, const BinaryMask& gt);

struct MaskWeightEval {
    double loss = 0.0;
    std::array<double, 3> grad{};
};

/// dice_bce_loss(combine_masks(candidates, w), gt) and its gradient in w.
MaskWeightEval mask_weight_grads(const std::array<LogitGrid, 3>& candidates, const std::array<double, 3>& w,
                                 const BinaryMask& gt);

struct MaskConfig {
    double step = 20.0;
    int epochs = 100;
};

struct MaskTrainReport {
    std::vector<double> epoch_loss;
    int samples = 0;  ///< (view, class) pairs that reached the decoder
};

/// Trains w_mask only: prompts each view's test copy with frozen parameters,
/// decodes once per (view, class) and descends the Dice+BCE loss.
CycleParams train_mask_weights(const std::vector<TrainView>& views, CycleParams params, MaskDecoder& decoder,
                               const MaskConfig& cfg, const PipelineOptions& opts, MaskTrainReport* report = nullptr);

}  // namespace cyclematch
