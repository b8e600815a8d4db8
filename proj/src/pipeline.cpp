#include "cyclematch/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cyclematch/error.hpp"
#include "cyclematch/metrics.hpp"
#include "cyclematch/training.hpp"

namespace cyclematch {

CycleSelectOptions PipelineOptions::match_options() const {
    return {points, ablation.no_scc ? 0.0f : lambda_scc, kernel};
}

float class_threshold(const CycleParams& params, int class_id, const PipelineOptions& opts) {
    if (opts.ablation.fixed_threshold) return *opts.ablation.fixed_threshold;
    if (static_cast<int>(params.thresholds.size()) == params.classes) return params.thresholds.at(class_id - 1);
    return -std::numeric_limits<float>::infinity();
}

ClassOutcome prompt_class(const ScaleSet& ref, const ClassMask& ref_mask, const ScaleSet& test, ImageExtent image,
                          int class_id, const CycleParams& params, const PipelineOptions& opts) {
    if (opts.k < 1) throw ArgumentError("k must be >= 1");
    ClassOutcome out;
    out.class_id = class_id;
    out.prompts.class_id = class_id;
    out.prompts.image = image;
    out.threshold = class_threshold(params, class_id, opts);

    auto res = multiscale_cycleselect(ref, test, ref_mask, class_id, params, opts.match_options());
    if (!res) return out;
    const SimilarityMap& agg = res->aggregate;
    out.score = *std::max_element(agg.values.begin(), agg.values.end());
    if (opts.ablation.single_point)
        out.prompts = single_point_mode(agg, image, class_id);
    else
        out.prompts = sample_prompts(agg, out.threshold, opts.k, image, class_id, !opts.ablation.no_negatives);
    out.similarity = std::move(res->aggregate);
    return out;
}

SegmentOutcome segment_image(const ScaleSet& ref, const ClassMask& ref_mask, const ScaleSet& test, ImageExtent image,
                             const std::string& image_id, const CycleParams& params, MaskDecoder& decoder,
                             const PipelineOptions& opts) {
    SegmentOutcome out;
    std::vector<float> scores;
    for (int c = 1; c <= params.classes; ++c) {
        ClassOutcome co = prompt_class(ref, ref_mask, test, image, c, params, opts);
        if (co.prompts.absent()) {
            out.logits.emplace_back(image.height, image.width, -kOracleLogit);
        } else {
            const DecodeResponse resp = decoder.decode({image_id, co.prompts});
            for (const auto& m : resp.masks)
                if (m.height != image.height || m.width != image.width)
                    throw BridgeError("decoder returned masks of the wrong extent");
            const std::span<const float, 3> w(&params.w_mask.data[static_cast<std::size_t>(c - 1) * 3], 3);
            out.logits.push_back(combine_masks(resp.masks, w));
        }
        scores.push_back(co.score);
        out.classes.push_back(std::move(co));
    }
    out.labels = assemble_semantic(out.logits, scores);
    return out;
}

}  // namespace cyclematch
