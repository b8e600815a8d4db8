#include "cyclematch/cycleselect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cyclematch/error.hpp"

namespace cyclematch {

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1}));
}

BinaryMask binarize_mask(const ClassMask& m, int class_id) {
    if (class_id < 1 || class_id > 255) throw ArgumentError("class id must be in 1..255");
    BinaryMask b(m.height, m.width);
    std::transform(m.labels.begin(), m.labels.end(), b.cells.begin(),
                   [class_id](std::uint8_t l) { return static_cast<std::uint8_t>(l == class_id); });
    return b;
}

std::vector<GridPoint> sample_foreground_points(const BinaryMask& b, int count) {
    if (count < 1) throw ArgumentError("point count must be >= 1");
    std::vector<GridPoint> fg;
    for (int y = 0; y < b.height; ++y)
        for (int x = 0; x < b.width; ++x)
            if (b.cells[static_cast<std::size_t>(y) * b.width + x]) fg.push_back({y, x});
    if (fg.empty()) throw EmptyForeground("reference mask has no foreground for this class");

    const std::size_t n = fg.size();
    const auto wanted = static_cast<std::size_t>(count);
    if (n <= wanted) return fg;
    std::vector<GridPoint> out;
    out.reserve(wanted);
    for (std::size_t i = 0; i < wanted; ++i) out.push_back(fg[i * n / wanted]);
    return out;
}

TargetFeatures build_target_features(const FeatureMap& ref, const BinaryMask& b, int count) {
    if (ref.height != b.height || ref.width != b.width)
        throw ArgumentError("build_target_features: feature map and mask extents differ");

    TargetFeatures t;
    t.points = sample_foreground_points(b, count);
    const int ch = ref.channels;
    const std::size_t n = ref.locations();
    t.features = FeatureRows(static_cast<int>(t.points.size()) + 1, ch);

    for (std::size_t r = 0; r < t.points.size(); ++r) {
        const std::size_t p = static_cast<std::size_t>(t.points[r].y) * ref.width + t.points[r].x;
        for (int c = 0; c < ch; ++c) t.features.row(static_cast<int>(r))[c] = ref.data[c * n + p];
    }

    std::vector<double> mean(static_cast<std::size_t>(ch), 0.0);
    std::size_t fg = 0;
    for (std::size_t p = 0; p < n; ++p) {
        if (!b.cells[p]) continue;
        ++fg;
        for (int c = 0; c < ch; ++c) mean[c] += ref.data[c * n + p];
    }
    double sq = 0.0;
    for (auto& v : mean) {
        v /= static_cast<double>(fg);
        sq += v * v;
    }
    const double norm = std::sqrt(sq);
    float* last = t.features.row(t.features.rows - 1);
    if (norm >= 1e-8)
        for (int c = 0; c < ch; ++c) last[c] = static_cast<float>(mean[c] / norm);
    return t;
}

SimilarityMap similarity_aggregate(const TargetFeatures& t, const FeatureMap& test, const KernelOptions& opts) {
    const auto all = similarity_matrix(t.features, test, opts);
    const std::size_t n = test.locations();
    SimilarityMap s{test.height, test.width, std::vector<float>(n), -1.0f};

    for (std::size_t p = 0; p < n; ++p) {
        int dominant = 0;
        float lo = all[p];
        float hi = all[p];
        for (int x = 1; x < t.features.rows; ++x) {
            const float v = all[static_cast<std::size_t>(x) * n + p];
            if (std::abs(v) > std::abs(all[static_cast<std::size_t>(dominant) * n + p])) dominant = x;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        s.values[p] = all[static_cast<std::size_t>(dominant) * n + p] >= 0.0f ? hi : lo;
    }
    return s;
}

CycleMask cycle_consistency_mask(const FeatureMap& test, const FeatureMap& ref, const BinaryMask& b,
                                 const KernelOptions& opts) {
    if (test.channels != ref.channels || test.height != ref.height || test.width != ref.width)
        throw ArgumentError("cycle_consistency_mask: test and reference maps differ in shape");
    if (b.height != ref.height || b.width != ref.width)
        throw ArgumentError("cycle_consistency_mask: mask extent differs from feature extent");

    const auto best = best_match(to_rows(test), ref, opts);
    CycleMask m{test.height, test.width, std::vector<std::uint8_t>(best.size())};
    for (std::size_t i = 0; i < best.size(); ++i) m.cells[i] = b.cells[static_cast<std::size_t>(best[i])];
    return m;
}

SimilarityMap apply_scc_penalty(const SimilarityMap& s, const CycleMask& m, float lambda_scc) {
    if (!(lambda_scc >= 0.0f)) throw ArgumentError("lambda_scc must be >= 0");
    if (s.values.size() != m.cells.size()) throw ArgumentError("apply_scc_penalty: extent mismatch");
    SimilarityMap out = s;
    out.penalty_floor = s.penalty_floor - lambda_scc;
    for (std::size_t p = 0; p < out.values.size(); ++p)
        if (m.cells[p] == 0) out.values[p] = s.values[p] - lambda_scc;
    return out;
}

SimilarityMap cycleselect(const FeatureMap& ref, const FeatureMap& test, const ClassMask& mask, int class_id,
                          const CycleSelectOptions& opts) {
    const ClassMask resized = resize_nearest(mask, ref.height, ref.width);
    const BinaryMask b = binarize_mask(resized, class_id);
    const TargetFeatures t = build_target_features(ref, b, opts.points);
    const SimilarityMap s = similarity_aggregate(t, test, opts.kernel);
    const CycleMask cm = cycle_consistency_mask(test, ref, b, opts.kernel);
    return apply_scc_penalty(s, cm, opts.lambda_scc);
}

}  // namespace cyclematch
