#include "cyclematch/multiscale.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cyclematch/error.hpp"

namespace cyclematch {

namespace {

Matrix gaussian_matrix(int rows, int cols, std::mt19937_64& rng) {
    Matrix m(rows, cols);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
    for (auto& v : m.data) v = static_cast<float>(dist(rng));
    return m;
}

// out[f, p] = sum_k w[f, k] * in[k, p], accumulated over k in ascending order.
FeatureMap apply_linear(const FeatureMap& in, const Matrix& w) {
    if (w.cols != in.channels)
        throw ArgumentError("linear map expects " + std::to_string(w.cols) + " channels, got " +
                            std::to_string(in.channels));
    FeatureMap out(w.rows, in.height, in.width);
    const std::size_t n = in.locations();
    for (int f = 0; f < w.rows; ++f) {
        float* o = out.data.data() + static_cast<std::size_t>(f) * n;
        for (int k = 0; k < w.cols; ++k) {
            const float wk = w.at(f, k);
            const float* src = in.data.data() + static_cast<std::size_t>(k) * n;
            for (std::size_t p = 0; p < n; ++p) o[p] = o[p] + wk * src[p];
        }
    }
    return out;
}

}  // namespace

Matrix Matrix::identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0f;
    return m;
}

CycleParams init_params(int classes, std::vector<int> d_enc, int d_fpn, int d_proj, std::uint64_t seed) {
    if (classes < 1 || d_enc.empty() || d_fpn < 1 || d_proj < 1)
        throw ArgumentError("init_params: classes, scales and dims must be >= 1");
    std::mt19937_64 rng(seed);
    CycleParams p;
    p.classes = classes;
    p.d_fpn = d_fpn;
    p.d_proj = d_proj;
    p.d_enc = std::move(d_enc);
    for (int e : p.d_enc) p.fpn.lateral.push_back(gaussian_matrix(d_fpn, e, rng));
    p.projectors.resize(static_cast<std::size_t>(classes));
    for (auto& per_scale : p.projectors) {
        for (int s = 0; s < p.scales(); ++s) {
            // both sides start as the same projection; training breaks the tie
            ProjectorPair pair;
            pair.feat = gaussian_matrix(d_proj, d_fpn, rng);
            pair.feat_map = pair.feat;
            per_scale.push_back(std::move(pair));
        }
    }
    p.w_scale = Matrix(classes, p.scales());
    p.w_mask = Matrix(classes, 3);
    return p;
}

CycleParams identity_params(int classes, int scales, int channels) {
    CycleParams p;
    p.classes = classes;
    p.d_fpn = channels;
    p.d_proj = channels;
    p.d_enc.assign(static_cast<std::size_t>(scales), channels);
    p.fpn.lateral.assign(static_cast<std::size_t>(scales), Matrix::identity(channels));
    p.projectors.assign(static_cast<std::size_t>(classes),
                        std::vector<ProjectorPair>(static_cast<std::size_t>(scales),
                                                   {Matrix::identity(channels), Matrix::identity(channels)}));
    p.w_scale = Matrix(classes, scales);
    p.w_mask = Matrix(classes, 3);
    return p;
}

ScaleSet prepare_scales(const ScaleSet& raw, const std::vector<int>& d_match) {
    if (raw.size() != d_match.size())
        throw ArgumentError("expected " + std::to_string(d_match.size()) + " scales, got " +
                            std::to_string(raw.size()));
    ScaleSet out;
    out.reserve(raw.size());
    for (std::size_t s = 0; s < raw.size(); ++s)
        out.push_back(l2_normalize_channels(resize_bilinear(raw[s], d_match[s], d_match[s])));
    return out;
}

ScaleSet fuse_fpn(const ScaleSet& scales, const FpnWeights& w) {
    if (scales.empty()) throw ArgumentError("fuse_fpn: no scales");
    if (scales.size() != w.lateral.size()) throw ArgumentError("fuse_fpn: one lateral matrix per scale required");

    std::vector<std::size_t> order(scales.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scales[a].locations() > scales[b].locations();
    });

    ScaleSet out(scales.size());
    FeatureMap coarser;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const FeatureMap& h = scales[*it];
        FeatureMap p = apply_linear(h, w.lateral[*it]);
        if (!coarser.data.empty()) {
            const FeatureMap up = resize_bilinear(coarser, h.height, h.width);
            for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] = p.data[i] + up.data[i];
        }
        out[*it] = l2_normalize_channels(p);
        coarser = std::move(p);
    }
    return out;
}

FeatureMap project(const FeatureMap& m, const ProjectorPair& p, ProjectSide side) {
    return l2_normalize_channels(apply_linear(m, side == ProjectSide::map ? p.feat_map : p.feat));
}

FeatureRows project(const FeatureRows& rows, const ProjectorPair& p, ProjectSide side) {
    const Matrix& w = side == ProjectSide::map ? p.feat_map : p.feat;
    if (w.cols != rows.channels) throw ArgumentError("project: channel mismatch");
    FeatureRows out(rows.rows, w.rows);
    std::vector<double> tmp(static_cast<std::size_t>(w.rows));
    for (int i = 0; i < rows.rows; ++i) {
        const float* x = rows.row(i);
        double sq = 0.0;
        for (int f = 0; f < w.rows; ++f) {
            float acc = 0.0f;
            for (int k = 0; k < w.cols; ++k) acc = acc + w.at(f, k) * x[k];
            tmp[f] = acc;
            sq += tmp[f] * tmp[f];
        }
        const double norm = std::sqrt(sq);
        if (norm < 1e-8) continue;
        for (int f = 0; f < w.rows; ++f) out.row(i)[f] = static_cast<float>(tmp[f] / norm);
    }
    return out;
}

std::vector<double> softnorm(const float* w, int n, const std::vector<bool>& present) {
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    double hi = -INFINITY;
    for (int i = 0; i < n; ++i)
        if (present[i]) hi = std::max(hi, static_cast<double>(w[i]));
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        if (!present[i]) continue;
        out[i] = std::exp(static_cast<double>(w[i]) - hi);
        total += out[i];
    }
    for (auto& v : out) v /= total;
    return out;
}

std::optional<MultiscaleResult> multiscale_cycleselect(const ScaleSet& ref, const ScaleSet& test,
                                                       const ClassMask& ref_mask, int class_id,
                                                       const CycleParams& params, const CycleSelectOptions& opts) {
    const int scales = params.scales();
    if (class_id < 1 || class_id > params.classes) throw ArgumentError("class id outside parameter range");
    if (static_cast<int>(ref.size()) != scales || static_cast<int>(test.size()) != scales)
        throw ArgumentError("scale count does not match parameters");
    for (int s = 0; s < scales; ++s) {
        if (ref[s].height != test[s].height || ref[s].width != test[s].width)
            throw ArgumentError("reference and test extents differ at scale " + std::to_string(s + 1));
    }

    const ScaleSet fused_ref = fuse_fpn(ref, params.fpn);
    const ScaleSet fused_test = fuse_fpn(test, params.fpn);

    MultiscaleResult result;
    result.scales.resize(static_cast<std::size_t>(scales));
    std::vector<bool> present(static_cast<std::size_t>(scales), false);
    for (int s = 0; s < scales; ++s) {
        const ProjectorPair& proj = params.projector(class_id, s);
        const FeatureMap r = project(fused_ref[s], proj, ProjectSide::target);
        const FeatureMap t = project(fused_test[s], proj, ProjectSide::map);
        try {
            result.scales[s] = cycleselect(r, t, ref_mask, class_id, opts);
            present[s] = true;
        } catch (const EmptyForeground&) {
        }
    }
    if (std::none_of(present.begin(), present.end(), [](bool b) { return b; })) return std::nullopt;

    const int h = test[0].height;
    const int w = test[0].width;
    const auto weights = softnorm(&params.w_scale.data[static_cast<std::size_t>(class_id - 1) * scales], scales,
                                  present);
    SimilarityMap& agg = result.aggregate;
    agg.height = h;
    agg.width = w;
    agg.values.assign(static_cast<std::size_t>(h) * w, 0.0f);
    agg.penalty_floor = -1.0f - opts.lambda_scc;
    for (int s = 0; s < scales; ++s) {
        if (!present[s]) continue;
        const SimilarityMap& m = *result.scales[s];
        const auto resized = resize_bilinear(m.values, m.height, m.width, h, w);
        const auto ws = static_cast<float>(weights[s]);
        for (std::size_t i = 0; i < resized.size(); ++i) agg.values[i] = agg.values[i] + ws * resized[i];
    }
    return result;
}

}  // namespace cyclematch
