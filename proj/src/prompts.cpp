#include "cyclematch/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cyclematch/error.hpp"

namespace cyclematch {

namespace {

// Cell indices ordered by descending score, ties by ascending index.
std::vector<int> rank_cells(const std::vector<float>& v, const std::vector<int>& cells) {
    std::vector<int> out = cells;
    std::stable_sort(out.begin(), out.end(), [&](int a, int b) { return v[a] > v[b]; });
    return out;
}

std::vector<PromptPoint> points_from_json(const nlohmann::json& arr, Polarity polarity, ImageExtent image) {
    std::vector<PromptPoint> out;
    for (const auto& e : arr) {
        PromptPoint p;
        p.x = e.at("x").get<int>();
        p.y = e.at("y").get<int>();
        p.score = e.at("score").get<float>();
        p.polarity = polarity;
        if (p.x < 0 || p.y < 0 || p.x >= image.width || p.y >= image.height)
            throw FormatError("prompt point outside the image extent");
        p.cell = {-1, -1};
        out.push_back(p);
    }
    return out;
}

}  // namespace

ClassThreshold compute_threshold(const SimilarityMap& s, const BinaryMask& b) {
    if (s.values.size() != b.cells.size()) throw ArgumentError("compute_threshold: extent mismatch");
    double fg_sum = 0.0, bg_sum = 0.0;
    std::size_t fg = 0, bg = 0;
    for (std::size_t i = 0; i < s.values.size(); ++i) {
        if (b.cells[i]) {
            fg_sum += s.values[i];
            ++fg;
        } else {
            bg_sum += s.values[i];
            ++bg;
        }
    }
    if (fg == 0 || bg == 0) throw DegenerateMask("threshold needs both foreground and background cells");
    const double pos = fg_sum / static_cast<double>(fg);
    const double neg = bg_sum / static_cast<double>(bg);
    return {static_cast<float>(0.5 * (pos + neg)), static_cast<float>(pos), static_cast<float>(neg)};
}

Clustering cluster_3bins(std::span<const float> values) {
    Clustering out;
    const std::size_t n = values.size();
    out.bins.assign(n, 0);
    if (n == 0) return out;

    std::vector<float> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    std::array<double, 3> c = {sorted.front(), sorted[(n - 1) / 2], sorted.back()};

    auto assign = [&](std::vector<int>& bins) {
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::abs(values[i] - c[0]);
            for (int k = 1; k < 3; ++k) {
                const double d = std::abs(values[i] - c[k]);
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            bins[i] = best;
        }
    };

    std::vector<int> bins(n), next(n);
    assign(bins);
    for (int iter = 0; iter < 100; ++iter) {
        std::array<double, 3> sum{};
        std::array<std::size_t, 3> cnt{};
        for (std::size_t i = 0; i < n; ++i) {
            sum[bins[i]] += values[i];
            ++cnt[bins[i]];
        }
        for (int k = 0; k < 3; ++k)
            if (cnt[k]) c[k] = sum[k] / static_cast<double>(cnt[k]);
        assign(next);
        if (next == bins) break;
        bins.swap(next);
    }

    std::array<int, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return c[a] < c[b]; });
    std::array<int, 3> rank{};
    for (int r = 0; r < 3; ++r) {
        rank[order[r]] = r;
        out.centroids[r] = c[order[r]];
    }
    for (std::size_t i = 0; i < n; ++i) out.bins[i] = rank[bins[i]];
    return out;
}

PromptPoint cell_to_prompt(GridPoint cell, int grid_h, int grid_w, ImageExtent image, Polarity polarity,
                           float score) {
    PromptPoint p;
    p.x = nearest_source_index(cell.x, image.width, grid_w);
    p.y = nearest_source_index(cell.y, image.height, grid_h);
    p.polarity = polarity;
    p.score = score;
    p.cell = cell;
    return p;
}

PromptSet sample_prompts(const SimilarityMap& s, float threshold, int k, ImageExtent image, int class_id,
                         bool with_negatives) {
    if (k < 1) throw ArgumentError("k must be >= 1");
    if (image.width < 1 || image.height < 1) throw ArgumentError("image extent must be positive");
    PromptSet out;
    out.class_id = class_id;
    out.image = image;

    const int n = static_cast<int>(s.values.size());
    std::vector<int> above;
    for (int i = 0; i < n; ++i)
        if (s.values[i] >= threshold) above.push_back(i);
    auto ranked = rank_cells(s.values, above);
    if (ranked.size() > static_cast<std::size_t>(k)) ranked.resize(static_cast<std::size_t>(k));
    if (ranked.empty()) return out;

    std::vector<bool> taken(static_cast<std::size_t>(n), false);
    for (int i : ranked) {
        taken[i] = true;
        out.positives.push_back(
            cell_to_prompt({i / s.width, i % s.width}, s.height, s.width, image, Polarity::positive, s.values[i]));
    }
    if (!with_negatives) return out;

    const auto clusters = cluster_3bins(s.values);
    std::vector<int> lowest;
    for (int i = 0; i < n; ++i)
        if (clusters.bins[i] == 0 && !taken[i]) lowest.push_back(i);
    auto neg = rank_cells(s.values, lowest);
    if (neg.size() > static_cast<std::size_t>(k)) neg.resize(static_cast<std::size_t>(k));
    for (int i : neg)
        out.negatives.push_back(
            cell_to_prompt({i / s.width, i % s.width}, s.height, s.width, image, Polarity::negative, s.values[i]));
    return out;
}

PromptSet single_point_mode(const SimilarityMap& s, ImageExtent image, int class_id) {
    if (s.values.empty()) throw ArgumentError("single_point_mode: empty similarity map");
    const auto best = static_cast<int>(std::max_element(s.values.begin(), s.values.end()) - s.values.begin());
    PromptSet out;
    out.class_id = class_id;
    out.image = image;
    out.positives.push_back(cell_to_prompt({best / s.width, best % s.width}, s.height, s.width, image,
                                           Polarity::positive, s.values[best]));
    return out;
}

nlohmann::json prompts_to_json(const PromptSet& p) {
    auto points = [](const std::vector<PromptPoint>& pts) {
        auto arr = nlohmann::json::array();
        for (const auto& q : pts) arr.push_back({{"x", q.x}, {"y", q.y}, {"score", q.score}});
        return arr;
    };
    return {{"class", p.class_id},
            {"image_size", {p.image.width, p.image.height}},
            {"positives", points(p.positives)},
            {"negatives", points(p.negatives)}};
}

PromptSet prompts_from_json(const nlohmann::json& j) {
    try {
        PromptSet p;
        p.class_id = j.at("class").get<int>();
        const auto size = j.at("image_size").get<std::vector<int>>();
        if (size.size() != 2 || size[0] < 1 || size[1] < 1) throw FormatError("image_size must be [w, h]");
        p.image = {size[0], size[1]};
        p.positives = points_from_json(j.at("positives"), Polarity::positive, p.image);
        p.negatives = points_from_json(j.at("negatives"), Polarity::negative, p.image);
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("prompt set: ") + e.what());
    }
}

}  // namespace cyclematch
