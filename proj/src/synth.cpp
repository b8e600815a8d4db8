#include "cyclematch/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "cyclematch/error.hpp"

namespace cyclematch {

namespace {

using Rng = std::mt19937_64;

std::vector<double> unit_vector(int n, Rng& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(static_cast<std::size_t>(n));
    double sq = 0.0;
    do {
        sq = 0.0;
        for (auto& x : v) {
            x = g(rng);
            sq += x * x;
        }
    } while (sq < 1e-12);
    const double norm = std::sqrt(sq);
    for (auto& x : v) x /= norm;
    return v;
}

struct Directions {
    std::vector<std::vector<std::vector<double>>> cls;  // [scale][label 0..C]
    std::vector<std::vector<double>> distractor;        // [scale]
};

// Grows a blob by a random walk that only steps onto free cells or its own.
void grow_blob(std::vector<int>& labels, int extent, int label, int target, Rng& rng) {
    std::uniform_int_distribution<int> pos(0, extent - 1);
    int y = 0, x = 0;
    for (int tries = 0;; ++tries) {
        y = pos(rng);
        x = pos(rng);
        if (labels[y * extent + x] == 0 || tries > 1000) break;
    }
    if (labels[y * extent + x] != 0) return;
    labels[y * extent + x] = label;
    int grown = 1;
    static constexpr int dy[4] = {-1, 1, 0, 0};
    static constexpr int dx[4] = {0, 0, -1, 1};
    std::uniform_int_distribution<int> dir(0, 3);
    for (int step = 0; grown < target && step < 60 * target; ++step) {
        const int d = dir(rng);
        const int ny = y + dy[d];
        const int nx = x + dx[d];
        if (ny < 0 || nx < 0 || ny >= extent || nx >= extent) continue;
        int& cell = labels[ny * extent + nx];
        if (cell != 0 && cell != label) continue;
        if (cell == 0) {
            cell = label;
            ++grown;
        }
        y = ny;
        x = nx;
    }
}

struct Layout {
    std::vector<int> labels;      // 0..C
    std::vector<int> distractor;  // 0 or imitated class
};

// Blobs are grown on the coarsest feature grid and nearest-upsampled to the
// image extent, so every scale resolves the same shapes.
Layout make_layout(const SynthConfig& cfg, Rng& rng) {
    const int e = *std::min_element(cfg.scales.begin(), cfg.scales.end());
    const std::size_t cells = static_cast<std::size_t>(e) * e;
    Layout l{std::vector<int>(cells, 0), std::vector<int>(cells, 0)};
    const int target = std::max(1, static_cast<int>(std::lround(cfg.blob_fraction * e * e)));
    for (int c = 1; c <= cfg.classes; ++c) grow_blob(l.labels, e, c, target, rng);

    std::size_t background = 0;
    for (int v : l.labels) background += v == 0;
    const auto wanted = static_cast<std::size_t>(std::lround(cfg.distractor_level * static_cast<double>(background)));
    std::vector<int> tmp(cells);
    std::size_t placed = 0;
    const int patch = std::max(4, target / 8);
    for (int i = 0; placed < wanted && i < 10000; ++i) {
        // Distractor patches grow on a scratch copy where every class cell is blocked.
        for (std::size_t p = 0; p < cells; ++p) tmp[p] = l.labels[p] != 0 || l.distractor[p] != 0 ? -1 : 0;
        const int imitated = 1 + i % cfg.classes;
        grow_blob(tmp, e, imitated, static_cast<int>(std::min<std::size_t>(patch, wanted - placed)), rng);
        for (std::size_t p = 0; p < cells; ++p)
            if (tmp[p] == imitated) {
                l.distractor[p] = imitated;
                ++placed;
            }
    }

    const int out = cfg.extent;
    Layout up{std::vector<int>(static_cast<std::size_t>(out) * out), std::vector<int>(static_cast<std::size_t>(out) * out)};
    for (int y = 0; y < out; ++y) {
        const int sy = nearest_source_index(y, e, out);
        for (int x = 0; x < out; ++x) {
            const std::size_t src = static_cast<std::size_t>(sy) * e + nearest_source_index(x, e, out);
            up.labels[static_cast<std::size_t>(y) * out + x] = l.labels[src];
            up.distractor[static_cast<std::size_t>(y) * out + x] = l.distractor[src];
        }
    }
    return up;
}

ClassMask to_mask(const Layout& l, int extent) {
    ClassMask m(extent, extent);
    for (std::size_t p = 0; p < l.labels.size(); ++p) m.labels[p] = static_cast<std::uint8_t>(l.labels[p]);
    return m;
}

ScaleSet render(const Layout& l, const SynthConfig& cfg, const Directions& dirs, Rng& rng) {
    ScaleSet out;
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t s = 0; s < cfg.scales.size(); ++s) {
        const int d = cfg.scales[s];
        const int ch = cfg.channels[s];
        const double sigma = cfg.noise / std::sqrt(static_cast<double>(ch));
        FeatureMap m(ch, d, d);
        const std::size_t n = m.locations();
        std::vector<double> v(static_cast<std::size_t>(ch));
        for (int y = 0; y < d; ++y) {
            const int sy = nearest_source_index(y, cfg.extent, d);
            for (int x = 0; x < d; ++x) {
                const int sx = nearest_source_index(x, cfg.extent, d);
                const std::size_t src = static_cast<std::size_t>(sy) * cfg.extent + sx;
                const int label = l.labels[src];
                const int imitated = l.distractor[src];
                const auto& base = dirs.cls[s][static_cast<std::size_t>(imitated ? imitated : label)];
                double sq = 0.0;
                for (int c = 0; c < ch; ++c) {
                    v[c] = base[c] + sigma * g(rng);
                    if (imitated) v[c] += cfg.distractor_offset * dirs.distractor[s][c];
                    sq += v[c] * v[c];
                }
                const double norm = std::sqrt(sq);
                const std::size_t p = static_cast<std::size_t>(y) * d + x;
                for (int c = 0; c < ch; ++c) m.data[c * n + p] = static_cast<float>(v[c] / norm);
            }
        }
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace

SynthScene synth_scene(std::uint64_t seed, const SynthConfig& cfg) {
    if (cfg.classes < 1 || cfg.classes > 255) throw ArgumentError("synth: classes must be in 1..255");
    if (cfg.extent < 1) throw ArgumentError("synth: extent must be >= 1");
    if (cfg.scales.empty() || cfg.scales.size() != cfg.channels.size())
        throw ArgumentError("synth: one channel count per scale required");
    for (std::size_t s = 0; s < cfg.scales.size(); ++s)
        if (cfg.scales[s] < 1 || cfg.channels[s] < 1) throw ArgumentError("synth: scale extents and channels must be >= 1");
    if (!(cfg.noise >= 0.0f) || !(cfg.distractor_level >= 0.0f && cfg.distractor_level <= 1.0f))
        throw ArgumentError("synth: noise must be >= 0 and distractor_level in [0, 1]");

    Rng rng(seed);
    Directions dirs;
    for (std::size_t s = 0; s < cfg.scales.size(); ++s) {
        auto& per = dirs.cls.emplace_back();
        for (int c = 0; c <= cfg.classes; ++c) per.push_back(unit_vector(cfg.channels[s], rng));
        dirs.distractor.push_back(unit_vector(cfg.channels[s], rng));
    }

    const Layout ref = make_layout(cfg, rng);
    const Layout test = make_layout(cfg, rng);

    SynthScene scene;
    scene.seed = seed;
    scene.distractor_level = cfg.distractor_level;
    scene.ref_mask = to_mask(ref, cfg.extent);
    scene.aug_mask = scene.ref_mask;
    scene.test_mask = to_mask(test, cfg.extent);
    scene.ref = render(ref, cfg, dirs, rng);
    scene.aug = render(ref, cfg, dirs, rng);
    scene.test = render(test, cfg, dirs, rng);
    return scene;
}

}  // namespace cyclematch
