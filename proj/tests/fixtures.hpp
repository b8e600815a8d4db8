#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>

#include "cyclematch/synth.hpp"
#include "cyclematch/training.hpp"

namespace fixtures {

using namespace cyclematch;

// Small two-scale view for gradient checks.
inline TrainView small_view(std::uint64_t seed, int classes = 2) {
    SynthConfig cfg;
    cfg.classes = classes;
    cfg.extent = 16;
    cfg.scales = {8, 4};
    cfg.channels = {5, 7};
    cfg.noise = 0.6f;
    cfg.blob_fraction = 0.25f;
    const SynthScene s = synth_scene(seed, cfg);
    return {"view", prepare_scales(s.ref, cfg.scales), s.ref_mask, prepare_scales(s.aug, cfg.scales), s.aug_mask};
}

inline CycleParams small_params(std::uint64_t seed, int classes = 2) {
    CycleParams p = init_params(classes, {5, 7}, 4, 3, seed);
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    std::normal_distribution<float> g(0.0f, 0.5f);
    for (auto& v : p.w_scale.data) v = g(rng);
    return p;
}

struct GradCheck {
    double worst = 0.0;   // largest relative error over compared coordinates
    int compared = 0;
    int skipped = 0;      // coordinates whose +-eps probes change a discrete decision
};

/// |a - n| / max(|a|, |n|, floor) per coordinate.
inline double relative_error(double a, double n, double floor) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline constexpr double kGradEps = 1e-5;
inline constexpr double kGradFloor = 1e-5;
inline constexpr double kGradTol = 1e-4;

inline GradCheck check_warmup_grad(const TrainView& view, const CycleParams& params, int class_id,
                                   const WarmupConfig& cfg) {
    const WarmupParams base = WarmupParams::from(params);
    const WarmupEval ev = warmup_grads(base, view, class_id, cfg, true);
    const auto analytic = ev.grad.flatten();
    const auto x = base.flatten();
    auto eval = [&](std::span<const double> v) {
        WarmupParams p = base;
        p.unflatten(v);
        return warmup_grads(p, view, class_id, cfg, false);
    };
    GradCheck out;
    std::vector<double> probe(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + kGradEps;
        const WarmupEval up = eval(probe);
        probe[i] = x[i] - kGradEps;
        const WarmupEval down = eval(probe);
        probe[i] = x[i];
        if (up.decisions != ev.decisions || down.decisions != ev.decisions) {
            ++out.skipped;
            continue;
        }
        const double numeric = (up.loss - down.loss) / (2.0 * kGradEps);
        out.worst = std::max(out.worst, relative_error(analytic[i], numeric, kGradFloor));
        ++out.compared;
    }
    return out;
}

inline std::array<LogitGrid, 3> random_candidates(int h, int w, std::mt19937_64& rng) {
    std::array<LogitGrid, 3> c{LogitGrid(h, w), LogitGrid(h, w), LogitGrid(h, w)};
    std::normal_distribution<float> g(0.0f, 3.0f);
    for (auto& grid : c)
        for (auto& v : grid.values) v = g(rng);
    return c;
}

inline BinaryMask random_binary(int h, int w, std::mt19937_64& rng) {
    BinaryMask b(h, w);
    std::uniform_int_distribution<int> bit(0, 1);
    for (auto& v : b.cells) v = static_cast<std::uint8_t>(bit(rng));
    return b;
}

inline GradCheck check_mask_grad(const std::array<LogitGrid, 3>& cand, const std::array<double, 3>& w,
                                 const BinaryMask& gt) {
    const MaskWeightEval ev = mask_weight_grads(cand, w, gt);
    const auto numeric = finite_diff_grad(
        [&](std::span<const double> v) { return mask_weight_grads(cand, {v[0], v[1], v[2]}, gt).loss; },
        std::span<const double>(w.data(), 3), kGradEps);
    GradCheck out;
    for (int k = 0; k < 3; ++k) {
        out.worst = std::max(out.worst, relative_error(ev.grad[k], numeric[k], kGradFloor));
        ++out.compared;
    }
    return out;
}

}  // namespace fixtures
