#include <cmath>
#include <limits>
#include <random>

#include "cyclematch/error.hpp"
#include "cyclematch/params_io.hpp"
#include "cyclematch/training.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cyclematch;

namespace {

DMatrix unit_rows(int n, int d, std::mt19937_64& rng) {
    DMatrix m(n, d);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
        double sq = 0.0;
        for (int c = 0; c < d; ++c) sq += (m.at(i, c) = g(rng)) * m.at(i, c);
        for (int c = 0; c < d; ++c) m.at(i, c) /= std::sqrt(sq);
    }
    return m;
}

class FixedDecoder : public MaskDecoder {
public:
    explicit FixedDecoder(std::array<LogitGrid, 3> c) : c_(std::move(c)) {}
    DecodeResponse decode(const DecodeRequest&) override {
        ++calls;
        return {c_};
    }
    int calls = 0;

private:
    std::array<LogitGrid, 3> c_;
};

class FailingDecoder : public MaskDecoder {
public:
    DecodeResponse decode(const DecodeRequest&) override { throw BridgeError("worker exited with status 1"); }
};

}  // namespace

TEST_CASE("contrastive_loss") {
    DMatrix target(1, 2);
    target.at(0, 0) = 1.0;
    SUBCASE("aligned foreground, orthogonal background") {
        DMatrix rows(2, 2);
        rows.at(0, 0) = 1.0;
        rows.at(1, 1) = 1.0;
        BinaryMask m(1, 2);
        m.cells = {1, 0};
        CHECK(contrastive_loss(rows, m, target) == doctest::Approx(0.0));
    }
    SUBCASE("orthogonal foreground, background equal to the target") {
        DMatrix rows(2, 2);
        rows.at(0, 1) = 1.0;
        rows.at(1, 0) = 1.0;
        BinaryMask m(1, 2);
        m.cells = {1, 0};
        CHECK(contrastive_loss(rows, m, target) == doctest::Approx(1.0));
    }
    SUBCASE("random instances against the double loop") {
        std::mt19937_64 rng(51);
        for (int trial = 0; trial < 50; ++trial) {
            const DMatrix rows = unit_rows(20, 6, rng);
            const DMatrix t = unit_rows(4, 6, rng);
            const BinaryMask m = fixtures::random_binary(4, 5, rng);
            if (m.count() == 0 || m.count() == 20) continue;
            double fg = 0.0, bg = -1e300;
            int nfg = 0;
            for (int i = 0; i < 20; ++i)
                for (int x = 0; x < 4; ++x) {
                    double cos = 0.0;
                    for (int c = 0; c < 6; ++c) cos += rows.at(i, c) * t.at(x, c);
                    if (m.cells[i]) {
                        fg += cos;
                        ++nfg;
                    } else {
                        bg = std::max(bg, cos);
                    }
                }
            const double expect = 0.5 * (1.0 - fg / nfg) + 0.5 * bg;
            const double got = contrastive_loss(rows, m, t);
            CHECK(std::abs(got - expect) <= 1e-10);
            CHECK(got >= -0.5);
            CHECK(got <= 1.5);
        }
    }
    CHECK_THROWS_AS(contrastive_loss(DMatrix(2, 2), BinaryMask(1, 2, 1), target), DegenerateMask);
    CHECK_THROWS_AS(contrastive_loss(DMatrix(2, 2), BinaryMask(1, 2, 0), target), DegenerateMask);
}

TEST_CASE("scale_weight_loss") {
    BinaryMask m(2, 2);
    m.cells = {1, 1, 0, 0};
    SimilarityMap same{2, 2, {1, 1, 0, 0}, -3.0f};
    CHECK(scale_weight_loss(same, m) == 0.0);
    SimilarityMap zero{2, 2, {0, 0, 0, 0}, -3.0f};
    CHECK(scale_weight_loss(zero, m) == 0.5);

    std::mt19937_64 rng(52);
    std::uniform_real_distribution<float> u(-3.0f, 1.0f);
    for (int trial = 0; trial < 20; ++trial) {
        SimilarityMap s{5, 5, std::vector<float>(25), -3.0f};
        for (auto& v : s.values) v = u(rng);
        const BinaryMask b = fixtures::random_binary(5, 5, rng);
        double expect = 0.0;
        for (int i = 0; i < 25; ++i) expect += std::abs(static_cast<double>(s.values[i]) - b.cells[i]);
        const double got = scale_weight_loss(s, b);
        CHECK(got == doctest::Approx(expect / 25).epsilon(1e-12));
        CHECK(got >= 0.0);
        CHECK(got <= 2.0 + 2.0);
    }
    CHECK_THROWS_AS(scale_weight_loss(zero, BinaryMask(3, 3)), ArgumentError);
}

TEST_CASE("finite_diff_grad") {
    auto quad = [](std::span<const double> x) { return 3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1]; };
    const std::vector<double> x = {0.7, -1.3};
    const auto g = finite_diff_grad(quad, x, 1e-5);
    CHECK(std::abs(g[0] - (6.0 * 0.7 + 2.0 * 1.3)) <= 1e-8);
    CHECK(std::abs(g[1] - (-2.0 * 0.7 - 1.3)) <= 1e-8);

    auto lin = [](std::span<const double> v) { return 2.0 * v[0] - 5.0 * v[1] + 1.0; };
    for (double eps : {1e-4, 1e-5}) {
        const auto gl = finite_diff_grad(lin, x, eps);
        CHECK(gl[0] == doctest::Approx(2.0).epsilon(1e-9));
        CHECK(gl[1] == doctest::Approx(-5.0).epsilon(1e-9));
    }
}

TEST_CASE("warmup gradients match finite differences") {
    WarmupConfig cfg;
    cfg.points = 4;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        const TrainView view = fixtures::small_view(seed);
        const CycleParams params = fixtures::small_params(seed);
        for (int c = 1; c <= 2; ++c) {
            const auto r = fixtures::check_warmup_grad(view, params, c, cfg);
            INFO("seed " << seed << " class " << c << " skipped " << r.skipped);
            CHECK(r.compared > r.skipped);
            CHECK(r.worst <= fixtures::kGradTol);
        }
    }
}

TEST_CASE("warmup gradients are finite for zero projectors") {
    const TrainView view = fixtures::small_view(9);
    CycleParams p = fixtures::small_params(9);
    for (auto& per : p.projectors)
        for (auto& pair : per) {
            std::fill(pair.feat.data.begin(), pair.feat.data.end(), 0.0f);
            std::fill(pair.feat_map.data.begin(), pair.feat_map.data.end(), 0.0f);
        }
    const WarmupEval ev = warmup_grads(WarmupParams::from(p), view, 1, {});
    CHECK(std::isfinite(ev.loss));
    for (double g : ev.grad.flatten()) CHECK(std::isfinite(g));
}

TEST_CASE("descent reduces the warmup loss") {
    const TrainView view = fixtures::small_view(10);
    WarmupParams p = WarmupParams::from(fixtures::small_params(10));
    WarmupConfig cfg;
    cfg.points = 4;
    const double first = warmup_grads(p, view, 1, cfg, false).loss;
    for (int step = 0; step < 50; ++step) p.axpy(-0.05, warmup_grads(p, view, 1, cfg).grad);
    CHECK(warmup_grads(p, view, 1, cfg, false).loss < first);
}

TEST_CASE("train_warmup") {
    const TrainView view = fixtures::small_view(11);
    const CycleParams init = fixtures::small_params(11);
    WarmupConfig cfg;
    cfg.points = 4;
    cfg.epochs = 20;

    SUBCASE("zero epochs only fits thresholds") {
        cfg.epochs = 0;
        CycleParams out = train_warmup({view}, init, cfg);
        CHECK(out.thresholds.size() == 2);
        out.thresholds.clear();
        CHECK(out == init);
    }
    SUBCASE("zero step leaves the weights alone") {
        cfg.step = 0.0;
        CycleParams out = train_warmup({view}, init, cfg);
        out.thresholds.clear();
        CHECK(out == init);
    }
    SUBCASE("deterministic and non-increasing over the run") {
        TrainReport r1, r2;
        const CycleParams a = train_warmup({view}, init, cfg, &r1);
        const CycleParams b = train_warmup({view}, init, cfg, &r2);
        CHECK(dump_json(params_to_json(a)) == dump_json(params_to_json(b)));
        REQUIRE(r1.epoch_loss.size() == 20);
        CHECK(r1.epoch_loss.back() <= r1.epoch_loss.front());
        CHECK(a.w_mask == init.w_mask);
        for (float t : a.thresholds) CHECK(std::isfinite(t));
    }
    SUBCASE("separable single class") {
        SynthConfig sc;
        sc.classes = 1;
        sc.extent = 16;
        sc.scales = {8, 4};
        sc.channels = {6, 6};
        sc.noise = 0.05f;
        sc.blob_fraction = 0.3f;
        const SynthScene s = synth_scene(12, sc);
        const TrainView v{"v", prepare_scales(s.ref, sc.scales), s.ref_mask, prepare_scales(s.aug, sc.scales),
                          s.aug_mask};
        const CycleParams p0 = init_params(1, {6, 6}, 6, 4, 12);
        WarmupConfig wc;
        wc.points = 8;
        wc.lambda_l1 = 0.0;
        TrainReport r;
        train_warmup({v}, p0, wc, &r);
        CHECK(r.epoch_sim_loss.back() < r.epoch_sim_loss.front());
        CHECK(r.epoch_sim_loss.back() < 0.1);
    }
    CHECK_THROWS_AS(train_warmup({}, init, cfg), ArgumentError);
}

TEST_CASE("train_warmup reports divergence") {
    const TrainView view = fixtures::small_view(13);
    CycleParams p = fixtures::small_params(13);
    p.w_scale.data[0] = std::numeric_limits<float>::quiet_NaN();
    WarmupConfig cfg;
    cfg.points = 4;
    CHECK_THROWS_AS(train_warmup({view}, p, cfg), NumericsError);
}

TEST_CASE("combine_masks") {
    std::mt19937_64 rng(53);
    const auto c = fixtures::random_candidates(4, 5, rng);
    const std::array<float, 3> equal{0.0f, 0.0f, 0.0f};
    const std::array<LogitGrid, 3> same{c[1], c[1], c[1]};
    const LogitGrid s = combine_masks(same, equal);
    for (std::size_t i = 0; i < s.values.size(); ++i) CHECK(s.values[i] == doctest::Approx(c[1].values[i]));

    const std::array<float, 3> hot{10.0f, -10.0f, -10.0f};
    const LogitGrid h = combine_masks(c, hot);
    for (std::size_t i = 0; i < h.values.size(); ++i) CHECK(std::abs(h.values[i] - c[0].values[i]) <= 1e-3 * 10);

    for (int trial = 0; trial < 10; ++trial) {
        std::normal_distribution<float> g(0.0f, 2.0f);
        const std::array<float, 3> w{g(rng), g(rng), g(rng)};
        const LogitGrid out = combine_masks(c, w);
        double e[3], t = 0;
        for (int k = 0; k < 3; ++k) t += e[k] = std::exp(static_cast<double>(w[k]));
        for (std::size_t i = 0; i < out.values.size(); ++i) {
            double z = 0;
            for (int k = 0; k < 3; ++k) z += e[k] / t * c[k].values[i];
            CHECK(std::abs(out.values[i] - z) <= 1e-5);
        }
    }
    std::array<LogitGrid, 3> bad{c[0], c[1], LogitGrid(2, 2)};
    CHECK_THROWS_AS(combine_masks(bad, equal), ArgumentError);
}

TEST_CASE("dice_bce_loss") {
    std::mt19937_64 rng(54);
    const BinaryMask gt = fixtures::random_binary(6, 6, rng);
    LogitGrid sat(6, 6);
    for (int i = 0; i < 36; ++i) sat.values[i] = gt.cells[i] ? 30.0f : -30.0f;
    CHECK(dice_bce_loss(sat, gt) < 1e-6 + 0.5 * (1.0 / (2.0 * gt.count() + 1.0)));

    BinaryMask half(4, 4);
    for (int i = 0; i < 8; ++i) half.cells[i] = 1;
    const LogitGrid zero(4, 4, 0.0f);
    const double dice = 1.0 - (2.0 * 4.0 + 1.0) / (8.0 + 8.0 + 1.0);
    CHECK(dice_bce_loss(zero, half) == doctest::Approx(0.5 * dice + 0.5 * std::log(2.0)).epsilon(1e-12));

    for (int trial = 0; trial < 20; ++trial) {
        const auto c = fixtures::random_candidates(5, 4, rng);
        const BinaryMask b = fixtures::random_binary(5, 4, rng);
        double inter = 0, ps = 0, gs = 0, bce = 0;
        for (int i = 0; i < 20; ++i) {
            const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(c[0].values[i])));
            inter += p * b.cells[i];
            ps += p;
            gs += b.cells[i];
            bce += -(b.cells[i] ? std::log(p) : std::log(1.0 - p));
        }
        const double expect = 0.5 * (1.0 - (2 * inter + 1) / (ps + gs + 1)) + 0.5 * bce / 20;
        CHECK(std::abs(dice_bce_loss(c[0], b) - expect) <= 1e-10);
        CHECK(dice_bce_loss(c[0], b) >= 0.0);
    }
    CHECK_THROWS_AS(dice_bce_loss(zero, BinaryMask(3, 3)), ArgumentError);
}

TEST_CASE("mask-weight gradients") {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 10; ++trial) {
        const auto c = fixtures::random_candidates(6, 5, rng);
        const BinaryMask gt = fixtures::random_binary(6, 5, rng);
        std::normal_distribution<double> g(0.0, 1.0);
        const auto r = fixtures::check_mask_grad(c, {g(rng), g(rng), g(rng)}, gt);
        CHECK(r.worst <= fixtures::kGradTol);
    }
    const auto c = fixtures::random_candidates(3, 3, rng);
    const std::array<LogitGrid, 3> same{c[0], c[0], c[0]};
    const auto ev = mask_weight_grads(same, {0.3, -0.1, 2.0}, fixtures::random_binary(3, 3, rng));
    for (double v : ev.grad) CHECK(std::abs(v) <= 1e-15);
}

TEST_CASE("train_mask_weights") {
    SynthConfig sc;
    sc.classes = 1;
    sc.extent = 16;
    sc.scales = {8, 4};
    sc.channels = {6, 6};
    sc.noise = 0.1f;
    sc.blob_fraction = 0.3f;
    const SynthScene s = synth_scene(21, sc);
    const TrainView v{"aug", prepare_scales(s.ref, sc.scales), s.ref_mask, prepare_scales(s.aug, sc.scales),
                      s.aug_mask};
    CycleParams p = identity_params(1, 2, 6);
    p.thresholds = {0.5f};

    const BinaryMask gt = binarize_mask(s.aug_mask, 1);
    std::array<LogitGrid, 3> cand{LogitGrid(16, 16), LogitGrid(16, 16), LogitGrid(16, 16)};
    for (int i = 0; i < 256; ++i) {
        cand[0].values[i] = gt.cells[i] ? 10.0f : -10.0f;
        cand[1].values[i] = -cand[0].values[i];
        cand[2].values[i] = i < 128 ? cand[0].values[i] : -10.0f;
    }
    // put the ground-truth candidate last so the test does not favour index 0
    std::array<LogitGrid, 3> order{cand[1], cand[2], cand[0]};
    FixedDecoder dec(order);
    MaskTrainReport report;
    const CycleParams out = train_mask_weights({v}, p, dec, {}, {}, &report);
    CHECK(report.samples == 1);
    CHECK(dec.calls == 1);
    const float* w = out.w_mask.data.data();
    const double e0 = std::exp(w[0]), e1 = std::exp(w[1]), e2 = std::exp(w[2]);
    CHECK(e2 / (e0 + e1 + e2) > 0.9);

    CycleParams frozen = out;
    frozen.w_mask = p.w_mask;
    CHECK(frozen == p);

    FixedDecoder again(order);
    CHECK(train_mask_weights({v}, p, again, {}, {}) == out);

    FailingDecoder bad;
    CHECK_THROWS_AS(train_mask_weights({v}, p, bad, {}, {}), BridgeError);
}
