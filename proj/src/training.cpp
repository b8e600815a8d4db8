#include "cyclematch/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "cyclematch/error.hpp"

namespace cyclematch {

namespace {

constexpr double kNormEps = 1e-8;

DMatrix to_dmatrix(const Matrix& m) {
    DMatrix d(m.rows, m.cols);
    std::copy(m.data.begin(), m.data.end(), d.data.begin());
    return d;
}

Matrix to_matrix(const DMatrix& d) {
    Matrix m(d.rows, d.cols);
    std::transform(d.data.begin(), d.data.end(), m.data.begin(), [](double v) { return static_cast<float>(v); });
    return m;
}

// Location-major f64 rows back to a channel-major f32 map.
FeatureMap to_feature_map(const DMatrix& rows, int h, int w) {
    FeatureMap m(rows.cols, h, w);
    const std::size_t n = m.locations();
    for (int i = 0; i < rows.rows; ++i)
        for (int c = 0; c < rows.cols; ++c) m.data[c * n + i] = static_cast<float>(rows.at(i, c));
    return m;
}

// y = x w^T
DMatrix linear(const DMatrix& x, const DMatrix& w) {
    DMatrix y(x.rows, w.rows);
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        double* yi = y.row(i);
        for (int f = 0; f < w.rows; ++f) {
            const double* wf = w.row(f);
            double acc = 0.0;
            for (int k = 0; k < w.cols; ++k) acc += wf[k] * xi[k];
            yi[f] = acc;
        }
    }
    return y;
}

// gw += gy^T x; returns gx = gy w.
DMatrix linear_backward(const DMatrix& x, const DMatrix& w, const DMatrix& gy, DMatrix* gw) {
    DMatrix gx(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        const double* xi = x.row(i);
        const double* gi = gy.row(i);
        double* gxi = gx.row(i);
        for (int f = 0; f < w.rows; ++f) {
            const double g = gi[f];
            if (g == 0.0) continue;
            const double* wf = w.row(f);
            if (gw) {
                double* gwf = gw->row(f);
                for (int k = 0; k < w.cols; ++k) gwf[k] += g * xi[k];
            }
            for (int k = 0; k < w.cols; ++k) gxi[k] += g * wf[k];
        }
    }
    return gx;
}

struct Normalized {
    DMatrix y;
    std::vector<double> norms;
};

Normalized normalize_rows(const DMatrix& u) {
    Normalized out{DMatrix(u.rows, u.cols), std::vector<double>(static_cast<std::size_t>(u.rows))};
    for (int i = 0; i < u.rows; ++i) {
        double sq = 0.0;
        for (int c = 0; c < u.cols; ++c) sq += u.at(i, c) * u.at(i, c);
        const double n = std::sqrt(sq);
        out.norms[i] = n;
        if (n < kNormEps) continue;
        for (int c = 0; c < u.cols; ++c) out.y.at(i, c) = u.at(i, c) / n;
    }
    return out;
}

DMatrix normalize_backward(const Normalized& n, const DMatrix& gy) {
    DMatrix gu(gy.rows, gy.cols);
    for (int i = 0; i < gy.rows; ++i) {
        if (n.norms[i] < kNormEps) continue;
        double dot = 0.0;
        for (int c = 0; c < gy.cols; ++c) dot += n.y.at(i, c) * gy.at(i, c);
        for (int c = 0; c < gy.cols; ++c) gu.at(i, c) = (gy.at(i, c) - n.y.at(i, c) * dot) / n.norms[i];
    }
    return gu;
}

// Bilinear resampling as an explicit sparse linear map over locations.
struct Resampler {
    int in_n = 0;
    int out_n = 0;
    std::vector<std::array<std::pair<int, double>, 4>> taps;

    Resampler(int ih, int iw, int oh, int ow) : in_n(ih * iw), out_n(oh * ow) {
        const auto ty = bilinear_taps(ih, oh);
        const auto tx = bilinear_taps(iw, ow);
        taps.reserve(static_cast<std::size_t>(out_n));
        for (int y = 0; y < oh; ++y) {
            const double wy = ty[y].weight_hi;
            for (int x = 0; x < ow; ++x) {
                const double wx = tx[x].weight_hi;
                taps.push_back({{{ty[y].lo * iw + tx[x].lo, (1.0 - wy) * (1.0 - wx)},
                                 {ty[y].lo * iw + tx[x].hi, (1.0 - wy) * wx},
                                 {ty[y].hi * iw + tx[x].lo, wy * (1.0 - wx)},
                                 {ty[y].hi * iw + tx[x].hi, wy * wx}}});
            }
        }
    }

    DMatrix forward(const DMatrix& in) const {
        DMatrix out(out_n, in.cols);
        for (int o = 0; o < out_n; ++o)
            for (const auto& [i, w] : taps[o])
                for (int c = 0; c < in.cols; ++c) out.at(o, c) += w * in.at(i, c);
        return out;
    }

    void backward(const DMatrix& gout, DMatrix& gin) const {
        for (int o = 0; o < out_n; ++o)
            for (const auto& [i, w] : taps[o])
                for (int c = 0; c < gout.cols; ++c) gin.at(i, c) += w * gout.at(o, c);
    }
};

struct Pyramid {
    std::vector<std::size_t> order;  // finest first
    std::vector<DMatrix> h;
    std::vector<DMatrix> p;  // pre-normalization, feeds the next finer scale
    std::vector<Normalized> f;
};

std::vector<std::size_t> fpn_order(const ScaleSet& scales) {
    std::vector<std::size_t> order(scales.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scales[a].locations() > scales[b].locations();
    });
    return order;
}

Pyramid fpn_forward(const ScaleSet& scales, const std::vector<DMatrix>& lateral) {
    Pyramid py;
    const std::size_t n = scales.size();
    py.order = fpn_order(scales);
    py.h.resize(n);
    py.p.resize(n);
    py.f.resize(n);
    for (std::size_t s = 0; s < n; ++s) py.h[s] = to_dmatrix(scales[s]);
    for (std::size_t k = n; k-- > 0;) {
        const std::size_t s = py.order[k];
        py.p[s] = linear(py.h[s], lateral[s]);
        if (k + 1 < n) {
            const std::size_t c = py.order[k + 1];
            const Resampler up(scales[c].height, scales[c].width, scales[s].height, scales[s].width);
            const DMatrix u = up.forward(py.p[c]);
            for (std::size_t i = 0; i < u.data.size(); ++i) py.p[s].data[i] += u.data[i];
        }
        py.f[s] = normalize_rows(py.p[s]);
    }
    return py;
}

void fpn_backward(const ScaleSet& scales, const std::vector<DMatrix>& lateral, const Pyramid& py,
                  const std::vector<DMatrix>& gf, std::vector<DMatrix>& glateral) {
    const std::size_t n = scales.size();
    std::vector<DMatrix> gp(n);
    for (std::size_t s = 0; s < n; ++s) gp[s] = normalize_backward(py.f[s], gf[s]);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t s = py.order[k];
        linear_backward(py.h[s], lateral[s], gp[s], &glateral[s]);
        if (k + 1 < n) {
            const std::size_t c = py.order[k + 1];
            const Resampler up(scales[c].height, scales[c].width, scales[s].height, scales[s].width);
            up.backward(gp[s], gp[c]);
        }
    }
}

struct Fnv {
    std::uint64_t h = 1469598103934665603ULL;
    void add(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xffU;
            h *= 1099511628211ULL;
        }
    }
};

// S[x, i] = targets[x] . rows[i]
DMatrix pair_similarity(const DMatrix& targets, const DMatrix& rows) {
    DMatrix s(targets.rows, rows.rows);
    for (int x = 0; x < targets.rows; ++x)
        for (int i = 0; i < rows.rows; ++i) {
            double acc = 0.0;
            for (int c = 0; c < rows.cols; ++c) acc += targets.at(x, c) * rows.at(i, c);
            s.at(x, i) = acc;
        }
    return s;
}

struct Contrastive {
    double loss = 0.0;
    std::size_t fg = 0;
    int hard_x = -1;  // attained background maximum
    int hard_i = -1;
};

Contrastive contrastive_terms(const DMatrix& sim, const BinaryMask& m) {
    Contrastive c;
    double fg_sum = 0.0;
    double bg_max = -INFINITY;
    for (int i = 0; i < sim.cols; ++i) {
        if (m.cells[i]) {
            ++c.fg;
            for (int x = 0; x < sim.rows; ++x) fg_sum += sim.at(x, i);
        } else {
            for (int x = 0; x < sim.rows; ++x)
                if (sim.at(x, i) > bg_max) {
                    bg_max = sim.at(x, i);
                    c.hard_x = x;
                    c.hard_i = i;
                }
        }
    }
    if (c.fg == 0 || c.hard_i < 0) throw DegenerateMask("contrastive loss needs foreground and background cells");
    c.loss = 0.5 * (1.0 - fg_sum / (static_cast<double>(c.fg) * sim.rows)) + 0.5 * bg_max;
    return c;
}

void check_view(const TrainView& v, int scales) {
    if (static_cast<int>(v.ref.size()) != scales || static_cast<int>(v.test.size()) != scales)
        throw ArgumentError("training view '" + v.image_id + "' has the wrong number of scales");
    for (int s = 0; s < scales; ++s)
        if (v.ref[s].height != v.test[s].height || v.ref[s].width != v.test[s].width)
            throw ArgumentError("training view '" + v.image_id + "': reference and test extents differ");
}

}  // namespace

DMatrix to_dmatrix(const FeatureMap& m) {
    DMatrix d(static_cast<int>(m.locations()), m.channels);
    const std::size_t n = m.locations();
    for (std::size_t i = 0; i < n; ++i)
        for (int c = 0; c < m.channels; ++c) d.at(static_cast<int>(i), c) = m.data[c * n + i];
    return d;
}

DMatrix to_dmatrix(const FeatureRows& r) {
    DMatrix d(r.rows, r.channels);
    std::copy(r.data.begin(), r.data.end(), d.data.begin());
    return d;
}

WarmupParams WarmupParams::from(const CycleParams& p) {
    WarmupParams w;
    for (const auto& l : p.fpn.lateral) w.fpn.push_back(to_dmatrix(l));
    for (const auto& per_scale : p.projectors) {
        auto& fm = w.feat_map.emplace_back();
        auto& ft = w.feat.emplace_back();
        for (const auto& pair : per_scale) {
            fm.push_back(to_dmatrix(pair.feat_map));
            ft.push_back(to_dmatrix(pair.feat));
        }
    }
    w.w_scale = to_dmatrix(p.w_scale);
    return w;
}

void WarmupParams::store(CycleParams& p) const {
    for (std::size_t s = 0; s < fpn.size(); ++s) p.fpn.lateral[s] = to_matrix(fpn[s]);
    for (std::size_t c = 0; c < feat.size(); ++c)
        for (std::size_t s = 0; s < feat[c].size(); ++s) {
            p.projectors[c][s].feat_map = to_matrix(feat_map[c][s]);
            p.projectors[c][s].feat = to_matrix(feat[c][s]);
        }
    p.w_scale = to_matrix(w_scale);
}

WarmupParams WarmupParams::zeros_like() const {
    WarmupParams z = *this;
    auto clear = [](DMatrix& m) { std::fill(m.data.begin(), m.data.end(), 0.0); };
    for (auto& m : z.fpn) clear(m);
    for (auto& v : z.feat_map)
        for (auto& m : v) clear(m);
    for (auto& v : z.feat)
        for (auto& m : v) clear(m);
    clear(z.w_scale);
    return z;
}

namespace {

template <typename Fn>
void for_each_matrix(WarmupParams& p, Fn&& fn) {
    for (auto& m : p.fpn) fn(m);
    for (std::size_t c = 0; c < p.feat.size(); ++c)
        for (std::size_t s = 0; s < p.feat[c].size(); ++s) {
            fn(p.feat_map[c][s]);
            fn(p.feat[c][s]);
        }
    fn(p.w_scale);
}

}  // namespace

std::vector<double> WarmupParams::flatten() const {
    std::vector<double> out;
    for_each_matrix(const_cast<WarmupParams&>(*this),
                    [&](const DMatrix& m) { out.insert(out.end(), m.data.begin(), m.data.end()); });
    return out;
}

void WarmupParams::unflatten(std::span<const double> values) {
    std::size_t at = 0;
    for_each_matrix(*this, [&](DMatrix& m) {
        if (at + m.data.size() > values.size()) throw ArgumentError("unflatten: too few values");
        std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(at), m.data.size(), m.data.begin());
        at += m.data.size();
    });
    if (at != values.size()) throw ArgumentError("unflatten: too many values");
}

void WarmupParams::axpy(double alpha, const WarmupParams& x) {
    const auto xs = x.flatten();
    std::size_t at = 0;
    for_each_matrix(*this, [&](DMatrix& m) {
        for (auto& v : m.data) v += alpha * xs[at++];
    });
}

double contrastive_loss(const DMatrix& test_rows, const BinaryMask& m, const DMatrix& targets) {
    if (static_cast<std::size_t>(test_rows.rows) != m.cells.size())
        throw ArgumentError("contrastive_loss: mask and rows differ in size");
    if (test_rows.cols != targets.cols) throw ArgumentError("contrastive_loss: channel mismatch");
    return contrastive_terms(pair_similarity(targets, test_rows), m).loss;
}

double scale_weight_loss(const SimilarityMap& s, const BinaryMask& m) {
    if (s.values.size() != m.cells.size()) throw ArgumentError("scale_weight_loss: extent mismatch");
    if (s.values.empty()) throw ArgumentError("scale_weight_loss: empty map");
    double total = 0.0;
    for (std::size_t i = 0; i < s.values.size(); ++i) total += std::abs(static_cast<double>(s.values[i]) - m.cells[i]);
    return total / static_cast<double>(s.values.size());
}

WarmupEval warmup_grads(const WarmupParams& p, const TrainView& view, int class_id, const WarmupConfig& cfg,
                        bool with_grad) {
    const int scales = static_cast<int>(p.fpn.size());
    if (class_id < 1 || class_id > static_cast<int>(p.feat.size()))
        throw ArgumentError("class id outside parameter range");
    check_view(view, scales);
    const auto ci = static_cast<std::size_t>(class_id - 1);
    const double lambda = cfg.lambda_scc;

    const Pyramid pr = fpn_forward(view.ref, p.fpn);
    const Pyramid pt = fpn_forward(view.test, p.fpn);

    struct ScaleState {
        bool present = false;
        bool sim_term = false;
        DMatrix ur, ut;
        Normalized r, t;
        std::vector<GridPoint> points;
        std::vector<int> fg_cells;
        DMatrix mean_raw;
        Normalized mean;
        DMatrix targets;
        DMatrix sim;
        std::vector<int> chosen;
        std::vector<std::uint8_t> cycle;
        DMatrix scc;  // N_s x 1
        Contrastive contrast;
    };
    std::vector<ScaleState> st(static_cast<std::size_t>(scales));
    Fnv sig;

    const int h1 = view.test[0].height;
    const int w1 = view.test[0].width;
    const int n1 = h1 * w1;
    WarmupEval ev;
    int sim_terms = 0;

    for (int s = 0; s < scales; ++s) {
        ScaleState& S = st[s];
        const int h = view.ref[s].height;
        const int w = view.ref[s].width;
        const BinaryMask br = binarize_mask(resize_nearest(view.ref_mask, h, w), class_id);
        if (br.count() == 0) {
            sig.add(0xdead);
            continue;
        }
        S.present = true;
        S.ur = linear(pr.f[s].y, p.feat[ci][s]);
        S.r = normalize_rows(S.ur);
        S.ut = linear(pt.f[s].y, p.feat_map[ci][s]);
        S.t = normalize_rows(S.ut);

        S.points = sample_foreground_points(br, cfg.points);
        const int x_count = static_cast<int>(S.points.size()) + 1;
        const int d = S.r.y.cols;
        S.targets = DMatrix(x_count, d);
        for (int x = 0; x + 1 < x_count; ++x) {
            const int cell = S.points[x].y * w + S.points[x].x;
            std::copy_n(S.r.y.row(cell), d, S.targets.row(x));
        }
        S.mean_raw = DMatrix(1, d);
        for (int i = 0; i < h * w; ++i) {
            if (!br.cells[i]) continue;
            S.fg_cells.push_back(i);
            for (int c = 0; c < d; ++c) S.mean_raw.at(0, c) += S.r.y.at(i, c);
        }
        for (auto& v : S.mean_raw.data) v /= static_cast<double>(S.fg_cells.size());
        S.mean = normalize_rows(S.mean_raw);
        std::copy_n(S.mean.y.row(0), d, S.targets.row(x_count - 1));
        for (double nrm : S.mean.norms) sig.add(nrm < kNormEps);

        S.sim = pair_similarity(S.targets, S.t.y);
        const int n = h * w;
        S.chosen.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            int dominant = 0, lo = 0, hi = 0;
            for (int x = 1; x < x_count; ++x) {
                const double v = S.sim.at(x, i);
                if (std::abs(v) > std::abs(S.sim.at(dominant, i))) dominant = x;
                if (v < S.sim.at(lo, i)) lo = x;
                if (v > S.sim.at(hi, i)) hi = x;
            }
            S.chosen[i] = S.sim.at(dominant, i) >= 0.0 ? hi : lo;
            sig.add(static_cast<std::uint64_t>(S.chosen[i]));
        }

        const auto best = best_match(to_rows(to_feature_map(S.t.y, h, w)), to_feature_map(S.r.y, h, w), cfg.kernel);
        S.cycle.resize(static_cast<std::size_t>(n));
        S.scc = DMatrix(n, 1);
        for (int i = 0; i < n; ++i) {
            S.cycle[i] = br.cells[best[i]];
            sig.add(S.cycle[i]);
            S.scc.at(i, 0) = S.sim.at(S.chosen[i], i) - (S.cycle[i] ? 0.0 : lambda);
        }

        const BinaryMask bt = binarize_mask(resize_nearest(view.test_mask, h, w), class_id);
        const std::size_t fg = bt.count();
        if (fg > 0 && fg < bt.cells.size()) {
            S.sim_term = true;
            S.contrast = contrastive_terms(S.sim, bt);
            sig.add(static_cast<std::uint64_t>(S.contrast.hard_x) << 32 | static_cast<std::uint64_t>(S.contrast.hard_i));
            ev.sim_loss += S.contrast.loss;
            ++sim_terms;
        }
    }
    if (sim_terms > 0) ev.sim_loss /= sim_terms;
    if (with_grad) ev.grad = p.zeros_like();

    std::vector<bool> present(static_cast<std::size_t>(scales));
    for (int s = 0; s < scales; ++s) present[s] = st[s].present;
    const bool any = std::any_of(present.begin(), present.end(), [](bool b) { return b; });

    // Softmax over present scales.
    std::vector<double> pi(static_cast<std::size_t>(scales), 0.0);
    std::vector<DMatrix> up(static_cast<std::size_t>(scales));
    DMatrix agg(n1, 1);
    std::vector<double> residual_sign(static_cast<std::size_t>(n1), 0.0);
    if (any) {
        double hi = -INFINITY;
        for (int s = 0; s < scales; ++s)
            if (present[s]) hi = std::max(hi, p.w_scale.at(static_cast<int>(ci), s));
        double total = 0.0;
        for (int s = 0; s < scales; ++s)
            if (present[s]) total += pi[s] = std::exp(p.w_scale.at(static_cast<int>(ci), s) - hi);
        for (auto& v : pi) v /= total;

        for (int s = 0; s < scales; ++s) {
            if (!present[s]) continue;
            const Resampler rs(view.test[s].height, view.test[s].width, h1, w1);
            up[s] = rs.forward(st[s].scc);
            for (int i = 0; i < n1; ++i) agg.at(i, 0) += pi[s] * up[s].at(i, 0);
        }
        const BinaryMask bt1 = binarize_mask(resize_nearest(view.test_mask, h1, w1), class_id);
        double l1 = 0.0;
        for (int i = 0; i < n1; ++i) {
            const double r = agg.at(i, 0) - bt1.cells[i];
            l1 += std::abs(r);
            residual_sign[i] = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
            sig.add(static_cast<std::uint64_t>(static_cast<int>(residual_sign[i]) + 1));
        }
        ev.scale_loss = l1 / n1;
    }
    ev.loss = ev.sim_loss + cfg.lambda_l1 * ev.scale_loss;
    if (!std::isfinite(ev.loss)) throw NumericsError("warmup loss is not finite");
    ev.decisions = sig.h;
    if (!with_grad || !any) return ev;

    // Backward.
    std::vector<DMatrix> gfr(static_cast<std::size_t>(scales)), gft(static_cast<std::size_t>(scales));
    for (int s = 0; s < scales; ++s) {
        gfr[s] = DMatrix(pr.f[s].y.rows, pr.f[s].y.cols);
        gft[s] = DMatrix(pt.f[s].y.rows, pt.f[s].y.cols);
    }
    DMatrix gagg(n1, 1);
    for (int i = 0; i < n1; ++i) gagg.at(i, 0) = cfg.lambda_l1 * residual_sign[i] / n1;

    double pi_dot = 0.0;
    std::vector<double> dpi(static_cast<std::size_t>(scales), 0.0);
    for (int s = 0; s < scales; ++s) {
        if (!present[s]) continue;
        for (int i = 0; i < n1; ++i) dpi[s] += gagg.at(i, 0) * up[s].at(i, 0);
        pi_dot += pi[s] * dpi[s];
    }
    for (int s = 0; s < scales; ++s)
        if (present[s]) ev.grad.w_scale.at(static_cast<int>(ci), s) = pi[s] * (dpi[s] - pi_dot);

    for (int s = 0; s < scales; ++s) {
        ScaleState& S = st[s];
        if (!S.present) continue;
        const int n = S.sim.cols;
        const int x_count = S.sim.rows;
        DMatrix gsim(x_count, n);

        DMatrix gup(n1, 1);
        for (int i = 0; i < n1; ++i) gup.at(i, 0) = pi[s] * gagg.at(i, 0);
        DMatrix gscc(n, 1);
        const Resampler rs(view.test[s].height, view.test[s].width, h1, w1);
        rs.backward(gup, gscc);
        for (int i = 0; i < n; ++i) gsim.at(S.chosen[i], i) += gscc.at(i, 0);

        if (S.sim_term) {
            const BinaryMask bt =
                binarize_mask(resize_nearest(view.test_mask, view.test[s].height, view.test[s].width), class_id);
            const double gmean = -0.5 / (static_cast<double>(S.contrast.fg) * x_count) / sim_terms;
            for (int i = 0; i < n; ++i)
                if (bt.cells[i])
                    for (int x = 0; x < x_count; ++x) gsim.at(x, i) += gmean;
            gsim.at(S.contrast.hard_x, S.contrast.hard_i) += 0.5 / sim_terms;
        }

        const int d = S.t.y.cols;
        DMatrix gtargets(x_count, d);
        DMatrix gt(n, d);
        for (int x = 0; x < x_count; ++x)
            for (int i = 0; i < n; ++i) {
                const double g = gsim.at(x, i);
                if (g == 0.0) continue;
                for (int c = 0; c < d; ++c) {
                    gtargets.at(x, c) += g * S.t.y.at(i, c);
                    gt.at(i, c) += g * S.targets.at(x, c);
                }
            }

        DMatrix gr(n, d);
        const int w = view.ref[s].width;
        for (int x = 0; x + 1 < x_count; ++x) {
            const int cell = S.points[x].y * w + S.points[x].x;
            for (int c = 0; c < d; ++c) gr.at(cell, c) += gtargets.at(x, c);
        }
        DMatrix gmean_y(1, d);
        std::copy_n(gtargets.row(x_count - 1), d, gmean_y.row(0));
        const DMatrix gmean_raw = normalize_backward(S.mean, gmean_y);
        const double inv = 1.0 / static_cast<double>(S.fg_cells.size());
        for (int cell : S.fg_cells)
            for (int c = 0; c < d; ++c) gr.at(cell, c) += gmean_raw.at(0, c) * inv;

        const DMatrix gur = normalize_backward(S.r, gr);
        const DMatrix gut = normalize_backward(S.t, gt);
        const DMatrix gfr_s = linear_backward(pr.f[s].y, p.feat[ci][s], gur, &ev.grad.feat[ci][s]);
        const DMatrix gft_s = linear_backward(pt.f[s].y, p.feat_map[ci][s], gut, &ev.grad.feat_map[ci][s]);
        for (std::size_t k = 0; k < gfr_s.data.size(); ++k) gfr[s].data[k] += gfr_s.data[k];
        for (std::size_t k = 0; k < gft_s.data.size(); ++k) gft[s].data[k] += gft_s.data[k];
    }

    fpn_backward(view.ref, p.fpn, pr, gfr, ev.grad.fpn);
    fpn_backward(view.test, p.fpn, pt, gft, ev.grad.fpn);
    return ev;
}

std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                     std::span<const double> x, double eps) {
    std::vector<double> probe(x.begin(), x.end());
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + eps;
        const double up = f(probe);
        probe[i] = x[i] - eps;
        const double down = f(probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * eps);
    }
    return g;
}

std::vector<float> fit_thresholds(const std::vector<TrainView>& views, const CycleParams& params,
                                  const CycleSelectOptions& opts) {
    std::vector<float> out;
    for (int c = 1; c <= params.classes; ++c) {
        double total = 0.0;
        int used = 0;
        for (const auto& v : views) {
            const auto res = multiscale_cycleselect(v.ref, v.test, v.ref_mask, c, params, opts);
            if (!res) continue;
            const auto& agg = res->aggregate;
            const BinaryMask bt = binarize_mask(resize_nearest(v.test_mask, agg.height, agg.width), c);
            try {
                total += compute_threshold(agg, bt).value;
                ++used;
            } catch (const DegenerateMask&) {
            }
        }
        out.push_back(used > 0 ? static_cast<float>(total / used) : -1.0f - opts.lambda_scc);
    }
    return out;
}

CycleParams train_warmup(const std::vector<TrainView>& views, CycleParams params, const WarmupConfig& cfg,
                         TrainReport* report) {
    if (views.empty()) throw ArgumentError("warmup needs at least one training view");
    if (cfg.epochs < 0 || !(cfg.step >= 0.0)) throw ArgumentError("warmup: epochs and step must be >= 0");
    for (const auto& v : views) check_view(v, params.scales());

    WarmupParams wp = WarmupParams::from(params);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss = 0.0;
        double sim = 0.0;
        int terms = 0;
        for (int c = 1; c <= params.classes; ++c) {
            for (const auto& v : views) {
                const WarmupEval ev = warmup_grads(wp, v, c, cfg, true);
                if (std::abs(ev.loss) > 1e6)
                    throw NumericsError("warmup diverged at epoch " + std::to_string(epoch + 1));
                const auto g = ev.grad.flatten();
                if (!std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); }))
                    throw NumericsError("non-finite gradient at epoch " + std::to_string(epoch + 1));
                wp.axpy(-cfg.step, ev.grad);
                loss += ev.loss;
                sim += ev.sim_loss;
                ++terms;
            }
        }
        if (report) {
            report->epoch_loss.push_back(loss / terms);
            report->epoch_sim_loss.push_back(sim / terms);
        }
    }
    for (double v : wp.flatten())
        if (!std::isfinite(v) || std::abs(v) > 1e30) throw NumericsError("warmup produced non-finite parameters");
    wp.store(params);
    params.thresholds = fit_thresholds(views, params, {cfg.points, cfg.lambda_scc, cfg.kernel});
    return params;
}

namespace {

std::array<double, 3> softmax3(const std::array<double, 3>& w) {
    const double hi = std::max({w[0], w[1], w[2]});
    std::array<double, 3> e{std::exp(w[0] - hi), std::exp(w[1] - hi), std::exp(w[2] - hi)};
    const double t = e[0] + e[1] + e[2];
    for (auto& v : e) v /= t;
    return e;
}

void check_candidates(const std::array<LogitGrid, 3>& c) {
    for (int k = 1; k < 3; ++k)
        if (c[k].height != c[0].height || c[k].width != c[0].width)
            throw ArgumentError("mask candidates differ in extent");
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
double logistic(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// Loss and d loss / d z for logits z.
double dice_bce(const std::vector<double>& z, const BinaryMask& gt, std::vector<double>* gz) {
    const std::size_t n = z.size();
    if (n == 0) throw ArgumentError("dice_bce_loss: empty grid");
    std::vector<double> p(n);
    double inter = 0.0, psum = 0.0, gsum = 0.0, bce = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = logistic(z[i]);
        const double g = gt.cells[i];
        inter += p[i] * g;
        psum += p[i];
        gsum += g;
        bce += softplus(z[i]) - g * z[i];
    }
    const double denom = psum + gsum + 1.0;
    const double dice = 1.0 - (2.0 * inter + 1.0) / denom;
    bce /= static_cast<double>(n);
    if (gz) {
        gz->resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double g = gt.cells[i];
            const double ddice_dp = -(2.0 * g * denom - (2.0 * inter + 1.0)) / (denom * denom);
            const double dp_dz = p[i] * (1.0 - p[i]);
            (*gz)[i] = 0.5 * ddice_dp * dp_dz + 0.5 * (p[i] - g) / static_cast<double>(n);
        }
    }
    return 0.5 * dice + 0.5 * bce;
}

}  // namespace

LogitGrid combine_masks(const std::array<LogitGrid, 3>& candidates, std::span<const float, 3> w) {
    check_candidates(candidates);
    const auto pi = softmax3({w[0], w[1], w[2]});
    LogitGrid out(candidates[0].height, candidates[0].width);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        double z = 0.0;
        for (int k = 0; k < 3; ++k) z += pi[k] * candidates[k].values[i];
        out.values[i] = static_cast<float>(z);
    }
    return out;
}

double dice_bce_loss(const LogitGrid& pred_logits, const BinaryMask& gt) {
    if (pred_logits.values.size() != gt.cells.size() || pred_logits.height != gt.height)
        throw ArgumentError("dice_bce_loss: extent mismatch");
    return dice_bce(std::vector<double>(pred_logits.values.begin(), pred_logits.values.end()), gt, nullptr);
}

MaskWeightEval mask_weight_grads(const std::array<LogitGrid, 3>& candidates, const std::array<double, 3>& w,
                                 const BinaryMask& gt) {
    check_candidates(candidates);
    if (candidates[0].values.size() != gt.cells.size() || candidates[0].height != gt.height)
        throw ArgumentError("mask_weight_grads: extent mismatch");
    const auto pi = softmax3(w);
    const std::size_t n = gt.cells.size();
    std::vector<double> z(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (int k = 0; k < 3; ++k) z[i] += pi[k] * candidates[k].values[i];
    std::vector<double> gz;
    MaskWeightEval ev;
    ev.loss = dice_bce(z, gt, &gz);
    for (int k = 0; k < 3; ++k) {
        double g = 0.0;
        for (std::size_t i = 0; i < n; ++i) g += gz[i] * (candidates[k].values[i] - z[i]);
        ev.grad[k] = pi[k] * g;
    }
    return ev;
}

CycleParams train_mask_weights(const std::vector<TrainView>& views, CycleParams params, MaskDecoder& decoder,
                               const MaskConfig& cfg, const PipelineOptions& opts, MaskTrainReport* report) {
    if (cfg.epochs < 0 || !(cfg.step >= 0.0)) throw ArgumentError("mask training: epochs and step must be >= 0");
    struct Sample {
        int class_id;
        std::array<LogitGrid, 3> candidates;
        BinaryMask gt;
    };
    std::vector<Sample> samples;
    for (int c = 1; c <= params.classes; ++c) {
        for (const auto& v : views) {
            check_view(v, params.scales());
            const ImageExtent image{v.test_mask.width, v.test_mask.height};
            const ClassOutcome out = prompt_class(v.ref, v.ref_mask, v.test, image, c, params, opts);
            if (out.prompts.absent()) continue;
            DecodeResponse resp = decoder.decode({v.image_id, out.prompts});
            for (const auto& m : resp.masks)
                if (m.height != image.height || m.width != image.width)
                    throw BridgeError("decoder returned masks of the wrong extent");
            samples.push_back({c, std::move(resp.masks), binarize_mask(v.test_mask, c)});
        }
    }
    if (report) report->samples = static_cast<int>(samples.size());

    std::vector<std::array<double, 3>> w(static_cast<std::size_t>(params.classes));
    for (int c = 0; c < params.classes; ++c)
        for (int k = 0; k < 3; ++k) w[c][k] = params.w_mask.at(c, k);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss = 0.0;
        for (const auto& s : samples) {
            auto& wc = w[static_cast<std::size_t>(s.class_id - 1)];
            const MaskWeightEval ev = mask_weight_grads(s.candidates, wc, s.gt);
            if (!std::isfinite(ev.loss)) throw NumericsError("mask-weight loss is not finite");
            for (int k = 0; k < 3; ++k) wc[k] -= cfg.step * ev.grad[k];
            loss += ev.loss;
        }
        if (report && !samples.empty()) report->epoch_loss.push_back(loss / static_cast<double>(samples.size()));
    }
    for (int c = 0; c < params.classes; ++c)
        for (int k = 0; k < 3; ++k) params.w_mask.at(c, k) = static_cast<float>(w[c][k]);
    return params;
}

}  // namespace cyclematch
