#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "cyclematch/decoder.hpp"
#include "cyclematch/error.hpp"
#include "cyclematch/metrics.hpp"
#include "cyclematch/params_io.hpp"
#include "cyclematch/pipeline.hpp"
#include "cyclematch/run_config.hpp"
#include "cyclematch/synth.hpp"
#include "cyclematch/training.hpp"

namespace fs = std::filesystem;
using namespace cyclematch;
using nlohmann::json;

namespace {

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<int> k;
    std::optional<float> lambda_scc;
    std::optional<std::string> decoder;
    std::optional<fs::path> params;
    std::optional<float> fixed_threshold;
    std::optional<int> threads;
    bool single_point = false;
    bool no_negatives = false;
    bool no_scc = false;
};

struct Context {
    RunConfig cfg;
    fs::path out;
};

std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

const ImageInput& need(const std::optional<ImageInput>& in, const char* what) {
    if (!in) throw ConfigError(std::string("config needs a '") + what + "' entry for this command");
    return *in;
}

ScaleSet load_scales(const ImageInput& in, const std::vector<int>& d_match) {
    ScaleSet raw;
    for (const auto& f : in.features) raw.push_back(read_feature_map(f));
    if (d_match.empty()) {
        ScaleSet out;
        for (const auto& m : raw) out.push_back(l2_normalize_channels(m));
        return out;
    }
    return prepare_scales(raw, d_match);
}

CycleParams need_params(const RunConfig& cfg) {
    if (!cfg.params) throw ConfigError("config needs 'params' for this command");
    return load_params(*cfg.params);
}

ImageExtent extent_of(const ClassMask& m) { return {m.width, m.height}; }

std::unique_ptr<MaskDecoder> make_decoder(const RunConfig& cfg, const std::vector<const ImageInput*>& images) {
    if (cfg.decoder == "oracle") {
        auto d = std::make_unique<OracleDecoder>();
        for (const ImageInput* in : images) d->add_image(in->id, read_class_mask(in->mask));
        return d;
    }
    return std::make_unique<ExternalDecoder>(cfg.decoder.substr(7));
}

void cmd_synth(const Context& ctx) {
    const SynthConfig& sc = ctx.cfg.synth;
    const SynthScene scene = synth_scene(ctx.cfg.seed, sc);
    auto put = [&](const std::string& name, const ScaleSet& s, const ClassMask& m) {
        for (std::size_t i = 0; i < s.size(); ++i)
            write_tensor(ctx.out / (name + "_s" + std::to_string(i + 1) + ".cstf"), to_tensor(s[i]));
        write_tensor(ctx.out / (name + "_mask.cstf"), to_tensor(m));
    };
    put("ref", scene.ref, scene.ref_mask);
    put("aug", scene.aug, scene.aug_mask);
    put("test", scene.test, scene.test_mask);
    write_file_atomic(ctx.out / "run.json", dump_json(synth_run_config(sc, ctx.cfg.seed)));
}

struct MatchInputs {
    ScaleSet ref, test;
    ClassMask ref_mask, test_mask;
    const ImageInput* test_input = nullptr;
};

MatchInputs load_match_inputs(const RunConfig& cfg) {
    const ImageInput& r = need(cfg.reference, "reference");
    const ImageInput& t = need(cfg.test, "test");
    MatchInputs in{load_scales(r, cfg.d_match), load_scales(t, cfg.d_match), read_class_mask(r.mask),
                   read_class_mask(t.mask), &t};
    return in;
}

void cmd_match(const Context& ctx) {
    const CycleParams params = need_params(ctx.cfg);
    const MatchInputs in = load_match_inputs(ctx.cfg);
    for (int c = 1; c <= params.classes; ++c) {
        const auto res =
            multiscale_cycleselect(in.ref, in.test, in.ref_mask, c, params, ctx.cfg.pipeline.match_options());
        const fs::path path = ctx.out / ("sim_c" + std::to_string(c) + ".cstf");
        if (!res) {
            std::cout << "class " << c << ": absent from reference\n";
            continue;
        }
        const auto& a = res->aggregate;
        write_tensor(path, Tensor::make_f32({static_cast<std::size_t>(a.height), static_cast<std::size_t>(a.width)},
                                            a.values));
    }
}

void cmd_prompts(const Context& ctx) {
    const CycleParams params = need_params(ctx.cfg);
    const MatchInputs in = load_match_inputs(ctx.cfg);
    for (int c = 1; c <= params.classes; ++c) {
        const ClassOutcome o =
            prompt_class(in.ref, in.ref_mask, in.test, extent_of(in.test_mask), c, params, ctx.cfg.pipeline);
        write_file_atomic(ctx.out / ("prompts_c" + std::to_string(c) + ".json"), dump_json(prompts_to_json(o.prompts)));
    }
}

TrainView load_train_view(const RunConfig& cfg) {
    const ImageInput& r = need(cfg.reference, "reference");
    const ImageInput& a = need(cfg.train_view, "train_view");
    return {a.id, load_scales(r, cfg.d_match), read_class_mask(r.mask), load_scales(a, cfg.d_match),
            read_class_mask(a.mask)};
}

void cmd_train_warmup(const Context& ctx) {
    const TrainView view = load_train_view(ctx.cfg);
    int classes = ctx.cfg.classes > 0 ? ctx.cfg.classes : view.ref_mask.max_label();
    if (classes < 1) throw ArgumentError("reference mask has no labeled class");
    std::vector<int> d_enc;
    for (const auto& s : view.ref) d_enc.push_back(s.channels);
    CycleParams params = init_params(classes, d_enc, ctx.cfg.d_fpn, ctx.cfg.d_proj, ctx.cfg.seed);
    TrainReport report;
    params = train_warmup({view}, std::move(params), ctx.cfg.warmup, &report);
    save_params(ctx.out / "params.json", params);
    std::string csv = "epoch,loss,sim_loss\n";
    for (std::size_t e = 0; e < report.epoch_loss.size(); ++e)
        csv += std::to_string(e + 1) + "," + format_real(report.epoch_loss[e]) + "," +
               format_real(report.epoch_sim_loss[e]) + "\n";
    write_file_atomic(ctx.out / "warmup_loss.csv", csv);
    if (!report.epoch_loss.empty())
        std::cout << "warmup: loss " << report.epoch_loss.front() << " -> " << report.epoch_loss.back() << "\n";
}

void cmd_train_maskweights(const Context& ctx) {
    CycleParams params = need_params(ctx.cfg);
    if (static_cast<int>(params.thresholds.size()) != params.classes)
        throw ArgumentError("mask-weight training needs fitted thresholds; run train-warmup first");
    const TrainView view = load_train_view(ctx.cfg);
    auto decoder = make_decoder(ctx.cfg, {&*ctx.cfg.train_view});
    MaskTrainReport report;
    params = train_mask_weights({view}, std::move(params), *decoder, ctx.cfg.mask, ctx.cfg.pipeline, &report);
    save_params(ctx.out / "params.json", params);
    std::string csv = "epoch,loss\n";
    for (std::size_t e = 0; e < report.epoch_loss.size(); ++e)
        csv += std::to_string(e + 1) + "," + format_real(report.epoch_loss[e]) + "\n";
    write_file_atomic(ctx.out / "mask_loss.csv", csv);
    std::cout << "mask weights: " << report.samples << " decoded samples\n";
}

void cmd_segment(const Context& ctx) {
    const CycleParams params = need_params(ctx.cfg);
    const MatchInputs in = load_match_inputs(ctx.cfg);
    auto decoder = make_decoder(ctx.cfg, {in.test_input});
    const ImageExtent image = extent_of(in.test_mask);
    const SegmentOutcome seg =
        segment_image(in.ref, in.ref_mask, in.test, image, in.test_input->id, params, *decoder, ctx.cfg.pipeline);
    for (int c = 1; c <= params.classes; ++c) {
        const LogitGrid& g = seg.logits[c - 1];
        write_tensor(ctx.out / ("logits_c" + std::to_string(c) + ".cstf"),
                     Tensor::make_f32({static_cast<std::size_t>(g.height), static_cast<std::size_t>(g.width)},
                                      g.values));
        write_file_atomic(ctx.out / ("prompts_c" + std::to_string(c) + ".json"),
                          dump_json(prompts_to_json(seg.classes[c - 1].prompts)));
    }
    write_tensor(ctx.out / "labels.cstf", to_tensor(seg.labels));
}

void cmd_eval(const Context& ctx) {
    const ImageInput& t = need(ctx.cfg.test, "test");
    const ClassMask gt = read_class_mask(t.mask);
    const ClassMask pred = read_class_mask(ctx.cfg.prediction ? *ctx.cfg.prediction : ctx.out / "labels.cstf");
    const int classes = ctx.cfg.classes > 0 ? ctx.cfg.classes : std::max(gt.max_label(), pred.max_label());
    if (classes < 1) throw ArgumentError("no object class to evaluate");
    const SegResult r = miou_nb(pred, gt, classes);
    write_file_atomic(ctx.out / "eval.json", dump_json(eval_report_json(r)));
    std::cout << "mIoU_nb " << r.miou_nb << " mDice " << r.mdice << " skipped " << r.skipped << "\n";
}

FeatureMap random_unit_map(int channels, int extent, std::mt19937_64& rng) {
    FeatureMap m(channels, extent, extent);
    std::normal_distribution<float> g(0.0f, 1.0f);
    for (auto& v : m.data) v = g(rng);
    return l2_normalize_channels(m);
}

void cmd_bench(const Context& ctx) {
    const BenchConfig& b = ctx.cfg.bench;
    std::mt19937_64 rng(ctx.cfg.seed);
    const FeatureMap ref = random_unit_map(b.d_enc, b.d_match, rng);
    const FeatureRows test = to_rows(random_unit_map(b.d_enc, b.d_match, rng));
    KernelOptions blocked = ctx.cfg.pipeline.kernel;
    blocked.kind = KernelKind::blocked;
    KernelOptions naive = blocked;
    naive.kind = KernelKind::naive;

    using clock = std::chrono::steady_clock;
    auto millis = [](clock::time_point a, clock::time_point z) {
        return std::chrono::duration<double, std::milli>(z - a).count();
    };
    std::string csv = "d_match,d_enc,kernel,millis,max_abs_diff\n";
    auto row = [&](const char* kernel, double ms, double diff) {
        csv += std::to_string(b.d_match) + "," + std::to_string(b.d_enc) + "," + kernel + "," + format_real(ms) + "," +
               format_real(diff) + "\n";
    };

    auto t0 = clock::now();
    const auto best = best_match(test, ref, blocked);
    auto t1 = clock::now();
    const double rematch_ms = millis(t0, t1);
    t0 = clock::now();
    const auto sb = similarity_matrix(test, ref, blocked);
    t1 = clock::now();
    const double blocked_ms = millis(t0, t1);

    if (b.naive) {
        t0 = clock::now();
        const auto sn = similarity_matrix(test, ref, naive);
        t1 = clock::now();
        double diff = 0.0;
        for (std::size_t i = 0; i < sn.size(); ++i) diff = std::max(diff, static_cast<double>(std::abs(sn[i] - sb[i])));
        // Rematch check: the picked column must attain the naive row maximum.
        const std::size_t m = ref.locations();
        double argmax_gap = 0.0;
        for (int i = 0; i < test.rows; ++i) {
            const float* r = sn.data() + static_cast<std::size_t>(i) * m;
            const float top = *std::max_element(r, r + m);
            argmax_gap = std::max(argmax_gap, static_cast<double>(top - r[best[i]]));
        }
        row("naive", millis(t0, t1), 0.0);
        row("blocked", blocked_ms, diff);
        row("rematch", rematch_ms, argmax_gap);
    } else {
        row("blocked", blocked_ms, 0.0);
        row("rematch", rematch_ms, 0.0);
    }
    write_file_atomic(ctx.out / "bench.csv", csv);
    std::cout << csv;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"One-shot segmentation by cycle-consistent feature matching"};
    app.require_subcommand(1, 1);
    fs::path config_path;
    fs::path out = ".";
    Overrides ov;

    struct Command {
        const char* name;
        const char* help;
        void (*run)(const Context&);
        bool needs_config;
    };
    const Command commands[] = {
        {"synth", "generate a synthetic scene", cmd_synth, false},
        {"match", "write aggregated similarity maps per class", cmd_match, true},
        {"prompts", "write point prompts per class", cmd_prompts, true},
        {"train-warmup", "train projections, FPN and scale weights; fit thresholds", cmd_train_warmup, true},
        {"train-maskweights", "train the mask-candidate weights", cmd_train_maskweights, true},
        {"segment", "segment the test image", cmd_segment, true},
        {"eval", "score a predicted label mask", cmd_eval, true},
        {"bench", "time the similarity kernels", cmd_bench, false},
    };
    for (const auto& c : commands) {
        CLI::App* sub = app.add_subcommand(c.name, c.help);
        auto* opt = sub->add_option("--config", config_path, "run configuration (JSON)");
        if (c.needs_config) opt->required();
        sub->add_option("--out", out, "output directory");
        sub->add_option("--seed", ov.seed, "random seed");
        sub->add_option("--params", ov.params, "parameter file (overrides the config)");
        sub->add_option("--k", ov.k, "prompts per polarity")->check(CLI::PositiveNumber);
        sub->add_option("--lambda-scc", ov.lambda_scc, "cycle-consistency penalty")->check(CLI::NonNegativeNumber);
        sub->add_option("--decoder", ov.decoder, "oracle | extern:<command>");
        sub->add_option("--fixed-threshold", ov.fixed_threshold, "replace fitted thresholds");
        sub->add_option("--threads", ov.threads, "kernel threads")->check(CLI::PositiveNumber);
        sub->add_flag("--single-point", ov.single_point, "one positive prompt at the argmax");
        sub->add_flag("--no-negatives", ov.no_negatives, "positive prompts only");
        sub->add_flag("--no-scc", ov.no_scc, "disable the cycle-consistency penalty");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const CLI::App* sub = app.get_subcommands().front();
        const Command* cmd = nullptr;
        for (const auto& c : commands)
            if (sub->get_name() == c.name) cmd = &c;

        Context ctx;
        ctx.cfg = config_path.empty() ? parse_run_config(json::object(), fs::current_path())
                                      : load_run_config(config_path);
        RunConfig& cfg = ctx.cfg;
        if (ov.seed) cfg.seed = *ov.seed;
        if (ov.params) cfg.params = *ov.params;
        if (ov.k) cfg.pipeline.k = *ov.k;
        if (ov.lambda_scc) cfg.pipeline.lambda_scc = cfg.warmup.lambda_scc = *ov.lambda_scc;
        if (ov.decoder) {
            json j = json::object();
            j["decoder"] = *ov.decoder;
            cfg.decoder = parse_run_config(j, ".").decoder;
        }
        if (ov.fixed_threshold) {
            if (!std::isfinite(*ov.fixed_threshold)) throw ConfigError("--fixed-threshold must be finite");
            cfg.pipeline.ablation.fixed_threshold = *ov.fixed_threshold;
        }
        if (ov.threads) cfg.pipeline.kernel.threads = cfg.warmup.kernel.threads = *ov.threads;
        cfg.pipeline.ablation.single_point |= ov.single_point;
        cfg.pipeline.ablation.no_negatives |= ov.no_negatives;
        cfg.pipeline.ablation.no_scc |= ov.no_scc;

        ctx.out = out;
        fs::create_directories(ctx.out);
        cmd->run(ctx);
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericsError& e) {
        std::cerr << "numerics error: " << e.what() << "\n";
        return 3;
    } catch (const BridgeError& e) {
        std::cerr << "decoder error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    }
}
