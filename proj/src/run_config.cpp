#include "cyclematch/run_config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "cyclematch/error.hpp"

namespace cyclematch {

namespace {

using nlohmann::json;

void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, value] : j.items())
        if (!ok.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
T get(const json& j, const char* key, const std::string& where, T fallback) {
    if (!j.contains(key) || j.at(key).is_null()) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key + " has the wrong type");
    }
}

int get_int(const json& j, const char* key, const std::string& where, int fallback, int lo) {
    if (j.contains(key) && !j.at(key).is_null() && !j.at(key).is_number_integer())
        throw ConfigError(where + "." + key + " must be an integer");
    const int v = get<int>(j, key, where, fallback);
    if (v < lo) throw ConfigError(where + "." + key + " must be >= " + std::to_string(lo));
    return v;
}

double get_real(const json& j, const char* key, const std::string& where, double fallback, double lo) {
    if (j.contains(key) && !j.at(key).is_null() && !j.at(key).is_number())
        throw ConfigError(where + "." + key + " must be a number");
    const double v = get<double>(j, key, where, fallback);
    if (!(v >= lo) || !std::isfinite(v)) throw ConfigError(where + "." + key + " must be finite and >= " + std::to_string(lo));
    return v;
}

std::vector<int> get_ints(const json& j, const char* key, const std::string& where, std::vector<int> fallback) {
    if (!j.contains(key)) return fallback;
    const json& a = j.at(key);
    if (!a.is_array() || a.empty()) throw ConfigError(where + "." + key + " must be a nonempty array");
    std::vector<int> out;
    for (const auto& v : a) {
        if (!v.is_number_integer() || v.get<long long>() < 1 || v.get<long long>() > 1 << 20)
            throw ConfigError(where + "." + key + " entries must be positive integers");
        out.push_back(v.get<int>());
    }
    return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const json& v, const std::string& where) {
    if (!v.is_string() || v.get<std::string>().empty()) throw ConfigError(where + " must be a nonempty path string");
    const std::filesystem::path p = v.get<std::string>();
    return p.is_absolute() ? p : base / p;
}

ImageInput parse_image(const json& j, const std::string& where, const std::filesystem::path& base) {
    only_keys(j, where, {"id", "features", "mask"});
    ImageInput in;
    in.id = get<std::string>(j, "id", where, where);
    if (!j.contains("features") || !j.at("features").is_array() || j.at("features").empty())
        throw ConfigError(where + ".features must be a nonempty array of paths");
    for (const auto& f : j.at("features")) in.features.push_back(resolve(base, f, where + ".features"));
    if (!j.contains("mask")) throw ConfigError(where + ".mask is required");
    in.mask = resolve(base, j.at("mask"), where + ".mask");
    return in;
}

}  // namespace

RunConfig parse_run_config(const json& j, const std::filesystem::path& base) {
    only_keys(j, "config",
              {"reference", "train_view", "test", "params", "prediction", "classes", "d_match", "d_fpn", "d_proj", "k",
               "points", "lambda_scc", "lambda_l1", "seed", "decoder", "threads", "block", "ablation", "warmup",
               "mask_training", "synth", "bench"});
    RunConfig c;
    if (j.contains("reference")) c.reference = parse_image(j.at("reference"), "reference", base);
    if (j.contains("train_view")) c.train_view = parse_image(j.at("train_view"), "train_view", base);
    if (j.contains("test")) c.test = parse_image(j.at("test"), "test", base);
    if (j.contains("params")) c.params = resolve(base, j.at("params"), "params");
    if (j.contains("prediction")) c.prediction = resolve(base, j.at("prediction"), "prediction");

    c.classes = get_int(j, "classes", "config", 0, 0);
    if (c.classes > 255) throw ConfigError("config.classes must be <= 255");
    c.d_match = get_ints(j, "d_match", "config", {});
    c.d_fpn = get_int(j, "d_fpn", "config", c.d_fpn, 1);
    c.d_proj = get_int(j, "d_proj", "config", c.d_proj, 1);
    c.lambda_l1 = get_real(j, "lambda_l1", "config", c.lambda_l1, 0.0);
    if (j.contains("seed") && !j.at("seed").is_number_unsigned() && !(j.at("seed").is_number_integer() && j.at("seed").get<long long>() >= 0))
        throw ConfigError("config.seed must be a nonnegative integer");
    c.seed = get<std::uint64_t>(j, "seed", "config", 0);
    c.decoder = get<std::string>(j, "decoder", "config", c.decoder);
    if (c.decoder != "oracle" && (c.decoder.rfind("extern:", 0) != 0 || c.decoder.size() == 7))
        throw ConfigError("config.decoder must be 'oracle' or 'extern:<command>'");

    PipelineOptions& p = c.pipeline;
    p.k = get_int(j, "k", "config", p.k, 1);
    p.points = get_int(j, "points", "config", p.points, 1);
    p.lambda_scc = static_cast<float>(get_real(j, "lambda_scc", "config", p.lambda_scc, 0.0));
    p.kernel.threads = get_int(j, "threads", "config", 1, 1);
    p.kernel.block = get_int(j, "block", "config", p.kernel.block, 1);
    if (j.contains("ablation")) {
        const json& a = j.at("ablation");
        only_keys(a, "ablation", {"single_point", "no_negatives", "no_scc", "fixed_threshold"});
        p.ablation.single_point = get<bool>(a, "single_point", "ablation", false);
        p.ablation.no_negatives = get<bool>(a, "no_negatives", "ablation", false);
        p.ablation.no_scc = get<bool>(a, "no_scc", "ablation", false);
        if (a.contains("fixed_threshold") && !a.at("fixed_threshold").is_null())
            p.ablation.fixed_threshold = static_cast<float>(get_real(a, "fixed_threshold", "ablation", 0.0, -1e30));
    }

    c.warmup.points = p.points;
    c.warmup.lambda_scc = p.lambda_scc;
    c.warmup.lambda_l1 = c.lambda_l1;
    c.warmup.kernel = p.kernel;
    if (j.contains("warmup")) {
        const json& w = j.at("warmup");
        only_keys(w, "warmup", {"epochs", "step"});
        c.warmup.epochs = get_int(w, "epochs", "warmup", c.warmup.epochs, 0);
        c.warmup.step = get_real(w, "step", "warmup", c.warmup.step, 0.0);
    }
    if (j.contains("mask_training")) {
        const json& m = j.at("mask_training");
        only_keys(m, "mask_training", {"epochs", "step"});
        c.mask.epochs = get_int(m, "epochs", "mask_training", c.mask.epochs, 0);
        c.mask.step = get_real(m, "step", "mask_training", c.mask.step, 0.0);
    }
    if (j.contains("synth")) {
        const json& s = j.at("synth");
        only_keys(s, "synth",
                  {"classes", "extent", "scales", "channels", "noise", "distractor_level", "distractor_offset",
                   "blob_fraction"});
        SynthConfig& y = c.synth;
        y.classes = get_int(s, "classes", "synth", y.classes, 1);
        y.extent = get_int(s, "extent", "synth", y.extent, 1);
        y.scales = get_ints(s, "scales", "synth", y.scales);
        y.channels = get_ints(s, "channels", "synth", y.channels);
        if (y.scales.size() != y.channels.size()) throw ConfigError("synth.scales and synth.channels differ in length");
        y.noise = static_cast<float>(get_real(s, "noise", "synth", y.noise, 0.0));
        y.distractor_level = static_cast<float>(get_real(s, "distractor_level", "synth", y.distractor_level, 0.0));
        if (y.distractor_level > 1.0f) throw ConfigError("synth.distractor_level must be <= 1");
        y.distractor_offset = static_cast<float>(get_real(s, "distractor_offset", "synth", y.distractor_offset, 0.0));
        y.blob_fraction = static_cast<float>(get_real(s, "blob_fraction", "synth", y.blob_fraction, 0.0));
        if (y.blob_fraction > 1.0f) throw ConfigError("synth.blob_fraction must be <= 1");
    }
    if (j.contains("bench")) {
        const json& b = j.at("bench");
        only_keys(b, "bench", {"d_match", "d_enc", "naive"});
        c.bench.d_match = get_int(b, "d_match", "bench", c.bench.d_match, 1);
        c.bench.d_enc = get_int(b, "d_enc", "bench", c.bench.d_enc, 1);
        c.bench.naive = get<bool>(b, "naive", "bench", c.bench.naive);
    }
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_run_config(j, path.parent_path());
}

json synth_run_config(const SynthConfig& cfg, std::uint64_t seed) {
    auto image = [&](const std::string& name) {
        json features = json::array();
        for (std::size_t s = 0; s < cfg.scales.size(); ++s)
            features.push_back(name + "_s" + std::to_string(s + 1) + ".cstf");
        return json{{"id", name}, {"features", features}, {"mask", name + "_mask.cstf"}};
    };
    return json{{"reference", image("ref")},
                {"train_view", image("aug")},
                {"test", image("test")},
                {"classes", cfg.classes},
                {"d_match", cfg.scales},
                {"seed", seed},
                {"synth",
                 {{"classes", cfg.classes},
                  {"extent", cfg.extent},
                  {"scales", cfg.scales},
                  {"channels", cfg.channels},
                  {"noise", cfg.noise},
                  {"distractor_level", cfg.distractor_level},
                  {"distractor_offset", cfg.distractor_offset},
                  {"blob_fraction", cfg.blob_fraction}}}};
}

}  // namespace cyclematch
