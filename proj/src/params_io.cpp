#include "cyclematch/params_io.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "cyclematch/error.hpp"

namespace cyclematch {

using nlohmann::json;

namespace {

void require_keys(const json& j, const std::set<std::string>& allowed, const std::set<std::string>& required,
                  const std::string& where) {
    if (!j.is_object()) throw FormatError(where + ": expected an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw FormatError(where + ": unknown key '" + k + "'");
    for (const auto& k : required)
        if (!j.contains(k)) throw FormatError(where + ": missing key '" + k + "'");
}

void expect_shape(const Matrix& m, int rows, int cols, const std::string& what) {
    if (m.rows != rows || m.cols != cols)
        throw FormatError(what + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) + ", got " +
                          std::to_string(m.rows) + "x" + std::to_string(m.cols));
}

}  // namespace

json matrix_to_json(const Matrix& m) {
    return json{{"dims", {m.rows, m.cols}}, {"data", m.data}};
}

Matrix matrix_from_json(const json& j) {
    require_keys(j, {"dims", "data"}, {"dims", "data"}, "matrix");
    try {
        const auto dims = j.at("dims").get<std::vector<int>>();
        if (dims.size() != 2 || dims[0] < 1 || dims[1] < 1) throw FormatError("matrix: dims must be [rows, cols]");
        Matrix m(dims[0], dims[1]);
        const auto& data = j.at("data");
        if (!data.is_array() || data.size() != m.data.size()) throw FormatError("matrix: data length mismatch");
        for (std::size_t i = 0; i < m.data.size(); ++i) {
            m.data[i] = data[i].get<float>();
            if (!std::isfinite(m.data[i])) throw FormatError("matrix: non-finite entry");
        }
        return m;
    } catch (const json::exception& e) {
        throw FormatError(std::string("matrix: ") + e.what());
    }
}

json params_to_json(const CycleParams& p) {
    json j;
    j["format"] = "cyclematch-params";
    j["version"] = 1;
    j["classes"] = p.classes;
    j["d_enc"] = p.d_enc;
    j["d_fpn"] = p.d_fpn;
    j["d_proj"] = p.d_proj;
    j["fpn"] = json::array();
    for (const auto& m : p.fpn.lateral) j["fpn"].push_back(matrix_to_json(m));
    json proj = json::object();
    for (int c = 1; c <= p.classes; ++c) {
        json per_scale = json::object();
        for (int s = 0; s < p.scales(); ++s) {
            const auto& pair = p.projector(c, s);
            per_scale[std::to_string(s + 1)] = {{"W_feat_map", matrix_to_json(pair.feat_map)},
                                                {"W_feat", matrix_to_json(pair.feat)}};
        }
        proj[std::to_string(c)] = per_scale;
    }
    j["projectors"] = proj;
    j["w_scale"] = matrix_to_json(p.w_scale);
    j["w_mask"] = matrix_to_json(p.w_mask);
    j["thresholds"] = p.thresholds.empty() ? json(nullptr) : json(p.thresholds);
    return j;
}

CycleParams params_from_json(const json& j) {
    require_keys(j, {"format", "version", "classes", "d_enc", "d_fpn", "d_proj", "fpn", "projectors", "w_scale",
                     "w_mask", "thresholds"},
                 {"classes", "d_enc", "d_fpn", "d_proj", "fpn", "projectors", "w_scale", "w_mask"}, "params");
    try {
        if (j.contains("format") && j["format"] != "cyclematch-params") throw FormatError("params: wrong format tag");
        if (j.contains("version") && j["version"] != 1) throw FormatError("params: unsupported version");
        CycleParams p;
        p.classes = j.at("classes").get<int>();
        p.d_enc = j.at("d_enc").get<std::vector<int>>();
        p.d_fpn = j.at("d_fpn").get<int>();
        p.d_proj = j.at("d_proj").get<int>();
        if (p.classes < 1 || p.d_enc.empty() || p.d_fpn < 1 || p.d_proj < 1)
            throw FormatError("params: classes/scales/dims must be >= 1");
        const int scales = p.scales();

        const auto& fpn = j.at("fpn");
        if (!fpn.is_array() || static_cast<int>(fpn.size()) != scales)
            throw FormatError("params: fpn needs one matrix per scale");
        for (int s = 0; s < scales; ++s) {
            p.fpn.lateral.push_back(matrix_from_json(fpn[s]));
            expect_shape(p.fpn.lateral.back(), p.d_fpn, p.d_enc[s], "fpn lateral " + std::to_string(s + 1));
        }

        const auto& proj = j.at("projectors");
        if (!proj.is_object() || static_cast<int>(proj.size()) != p.classes)
            throw FormatError("params: projectors need one entry per class");
        p.projectors.resize(static_cast<std::size_t>(p.classes));
        for (int c = 1; c <= p.classes; ++c) {
            const auto& per_scale = proj.at(std::to_string(c));
            if (!per_scale.is_object() || static_cast<int>(per_scale.size()) != scales)
                throw FormatError("params: class " + std::to_string(c) + " needs one projector pair per scale");
            for (int s = 0; s < scales; ++s) {
                const auto& pj = per_scale.at(std::to_string(s + 1));
                require_keys(pj, {"W_feat_map", "W_feat"}, {"W_feat_map", "W_feat"}, "projector");
                ProjectorPair pair{matrix_from_json(pj["W_feat_map"]), matrix_from_json(pj["W_feat"])};
                expect_shape(pair.feat_map, p.d_proj, p.d_fpn, "W_feat_map");
                expect_shape(pair.feat, p.d_proj, p.d_fpn, "W_feat");
                p.projectors[c - 1].push_back(std::move(pair));
            }
        }

        p.w_scale = matrix_from_json(j.at("w_scale"));
        expect_shape(p.w_scale, p.classes, scales, "w_scale");
        p.w_mask = matrix_from_json(j.at("w_mask"));
        expect_shape(p.w_mask, p.classes, 3, "w_mask");
        if (j.contains("thresholds") && !j["thresholds"].is_null()) {
            p.thresholds = j["thresholds"].get<std::vector<float>>();
            if (static_cast<int>(p.thresholds.size()) != p.classes)
                throw FormatError("params: thresholds need one value per class");
        }
        return p;
    } catch (const json::exception& e) {
        throw FormatError(std::string("params: ") + e.what());
    }
}

CycleParams load_params(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open params file " + path.string());
    try {
        return params_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save_params(const std::filesystem::path& path, const CycleParams& p) {
    write_file_atomic(path, dump_json(params_to_json(p)));
}

std::string dump_json(const json& j) {
    return j.dump(1) + "\n";
}

}  // namespace cyclematch
