#include "cyclematch/metrics.hpp"

#include <cmath>
#include <limits>

#include "cyclematch/error.hpp"

namespace cyclematch {

ClassMask assemble_semantic(const std::vector<LogitGrid>& per_class, const std::vector<float>& scores) {
    if (per_class.empty()) throw ArgumentError("assemble_semantic: no classes");
    if (scores.size() != per_class.size()) throw ArgumentError("assemble_semantic: one score per class required");
    const int h = per_class[0].height;
    const int w = per_class[0].width;
    for (const auto& g : per_class)
        if (g.height != h || g.width != w) throw ArgumentError("assemble_semantic: grids differ in shape");

    ClassMask out(h, w);
    for (std::size_t p = 0; p < out.labels.size(); ++p) {
        int best = -1;
        for (int c = 0; c < static_cast<int>(per_class.size()); ++c) {
            const float v = per_class[c].values[p];
            if (!(v > 0.0f)) continue;
            if (best < 0) {
                best = c;
                continue;
            }
            const float bv = per_class[best].values[p];
            if (v > bv || (v == bv && scores[c] > scores[best])) best = c;
        }
        out.labels[p] = static_cast<std::uint8_t>(best + 1);
    }
    return out;
}

SegResult miou_nb(const ClassMask& pred, const ClassMask& gt, int classes) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw ArgumentError("miou_nb: prediction and ground truth differ in shape");
    if (classes < 1 || classes > 255) throw ArgumentError("miou_nb: class count must be 1..255");

    SegResult r;
    r.per_class.resize(static_cast<std::size_t>(classes));
    for (int c = 1; c <= classes; ++c) r.per_class[c - 1].class_id = c;
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        const int a = pred.labels[i];
        const int b = gt.labels[i];
        if (a > classes || b > classes) throw ArgumentError("miou_nb: label exceeds class count");
        if (a) ++r.per_class[a - 1].predicted;
        if (b) ++r.per_class[b - 1].ground_truth;
        if (a && a == b) ++r.per_class[a - 1].intersection;
    }

    double iou_sum = 0.0, dice_sum = 0.0;
    int scored = 0;
    for (auto& s : r.per_class) {
        s.union_count = s.predicted + s.ground_truth - s.intersection;
        if (s.union_count == 0) {
            s.skipped = true;
            ++r.skipped;
            continue;
        }
        s.iou = static_cast<double>(s.intersection) / static_cast<double>(s.union_count);
        s.dice = 2.0 * static_cast<double>(s.intersection) / static_cast<double>(s.predicted + s.ground_truth);
        iou_sum += s.iou;
        dice_sum += s.dice;
        ++scored;
    }
    if (scored == 0) {
        r.miou_nb = r.mdice = std::numeric_limits<double>::quiet_NaN();
    } else {
        r.miou_nb = iou_sum / scored;
        r.mdice = dice_sum / scored;
    }
    return r;
}

nlohmann::json eval_report_json(const SegResult& r) {
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& s : r.per_class) {
        classes.push_back({{"class", s.class_id},
                           {"skipped", s.skipped},
                           {"iou", s.skipped ? nlohmann::json(nullptr) : nlohmann::json(s.iou)},
                           {"dice", s.skipped ? nlohmann::json(nullptr) : nlohmann::json(s.dice)},
                           {"intersection", s.intersection},
                           {"union", s.union_count},
                           {"predicted", s.predicted},
                           {"ground_truth", s.ground_truth}});
    }
    return {{"miou_nb", num(r.miou_nb)}, {"mdice", num(r.mdice)}, {"skipped_classes", r.skipped},
            {"classes", classes}};
}

}  // namespace cyclematch
