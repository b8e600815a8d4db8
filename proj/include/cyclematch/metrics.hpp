#pragma once

#include <cstddef>
#include <vector>

#include "cyclematch/tensor.hpp"
#include "json.hpp"

namespace cyclematch {

struct ClassScore {
    int class_id = 0;
    std::size_t intersection = 0;
    std::size_t union_count = 0;
    std::size_t predicted = 0;
    std::size_t ground_truth = 0;
    double iou = 0.0;
    double dice = 0.0;
    bool skipped = false;  ///< absent from both prediction and ground truth
};

struct SegResult {
    std::vector<ClassScore> per_class;  ///< classes 1..C
    double miou_nb = 0.0;               ///< NaN when every class was skipped
    double mdice = 0.0;
    int skipped = 0;
};

/// Per-pixel label: the class with the largest positive logit; ties go to the
/// higher class score, then the smaller class id. No positive logit -> 0.
/// per_class[c - 1] and scores[c - 1] belong to class c.
ClassMask assemble_semantic(const std::vector<LogitGrid>& per_class, const std::vector<float>& scores);

/// IoU and Dice for classes 1..C, background excluded.
SegResult miou_nb(const ClassMask& pred, const ClassMask& gt, int classes);

nlohmann::json eval_report_json(const SegResult& r);

}  // namespace cyclematch
