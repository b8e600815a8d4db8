#pragma once

#include <vector>

#include "cyclematch/tensor.hpp"

namespace cyclematch {

/// Location-major feature matrix: `rows` vectors of `channels` values each.
struct FeatureRows {
    int rows = 0;
    int channels = 0;
    std::vector<float> data;

    FeatureRows() = default;
    FeatureRows(int r, int c) : rows(r), channels(c), data(static_cast<std::size_t>(r) * c, 0.0f) {}

    const float* row(int i) const { return data.data() + static_cast<std::size_t>(i) * channels; }
    float* row(int i) { return data.data() + static_cast<std::size_t>(i) * channels; }

    bool operator==(const FeatureRows&) const = default;
};

FeatureRows to_rows(const FeatureMap& m);

enum class KernelKind { naive, blocked };

struct KernelOptions {
    KernelKind kind = KernelKind::blocked;
    int block = 64;   ///< tile edge for the blocked kernel
    int threads = 1;  ///< worker threads; output does not depend on this
};

// Both kernels accumulate every dot product over channels in ascending
// order starting from zero, so their outputs are bitwise identical.

/// Dense dot products: out[i * locations + j] = rows[i] . cols[:, j].
std::vector<float> similarity_matrix(const FeatureRows& rows, const FeatureMap& cols,
                                     const KernelOptions& opts = {});

/// For every row, the column index with the largest dot product (ties -> smaller index).
std::vector<int> best_match(const FeatureRows& rows, const FeatureMap& cols, const KernelOptions& opts = {});

}  // namespace cyclematch
