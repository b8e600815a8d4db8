#include "cyclematch/kernels.hpp"

#include <algorithm>
#include <thread>

#include "cyclematch/error.hpp"

namespace cyclematch {

namespace {

void check_shapes(const FeatureRows& rows, const FeatureMap& cols) {
    if (rows.channels != cols.channels)
        throw ArgumentError("similarity kernel: channel mismatch (" + std::to_string(rows.channels) + " vs " +
                            std::to_string(cols.channels) + ")");
}

// Runs body(block_index) for every block, striding blocks over threads.
template <class Body>
void for_each_block(int blocks, int threads, Body body) {
    threads = std::clamp(threads, 1, std::max(1, blocks));
    if (threads == 1) {
        for (int b = 0; b < blocks; ++b) body(b);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([=] {
            for (int b = t; b < blocks; b += threads) body(b);
        });
    }
}

// Textbook i-k-j product, one output row at a time.
void naive_rows(const FeatureRows& rows, const FeatureMap& cols, int i0, int i1, float* out) {
    const std::size_t m = cols.locations();
    for (int i = i0; i < i1; ++i) {
        float* o = out + static_cast<std::size_t>(i - i0) * m;
        std::fill(o, o + m, 0.0f);
        const float* a = rows.row(i);
        for (int k = 0; k < rows.channels; ++k) {
            const float aik = a[k];
            const float* b = cols.data.data() + static_cast<std::size_t>(k) * m;
            for (std::size_t j = 0; j < m; ++j) o[j] = o[j] + aik * b[j];
        }
    }
}

// Fills tile[(i - i0) * bj + (j - j0)] for rows [i0, i1) and columns [j0, j1).
void blocked_tile(const FeatureRows& rows, const FeatureMap& cols, int i0, int i1, std::size_t j0, std::size_t j1,
                  float* tile) {
    const std::size_t m = cols.locations();
    const std::size_t bj = j1 - j0;
    std::fill(tile, tile + static_cast<std::size_t>(i1 - i0) * bj, 0.0f);
    for (int k = 0; k < rows.channels; ++k) {
        const float* b = cols.data.data() + static_cast<std::size_t>(k) * m + j0;
        for (int i = i0; i < i1; ++i) {
            const float aik = rows.row(i)[k];
            float* t = tile + static_cast<std::size_t>(i - i0) * bj;
            for (std::size_t j = 0; j < bj; ++j) t[j] = t[j] + aik * b[j];
        }
    }
}

}  // namespace

FeatureRows to_rows(const FeatureMap& m) {
    FeatureRows r(static_cast<int>(m.locations()), m.channels);
    const std::size_t n = m.locations();
    for (std::size_t p = 0; p < n; ++p)
        for (int c = 0; c < m.channels; ++c) r.data[p * m.channels + c] = m.data[c * n + p];
    return r;
}

std::vector<float> similarity_matrix(const FeatureRows& rows, const FeatureMap& cols, const KernelOptions& opts) {
    check_shapes(rows, cols);
    const std::size_t m = cols.locations();
    std::vector<float> out(static_cast<std::size_t>(rows.rows) * m);
    const int bi = std::max(1, opts.block);
    const int blocks = (rows.rows + bi - 1) / bi;

    if (opts.kind == KernelKind::naive) {
        for_each_block(blocks, opts.threads, [&](int b) {
            const int i0 = b * bi;
            naive_rows(rows, cols, i0, std::min(rows.rows, i0 + bi), out.data() + static_cast<std::size_t>(i0) * m);
        });
        return out;
    }

    const std::size_t bj = static_cast<std::size_t>(bi);
    for_each_block(blocks, opts.threads, [&](int b) {
        const int i0 = b * bi;
        const int i1 = std::min(rows.rows, i0 + bi);
        std::vector<float> tile(static_cast<std::size_t>(bi) * bj);
        for (std::size_t j0 = 0; j0 < m; j0 += bj) {
            const std::size_t j1 = std::min(m, j0 + bj);
            blocked_tile(rows, cols, i0, i1, j0, j1, tile.data());
            for (int i = i0; i < i1; ++i) {
                const float* t = tile.data() + static_cast<std::size_t>(i - i0) * (j1 - j0);
                std::copy(t, t + (j1 - j0), out.begin() + static_cast<std::ptrdiff_t>(i * m + j0));
            }
        }
    });
    return out;
}

std::vector<int> best_match(const FeatureRows& rows, const FeatureMap& cols, const KernelOptions& opts) {
    check_shapes(rows, cols);
    const std::size_t m = cols.locations();
    std::vector<int> best(static_cast<std::size_t>(rows.rows), 0);
    if (m == 0) return best;
    const int bi = std::max(1, opts.block);
    const int blocks = (rows.rows + bi - 1) / bi;

    if (opts.kind == KernelKind::naive) {
        for_each_block(blocks, opts.threads, [&](int b) {
            const int i0 = b * bi;
            const int i1 = std::min(rows.rows, i0 + bi);
            std::vector<float> buf(static_cast<std::size_t>(i1 - i0) * m);
            naive_rows(rows, cols, i0, i1, buf.data());
            for (int i = i0; i < i1; ++i) {
                const float* o = buf.data() + static_cast<std::size_t>(i - i0) * m;
                best[i] = static_cast<int>(std::max_element(o, o + m) - o);
            }
        });
        return best;
    }

    const std::size_t bj = static_cast<std::size_t>(bi);
    for_each_block(blocks, opts.threads, [&](int b) {
        const int i0 = b * bi;
        const int i1 = std::min(rows.rows, i0 + bi);
        std::vector<float> tile(static_cast<std::size_t>(bi) * bj);
        std::vector<float> best_val(static_cast<std::size_t>(i1 - i0));
        for (std::size_t j0 = 0; j0 < m; j0 += bj) {
            const std::size_t j1 = std::min(m, j0 + bj);
            blocked_tile(rows, cols, i0, i1, j0, j1, tile.data());
            for (int i = i0; i < i1; ++i) {
                const float* t = tile.data() + static_cast<std::size_t>(i - i0) * (j1 - j0);
                float& bv = best_val[i - i0];
                for (std::size_t j = 0; j < j1 - j0; ++j) {
                    if ((j0 == 0 && j == 0) || t[j] > bv) {
                        bv = t[j];
                        best[i] = static_cast<int>(j0 + j);
                    }
                }
            }
        }
    });
    return best;
}

}  // namespace cyclematch
