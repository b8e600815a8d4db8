#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace cyclematch {

enum class DType : std::uint8_t { f32 = 1, u8 = 2 };

/// Generic n-d container (1 to 4 axes) mirroring the CSTF-1 file layout.
struct Tensor {
    std::vector<std::size_t> dims;
    std::variant<std::vector<float>, std::vector<std::uint8_t>> data;

    DType dtype() const { return data.index() == 0 ? DType::f32 : DType::u8; }
    std::size_t element_count() const;

    const std::vector<float>& f32() const { return std::get<0>(data); }
    const std::vector<std::uint8_t>& u8() const { return std::get<1>(data); }

    static Tensor make_f32(std::vector<std::size_t> dims, std::vector<float> values);
    static Tensor make_u8(std::vector<std::size_t> dims, std::vector<std::uint8_t> values);

    bool operator==(const Tensor&) const = default;
};

/// channels x height x width, channel-major (same order as the file payload).
struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;

    FeatureMap() = default;
    FeatureMap(int c, int h, int w, float fill = 0.0f);

    std::size_t locations() const { return static_cast<std::size_t>(height) * width; }
    float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    /// Channel plane c as a contiguous span of height*width values.
    std::span<const float> plane(int c) const { return {data.data() + static_cast<std::size_t>(c) * locations(), locations()}; }

    bool operator==(const FeatureMap&) const = default;
};

/// Per-pixel class labels; 0 is background, 1..C are object classes.
struct ClassMask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> labels;

    ClassMask() = default;
    ClassMask(int h, int w, std::uint8_t fill = 0);

    std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t max_label() const;

    bool operator==(const ClassMask&) const = default;
};

/// Single-channel real grid (mask logits, similarity planes).
struct LogitGrid {
    int height = 0;
    int width = 0;
    std::vector<float> values;

    LogitGrid() = default;
    LogitGrid(int h, int w, float fill = 0.0f) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

    bool operator==(const LogitGrid&) const = default;
};

// CSTF-1 container: "CSTF" + version 0x01, u8 ndim, ndim x u32 LE extents,
// u8 dtype code, row-major payload. No padding, no footer.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);
Tensor read_tensor(const std::filesystem::path& path);
void write_tensor(const std::filesystem::path& path, const Tensor& t);

Tensor to_tensor(const FeatureMap& m);
Tensor to_tensor(const ClassMask& m);
FeatureMap to_feature_map(const Tensor& t);
ClassMask to_class_mask(const Tensor& t);

FeatureMap read_feature_map(const std::filesystem::path& path);
ClassMask read_class_mask(const std::filesystem::path& path);

/// One output coordinate of a half-pixel-center linear resampler.
struct InterpTap {
    int lo = 0;
    int hi = 0;
    double weight_hi = 0.0;  ///< weight of `hi`; `lo` gets 1 - weight_hi
};

/// Taps for resampling an axis of `in_extent` cells to `out_extent` cells.
std::vector<InterpTap> bilinear_taps(int in_extent, int out_extent);

/// Bilinear resize with half-pixel centers and edge clamping, per channel.
FeatureMap resize_bilinear(const FeatureMap& t, int out_h, int out_w);
/// Single-channel convenience overload for similarity grids.
std::vector<float> resize_bilinear(std::span<const float> grid, int h, int w, int out_h, int out_w);

/// Nearest-neighbour resize with half-pixel centers; exact ties go to the smaller source index.
ClassMask resize_nearest(const ClassMask& m, int out_h, int out_w);

/// Source index picked by resize_nearest for output index i.
int nearest_source_index(int i, int in_extent, int out_extent);

/// Unit-normalizes every location's channel vector; vectors with norm < eps become zero.
FeatureMap l2_normalize_channels(const FeatureMap& t, float eps = 1e-8f);

/// Writes bytes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace cyclematch
