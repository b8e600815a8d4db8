#include "cyclematch/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "cyclematch/error.hpp"

namespace cyclematch {

namespace {

constexpr std::uint8_t kMagic[5] = {0x43, 0x53, 0x54, 0x46, 0x01};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
    return v;
}

std::size_t product(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

void check_dims(const std::vector<std::size_t>& dims) {
    if (dims.empty() || dims.size() > 4) throw ArgumentError("tensor must have 1 to 4 axes");
    for (auto d : dims) {
        if (d == 0) throw ArgumentError("tensor extents must be >= 1");
        if (d > 0xFFFFFFFFull) throw ArgumentError("tensor extent exceeds u32");
    }
}

void check_extent(int h, int w) {
    if (h < 1 || w < 1) throw ArgumentError("resize target extent must be >= 1");
}

}  // namespace

std::size_t Tensor::element_count() const {
    return std::visit([](const auto& v) { return v.size(); }, data);
}

Tensor Tensor::make_f32(std::vector<std::size_t> dims, std::vector<float> values) {
    check_dims(dims);
    if (product(dims) != values.size()) throw ArgumentError("tensor payload does not match dims");
    return Tensor{std::move(dims), std::move(values)};
}

Tensor Tensor::make_u8(std::vector<std::size_t> dims, std::vector<std::uint8_t> values) {
    check_dims(dims);
    if (product(dims) != values.size()) throw ArgumentError("tensor payload does not match dims");
    return Tensor{std::move(dims), std::move(values)};
}

FeatureMap::FeatureMap(int c, int h, int w, float fill)
    : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

ClassMask::ClassMask(int h, int w, std::uint8_t fill)
    : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

std::uint8_t ClassMask::max_label() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    check_dims(t.dims);
    if (product(t.dims) != t.element_count()) throw ArgumentError("tensor payload does not match dims");

    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    out.push_back(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) put_u32(out, static_cast<std::uint32_t>(d));
    out.push_back(static_cast<std::uint8_t>(t.dtype()));
    if (t.dtype() == DType::f32) {
        out.reserve(out.size() + 4 * t.element_count());
        for (float v : t.f32()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    } else {
        out.insert(out.end(), t.u8().begin(), t.u8().end());
    }
    return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 6 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
        throw FormatError("not a CSTF-1 tensor (bad magic)");
    const std::size_t ndim = bytes[5];
    if (ndim < 1 || ndim > 4) throw FormatError("CSTF-1: ndim must be 1..4");
    std::size_t at = 6;
    if (bytes.size() < at + 4 * ndim + 1) throw FormatError("CSTF-1: truncated header");

    std::vector<std::size_t> dims(ndim);
    for (auto& d : dims) {
        d = get_u32(bytes, at);
        at += 4;
        if (d == 0) throw FormatError("CSTF-1: zero extent");
    }
    const std::uint8_t code = bytes[at++];
    if (code != 1 && code != 2) throw FormatError("CSTF-1: unknown dtype code " + std::to_string(code));

    const std::size_t count = product(dims);
    const std::size_t width = code == 1 ? 4 : 1;
    const std::size_t remaining = bytes.size() - at;
    if (remaining < count * width) throw FormatError("CSTF-1: truncated payload");
    if (remaining > count * width) throw FormatError("CSTF-1: trailing bytes after payload");

    if (code == 2) {
        return Tensor{std::move(dims), std::vector<std::uint8_t>(bytes.begin() + at, bytes.end())};
    }
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        values[i] = std::bit_cast<float>(get_u32(bytes, at + 4 * i));
        if (!std::isfinite(values[i])) throw FormatError("CSTF-1: non-finite f32 value");
    }
    return Tensor{std::move(dims), std::move(values)};
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open tensor file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_tensor(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    write_file_atomic(path, encode_tensor(t));
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Tensor to_tensor(const FeatureMap& m) {
    return Tensor::make_f32({std::size_t(m.channels), std::size_t(m.height), std::size_t(m.width)}, m.data);
}

Tensor to_tensor(const ClassMask& m) {
    return Tensor::make_u8({std::size_t(m.height), std::size_t(m.width)}, m.labels);
}

FeatureMap to_feature_map(const Tensor& t) {
    if (t.dtype() != DType::f32) throw FormatError("feature map must be f32");
    FeatureMap m;
    switch (t.dims.size()) {
        case 2:  // single-channel H x W
            m.channels = 1;
            m.height = static_cast<int>(t.dims[0]);
            m.width = static_cast<int>(t.dims[1]);
            break;
        case 3:
            m.channels = static_cast<int>(t.dims[0]);
            m.height = static_cast<int>(t.dims[1]);
            m.width = static_cast<int>(t.dims[2]);
            break;
        default:
            throw FormatError("feature map must be C x H x W");
    }
    m.data = t.f32();
    return m;
}

ClassMask to_class_mask(const Tensor& t) {
    if (t.dtype() != DType::u8 || t.dims.size() != 2) throw FormatError("class mask must be a u8 H x W tensor");
    ClassMask m;
    m.height = static_cast<int>(t.dims[0]);
    m.width = static_cast<int>(t.dims[1]);
    m.labels = t.u8();
    return m;
}

FeatureMap read_feature_map(const std::filesystem::path& path) {
    try {
        return to_feature_map(read_tensor(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

ClassMask read_class_mask(const std::filesystem::path& path) {
    try {
        return to_class_mask(read_tensor(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

std::vector<InterpTap> bilinear_taps(int in_extent, int out_extent) {
    check_extent(in_extent, out_extent);
    std::vector<InterpTap> taps(static_cast<std::size_t>(out_extent));
    const double scale = static_cast<double>(in_extent) / out_extent;
    for (int i = 0; i < out_extent; ++i) {
        double src = (i + 0.5) * scale - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in_extent - 1));
        const int lo = static_cast<int>(std::floor(src));
        taps[i].lo = lo;
        taps[i].hi = std::min(lo + 1, in_extent - 1);
        taps[i].weight_hi = src - lo;
    }
    return taps;
}

std::vector<float> resize_bilinear(std::span<const float> grid, int h, int w, int out_h, int out_w) {
    check_extent(out_h, out_w);
    if (h < 1 || w < 1 || grid.size() != static_cast<std::size_t>(h) * w)
        throw ArgumentError("resize_bilinear: grid does not match its extent");
    if (h == out_h && w == out_w) return {grid.begin(), grid.end()};

    const auto ty = bilinear_taps(h, out_h);
    const auto tx = bilinear_taps(w, out_w);
    std::vector<float> out(static_cast<std::size_t>(out_h) * out_w);
    for (int y = 0; y < out_h; ++y) {
        const float* r0 = grid.data() + static_cast<std::size_t>(ty[y].lo) * w;
        const float* r1 = grid.data() + static_cast<std::size_t>(ty[y].hi) * w;
        const auto wy = static_cast<float>(ty[y].weight_hi);
        for (int x = 0; x < out_w; ++x) {
            const auto wx = static_cast<float>(tx[x].weight_hi);
            // lerp form keeps constant inputs exact
            const float top = r0[tx[x].lo] + wx * (r0[tx[x].hi] - r0[tx[x].lo]);
            const float bot = r1[tx[x].lo] + wx * (r1[tx[x].hi] - r1[tx[x].lo]);
            out[static_cast<std::size_t>(y) * out_w + x] = top + wy * (bot - top);
        }
    }
    return out;
}

FeatureMap resize_bilinear(const FeatureMap& t, int out_h, int out_w) {
    check_extent(out_h, out_w);
    if (t.height == out_h && t.width == out_w) return t;
    FeatureMap out(t.channels, out_h, out_w);
    const std::size_t plane = static_cast<std::size_t>(out_h) * out_w;
    for (int c = 0; c < t.channels; ++c) {
        auto r = resize_bilinear(t.plane(c), t.height, t.width, out_h, out_w);
        std::copy(r.begin(), r.end(), out.data.begin() + static_cast<std::ptrdiff_t>(c * plane));
    }
    return out;
}

int nearest_source_index(int i, int in_extent, int out_extent) {
    // nearest integer to (i + 0.5) * in / out - 0.5, exact halves rounded down
    const long long num = (2LL * i + 1) * in_extent - 2LL * out_extent;
    const long long den = 2LL * out_extent;
    long long idx = num <= 0 ? 0 : (num + den - 1) / den;
    return static_cast<int>(std::min<long long>(idx, in_extent - 1));
}

ClassMask resize_nearest(const ClassMask& m, int out_h, int out_w) {
    check_extent(out_h, out_w);
    if (m.height < 1 || m.width < 1) throw ArgumentError("resize_nearest: empty mask");
    if (m.height == out_h && m.width == out_w) return m;
    ClassMask out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        const int sy = nearest_source_index(y, m.height, out_h);
        for (int x = 0; x < out_w; ++x) out.at(y, x) = m.at(sy, nearest_source_index(x, m.width, out_w));
    }
    return out;
}

FeatureMap l2_normalize_channels(const FeatureMap& t, float eps) {
    FeatureMap out(t.channels, t.height, t.width);
    const std::size_t n = t.locations();
    for (std::size_t p = 0; p < n; ++p) {
        double sq = 0.0;
        for (int c = 0; c < t.channels; ++c) {
            const double v = t.data[c * n + p];
            sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm < eps) continue;
        for (int c = 0; c < t.channels; ++c) out.data[c * n + p] = static_cast<float>(t.data[c * n + p] / norm);
    }
    return out;
}

}  // namespace cyclematch
