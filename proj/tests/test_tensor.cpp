#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "cyclematch/error.hpp"
#include "cyclematch/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace cyclematch;

namespace {

std::vector<std::uint8_t> header(std::uint8_t ndim, std::vector<std::uint32_t> dims, std::uint8_t dtype) {
    std::vector<std::uint8_t> b = {0x43, 0x53, 0x54, 0x46, 0x01, ndim};
    for (auto d : dims)
        for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(d >> (8 * i)));
    b.push_back(dtype);
    return b;
}

}  // namespace

TEST_CASE("CSTF-1 layout of a small f32 tensor") {
    const Tensor t = Tensor::make_f32({2, 3}, std::vector<float>(6, 0.0f));
    const auto bytes = encode_tensor(t);
    auto expect = header(2, {2, 3}, 1);
    expect.resize(expect.size() + 24, 0);
    CHECK(bytes == expect);

    const Tensor one = Tensor::make_f32({1}, {1.0f});
    const auto b1 = encode_tensor(one);
    REQUIRE(b1.size() == 15);
    // 1.0f little-endian
    CHECK(b1[11] == 0x00);
    CHECK(b1[12] == 0x00);
    CHECK(b1[13] == 0x80);
    CHECK(b1[14] == 0x3f);
}

TEST_CASE("write then read round-trips") {
    TempDir dir;
    const Tensor zeros = Tensor::make_f32({2, 3}, std::vector<float>(6, 0.0f));
    write_tensor(dir / "z.cstf", zeros);
    CHECK(read_tensor(dir / "z.cstf") == zeros);

    const Tensor seven = Tensor::make_u8({1}, {7});
    write_tensor(dir / "u.cstf", seven);
    const Tensor back = read_tensor(dir / "u.cstf");
    CHECK(back.dims == std::vector<std::size_t>{1});
    CHECK(back.dtype() == DType::u8);
    CHECK(back.u8()[0] == 7);
}

TEST_CASE("random tensors round-trip with byte-identical re-serialization") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> nd(1, 4), ext(1, 5), kind(0, 1), byte(0, 255);
    std::normal_distribution<float> g(0.0f, 100.0f);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::size_t> dims(static_cast<std::size_t>(nd(rng)));
        std::size_t n = 1;
        for (auto& d : dims) n *= d = static_cast<std::size_t>(ext(rng));
        Tensor t;
        if (kind(rng)) {
            std::vector<float> v(n);
            for (auto& x : v) x = g(rng);
            t = Tensor::make_f32(dims, v);
        } else {
            std::vector<std::uint8_t> v(n);
            for (auto& x : v) x = static_cast<std::uint8_t>(byte(rng));
            t = Tensor::make_u8(dims, v);
        }
        const auto bytes = encode_tensor(t);
        const Tensor back = decode_tensor(bytes);
        CHECK(back == t);
        CHECK(encode_tensor(back) == bytes);
    }
}

TEST_CASE("malformed files are rejected") {
    auto ok = header(1, {2}, 2);
    ok.push_back(1);
    ok.push_back(2);
    CHECK_NOTHROW(decode_tensor(ok));

    auto bad_magic = ok;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_tensor(bad_magic), FormatError);
    auto bad_version = ok;
    bad_version[4] = 2;
    CHECK_THROWS_AS(decode_tensor(bad_version), FormatError);
    auto truncated = ok;
    truncated.pop_back();
    CHECK_THROWS_AS(decode_tensor(truncated), FormatError);
    auto trailing = ok;
    trailing.push_back(0);
    CHECK_THROWS_AS(decode_tensor(trailing), FormatError);
    auto bad_dtype = header(1, {2}, 3);
    bad_dtype.resize(bad_dtype.size() + 2);
    CHECK_THROWS_AS(decode_tensor(bad_dtype), FormatError);
    auto zero_ndim = header(0, {}, 2);
    CHECK_THROWS_AS(decode_tensor(zero_ndim), FormatError);
    auto five_ndim = header(5, {1, 1, 1, 1, 1}, 2);
    five_ndim.push_back(0);
    CHECK_THROWS_AS(decode_tensor(five_ndim), FormatError);
    auto zero_extent = header(2, {0, 3}, 2);
    CHECK_THROWS_AS(decode_tensor(zero_extent), FormatError);
    CHECK_THROWS_AS(decode_tensor(std::vector<std::uint8_t>{0x43, 0x53}), FormatError);

    auto nan = header(1, {1}, 1);
    const float q = std::numeric_limits<float>::quiet_NaN();
    std::uint8_t raw[4];
    std::memcpy(raw, &q, 4);
    nan.insert(nan.end(), raw, raw + 4);
    CHECK_THROWS_AS(decode_tensor(nan), FormatError);

    TempDir dir;
    CHECK_THROWS_AS(read_tensor(dir / "missing.cstf"), FormatError);
}

TEST_CASE("feature maps and masks convert through tensors") {
    std::mt19937_64 rng(3);
    const FeatureMap m = oracle::random_map(3, 4, 5, rng, false);
    CHECK(to_feature_map(to_tensor(m)) == m);
    const ClassMask k = oracle::random_mask(4, 6, 3, rng);
    CHECK(to_class_mask(to_tensor(k)) == k);
    CHECK_THROWS_AS(to_class_mask(Tensor::make_f32({2, 2}, std::vector<float>(4))), FormatError);
    CHECK_THROWS_AS(to_feature_map(Tensor::make_u8({1, 2, 2}, std::vector<std::uint8_t>(4))), FormatError);
}

TEST_CASE("bilinear resize") {
    SUBCASE("same extent is the identity") {
        std::mt19937_64 rng(5);
        const FeatureMap m = oracle::random_map(2, 5, 7, rng, false);
        CHECK(resize_bilinear(m, 5, 7) == m);
    }
    SUBCASE("2x2 to 1x1 averages") {
        FeatureMap m(1, 2, 2);
        m.data = {1, 3, 5, 7};
        const FeatureMap r = resize_bilinear(m, 1, 1);
        CHECK(r.data[0] == 4.0f);
    }
    SUBCASE("matches the reference interpolator") {
        std::mt19937_64 rng(6);
        for (auto [h, w, oh, ow] : {std::array{8, 8, 4, 4}, {8, 8, 13, 5}, {3, 9, 7, 2}, {1, 1, 4, 4}}) {
            const FeatureMap m = oracle::random_map(2, h, w, rng, false);
            const FeatureMap r = resize_bilinear(m, oh, ow);
            for (int c = 0; c < 2; ++c) {
                std::vector<double> plane(m.plane(c).begin(), m.plane(c).end());
                const auto ref = oracle::bilinear(plane, h, w, oh, ow);
                for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(r.plane(c)[i] - ref[i]) <= 1e-6);
            }
        }
    }
    SUBCASE("constant input stays exact") {
        FeatureMap m(3, 5, 6, 0.3f);
        for (auto [oh, ow] : {std::pair{2, 3}, {11, 7}, {1, 1}}) {
            const FeatureMap r = resize_bilinear(m, oh, ow);
            for (float v : r.data) CHECK(v == 0.3f);
        }
    }
    CHECK_THROWS_AS(resize_bilinear(FeatureMap(1, 2, 2), 0, 3), ArgumentError);
}

TEST_CASE("nearest resize") {
    ClassMask m(2, 2);
    m.labels = {1, 1, 0, 0};
    CHECK(resize_nearest(m, 1, 1).labels == std::vector<std::uint8_t>{1});
    CHECK(resize_nearest(m, 2, 2) == m);

    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        const ClassMask r = oracle::random_mask(16, 16, 4, rng);
        const ClassMask small = resize_nearest(r, 7, 7);
        CHECK(small == oracle::nn_resize(r, 7, 7));
        const ClassMask big = resize_nearest(r, 37, 23);
        CHECK(big == oracle::nn_resize(r, 37, 23));
        for (auto v : small.labels) CHECK(std::find(r.labels.begin(), r.labels.end(), v) != r.labels.end());
    }
    CHECK_THROWS_AS(resize_nearest(m, 3, 0), ArgumentError);
}

TEST_CASE("channel normalization") {
    FeatureMap m(2, 1, 2);
    m.data = {3, 0, 4, 0};
    const FeatureMap n = l2_normalize_channels(m);
    CHECK(n.data[0] == doctest::Approx(0.6));
    CHECK(n.data[2] == doctest::Approx(0.8));
    CHECK(n.data[1] == 0.0f);
    CHECK(n.data[3] == 0.0f);

    std::mt19937_64 rng(9);
    const FeatureMap r = l2_normalize_channels(oracle::random_map(16, 6, 6, rng, false));
    for (std::size_t p = 0; p < r.locations(); ++p) {
        double sq = 0.0;
        for (int c = 0; c < 16; ++c) sq += static_cast<double>(r.plane(c)[p]) * r.plane(c)[p];
        CHECK(std::abs(std::sqrt(sq) - 1.0) <= 1e-5);
    }
    const FeatureMap twice = l2_normalize_channels(r);
    for (std::size_t i = 0; i < r.data.size(); ++i) CHECK(std::abs(twice.data[i] - r.data[i]) <= 1e-6);
}

TEST_CASE("atomic writes leave no temporary file") {
    TempDir dir;
    write_file_atomic(dir / "a.txt", std::string("hello"));
    std::ifstream in(dir / "a.txt");
    std::string s;
    in >> s;
    CHECK(s == "hello");
    int files = 0;
    for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path)) ++files;
    CHECK(files == 1);
}
