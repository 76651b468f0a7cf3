// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "pissa/data.hpp"
#include "pissa/io.hpp"
#include "test_util.hpp"

using namespace pissa;
using pissa::testing::random_matrix;
using pissa::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const FormatError& e) {
        return e.what();
    }
    return "";
}

// Hand-written IDX fixtures: two 2x2 images and their labels.
const std::vector<std::uint8_t> kIdxImages = {
    0x00, 0x00, 0x08, 0x03,  // magic
    0x00, 0x00, 0x00, 0x02,  // count
    0x00, 0x00, 0x00, 0x02,  // rows
    0x00, 0x00, 0x00, 0x02,  // cols
    0,    255,  51,   102,   // image 0
    204,  153,  1,    0,     // image 1
};
const std::vector<std::uint8_t> kIdxLabels = {0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x02, 3, 8};

}  // namespace

TEST(MatrixFile, RoundTripIsBitIdentical) {
    TempDir dir;
    Matrix m = random_matrix(7, 3, 1);
    m(0, 0) = -0.0;
    m(1, 1) = 1e-310;  // subnormal
    io::save_matrix(dir.path() / "m.pssa", m);
    const Matrix back = io::load_matrix(dir.path() / "m.pssa");
    ASSERT_EQ(back.rows(), 7u);
    ASSERT_EQ(back.cols(), 3u);
    for (std::size_t k = 0; k < m.size(); ++k)
        EXPECT_EQ(std::bit_cast<std::uint64_t>(back.data()[k]), std::bit_cast<std::uint64_t>(m.data()[k]));
    EXPECT_FALSE(fs::exists(dir.path() / "m.pssa.tmp"));
}

TEST(MatrixFile, LayoutIsLittleEndian) {
    const auto b = io::encode_matrix(Matrix{{1.0, 2.0}});
    ASSERT_EQ(b.size(), 16u + 16u);
    EXPECT_EQ(b.substr(0, 4), "PSSA");
    EXPECT_EQ(b[4], 1);
    EXPECT_EQ(b[8], 1);   // rows
    EXPECT_EQ(b[12], 2);  // cols
    // 1.0 = 0x3FF0000000000000, last byte first
    EXPECT_EQ(static_cast<unsigned char>(b[23]), 0x3F);
    EXPECT_EQ(static_cast<unsigned char>(b[22]), 0xF0);
}

TEST(MatrixFile, TruncatedReportsByteCounts) {
    auto b = bytes_of(io::encode_matrix(random_matrix(2, 2, 2)));
    b.resize(b.size() - 3);
    const auto msg = error_of([&] { io::decode_matrix(b); });
    EXPECT_NE(msg.find("truncated"), std::string::npos) << msg;
    EXPECT_NE(msg.find("expected 48 bytes, got 45"), std::string::npos) << msg;
}

TEST(MatrixFile, RejectsVersionMagicAndTrailingBytes) {
    auto b = bytes_of(io::encode_matrix(random_matrix(2, 2, 3)));
    auto v2 = b;
    v2[4] = 2;
    EXPECT_NE(error_of([&] { io::decode_matrix(v2); }).find("unsupported format version 2"), std::string::npos);
    auto bad = b;
    bad[0] = 'X';
    EXPECT_NE(error_of([&] { io::decode_matrix(bad); }).find("bad magic"), std::string::npos);
    auto extra = b;
    extra.push_back(0);
    EXPECT_NE(error_of([&] { io::decode_matrix(extra); }).find("trailing"), std::string::npos);
}

TEST(MatrixFile, RejectsHugeDimensionsWithoutAllocating) {
    io::ByteWriter w;
    w.raw("PSSA", 4);
    w.u32_le(1);
    w.u32_le(0xFFFFFFFFu);
    w.u32_le(0xFFFFFFFFu);
    EXPECT_NE(error_of([&] { io::decode_matrix(bytes_of(w.bytes())); }).find("too large"), std::string::npos);
    io::ByteWriter big;
    big.raw("PSSA", 4);
    big.u32_le(1);
    big.u32_le(65536);
    big.u32_le(65536);
    EXPECT_NE(error_of([&] { io::decode_matrix(bytes_of(big.bytes())); }).find("expected 34359738384 bytes, got 16"),
              std::string::npos);
}

TEST(MatrixFile, RejectsNonFiniteAndZeroShape) {
    io::ByteWriter w;
    w.raw("PSSA", 4);
    w.u32_le(1);
    w.u32_le(1);
    w.u32_le(1);
    w.f64_le(std::numeric_limits<double>::quiet_NaN());
    EXPECT_THROW(io::decode_matrix(bytes_of(w.bytes())), FormatError);
    io::ByteWriter z;
    z.raw("PSSA", 4);
    z.u32_le(1);
    z.u32_le(0);
    z.u32_le(3);
    EXPECT_THROW(io::decode_matrix(bytes_of(z.bytes())), FormatError);
}

TEST(MatrixFile, MissingFile) { EXPECT_THROW(io::load_matrix("/nonexistent/dir/x.pssa"), FormatError); }

TEST(QuantFile, RoundTrip) {
    TempDir dir;
    for (std::size_t bs : {1, 7, 64}) {
        const auto q = quantize(random_matrix(5, 9, bs), QuantConfig{bs});
        io::save_quantized(dir.path() / "q.psq4", q);
        EXPECT_TRUE(io::load_quantized(dir.path() / "q.psq4") == q) << "block size " << bs;
    }
}

TEST(QuantFile, Layout) {
    const auto q = quantize(Matrix{{1.0, -1.0, 0.0}}, QuantConfig{3});
    const auto b = io::encode_quantized(q);
    ASSERT_EQ(b.size(), 20u + 8u + 2u);
    EXPECT_EQ(b.substr(0, 4), "PSQ4");
    EXPECT_EQ(b[16], 3);  // block size
    EXPECT_EQ(static_cast<unsigned char>(b[28]), 0x0F);
    EXPECT_EQ(static_cast<unsigned char>(b[29]), 0x07);
}

TEST(QuantFile, RejectsCorruption) {
    const auto good = bytes_of(io::encode_quantized(quantize(random_matrix(3, 3, 4), QuantConfig{4})));
    auto trunc = good;
    trunc.pop_back();
    EXPECT_NE(error_of([&] { io::decode_quantized(trunc); }).find("truncated"), std::string::npos);
    auto v2 = good;
    v2[4] = 2;
    EXPECT_NE(error_of([&] { io::decode_quantized(v2); }).find("version 2"), std::string::npos);
    auto pad = good;
    pad.back() |= 0xF0;  // 9 codes: the high nibble of the last byte is padding
    EXPECT_NE(error_of([&] { io::decode_quantized(pad); }).find("padding"), std::string::npos);
    auto neg = good;
    neg[27] = static_cast<char>(0xBF);  // first scale becomes negative
    EXPECT_THROW(io::decode_quantized(neg), FormatError);
    auto magic = good;
    magic[3] = '8';
    EXPECT_NE(error_of([&] { io::decode_quantized(magic); }).find("expected 'PSQ4'"), std::string::npos);
}

TEST(Idx, FixtureDecodesExactly) {
    const auto img = io::parse_idx_images(kIdxImages);
    EXPECT_EQ(img.count, 2u);
    const auto labels = io::parse_idx_labels(kIdxLabels);
    const Dataset d = io::idx_dataset(img, labels);
    ASSERT_EQ(d.features.rows(), 2u);
    ASSERT_EQ(d.features.cols(), 4u);
    EXPECT_EQ(d.features(0, 0), 0.0);
    EXPECT_EQ(d.features(0, 1), 1.0);
    EXPECT_EQ(d.features(0, 2), 51 / 255.0);
    EXPECT_EQ(d.features(0, 3), 102 / 255.0);
    EXPECT_EQ(d.features(1, 0), 204 / 255.0);
    EXPECT_EQ(d.features(1, 2), 1 / 255.0);
    EXPECT_EQ(d.labels, (std::vector<int>{3, 8}));
    EXPECT_EQ(d.classes, 10u);
}

TEST(Idx, WrongMagicNamesBothValues) {
    const auto msg = error_of([] { io::parse_idx_images(kIdxLabels); });
    EXPECT_NE(msg.find("expected 0x00000803, got 0x00000801"), std::string::npos) << msg;
    EXPECT_NE(msg.find("offset 0"), std::string::npos) << msg;
    EXPECT_NE(error_of([] { io::parse_idx_labels(kIdxImages); }).find("expected 0x00000801"), std::string::npos);
}

TEST(Idx, TruncatedPayloadNamesOffset) {
    auto b = kIdxImages;
    b.resize(b.size() - 2);
    const auto msg = error_of([&] { io::parse_idx_images(b); });
    EXPECT_NE(msg.find("truncated at byte offset 16"), std::string::npos) << msg;
}

TEST(Idx, CountMismatch) {
    const std::vector<std::uint8_t> one_label = {0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x01, 3};
    EXPECT_THROW(io::idx_dataset(io::parse_idx_images(kIdxImages), io::parse_idx_labels(one_label)), FormatError);
}

TEST(Idx, LoadFromFiles) {
    TempDir dir;
    io::write_file_atomic(dir.path() / "img", std::string(kIdxImages.begin(), kIdxImages.end()));
    io::write_file_atomic(dir.path() / "lbl", std::string(kIdxLabels.begin(), kIdxLabels.end()));
    EXPECT_EQ(io::load_idx(dir.path() / "img", dir.path() / "lbl").size(), 2u);
}

TEST(Checkpoint, LayerRoundTrip) {
    TempDir dir;
    const Matrix w = generate_spectral_matrix(12, 10, 1.0, 5);
    for (auto layer : {pissa_init(w, 3), qpissa_init(w, 3, 2)}) {
        const auto sub = dir.path() / std::string(to_string(layer.origin()));
        io::save_layer(sub, layer, 77);
        io::LayerMeta meta;
        const auto back = io::load_layer(sub, &meta);
        EXPECT_EQ(meta.rank, 3u);
        EXPECT_EQ(meta.seed, 77u);
        EXPECT_EQ(meta.origin, layer.origin());
        EXPECT_EQ(back.adapter().a, layer.adapter().a);
        EXPECT_EQ(back.adapter().b, layer.adapter().b);
        EXPECT_EQ(back.dense_base(), layer.dense_base());
        EXPECT_EQ(back.quantized(), layer.quantized());
        EXPECT_TRUE(fs::exists(sub / (layer.quantized() ? "Wres.psq4" : "Wres.pssa")));
    }
}

TEST(Checkpoint, ScaleAndMetadataRoundTrip) {
    TempDir dir;
    const AdapterPair ad(random_matrix(4, 2, 6), random_matrix(2, 3, 7), 0.1);
    io::save_adapter_pair(dir.path(), ad, Origin::lora, 3);
    io::LayerMeta meta;
    const auto back = io::load_adapter_pair(dir.path(), &meta);
    EXPECT_EQ(back.scale, 0.1);
    EXPECT_EQ(meta.origin, Origin::lora);
}

TEST(Checkpoint, RejectsBadMetadata) {
    TempDir dir;
    const AdapterPair ad(random_matrix(4, 2, 8), random_matrix(2, 3, 9));
    io::save_adapter_pair(dir.path(), ad, Origin::pissa, 0);
    io::write_file_atomic(dir.path() / "meta.txt", "rank=5\nscale=1\norigin=pissa\nseed=0\n");
    EXPECT_NE(error_of([&] { io::load_adapter_pair(dir.path()); }).find("metadata rank 5"), std::string::npos);
    io::write_file_atomic(dir.path() / "meta.txt", "rank=2\nscale=1\norigin=bogus\nseed=0\n");
    EXPECT_THROW(io::load_adapter_pair(dir.path()), FormatError);
    io::write_file_atomic(dir.path() / "meta.txt", "rank=2\nscale=1\n");
    EXPECT_NE(error_of([&] { io::load_adapter_pair(dir.path()); }).find("missing 'origin'"), std::string::npos);
    fs::remove(dir.path() / "meta.txt");
    EXPECT_THROW(io::load_adapter_pair(dir.path()), FormatError);
}

TEST(Checkpoint, ModelRoundTrip) {
    TempDir dir;
    RandomSource rng(10);
    MlpModel dense = make_mlp(6, 5, 3, rng);
    dense.layer1.bias = rng.normal_matrix(1, 5);
    io::save_model(dir.path() / "dense", dense, 1);
    const auto tuned = inject_adapters(dense, AdapterSpec{Origin::pissa, 2}, 1);
    io::save_model(dir.path() / "tuned", tuned, 1);
    const Matrix x = random_matrix(4, 6, 11);
    EXPECT_EQ(model_forward(io::load_model(dir.path() / "dense"), x), model_forward(dense, x));
    const auto back = io::load_model(dir.path() / "tuned");
    EXPECT_TRUE(back.layer1.has_adapter());
    EXPECT_EQ(model_forward(back, x), model_forward(tuned, x));
}

TEST(Csv, MinimalQuoting) {
    EXPECT_EQ(io::csv_field("plain"), "plain");
    EXPECT_EQ(io::csv_field("a,b"), "\"a,b\"");
    EXPECT_EQ(io::csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    EXPECT_EQ(io::csv_field("two\nlines"), "\"two\nlines\"");
    EXPECT_EQ(io::csv_line({"x", "1,2", ""}), "x,\"1,2\",\n");
}

TEST(Csv, ScalarsRoundTripWith17Digits) {
    RandomSource rng(12);
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.normal() * std::pow(10.0, static_cast<double>(rng.below(40)) - 20);
        EXPECT_EQ(std::stod(io::format_scalar(v)), v);
    }
    EXPECT_EQ(io::format_scalar(0.1), "0.10000000000000001");
}

TEST(Csv, TraceFormat) {
    const TrainTrace t{{1.5, 0.25, 1e-3}, {1.0, 0.5, 2e-3}};
    EXPECT_EQ(io::trace_csv(t), "step,loss,grad_norm,lr\n1,1.5,0.25,0.001\n2,1,0.5,0.002\n");
}
