// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "pissa/adapter.hpp"
#include "pissa/matrix.hpp"
#include "pissa/nf4.hpp"
#include "pissa/train.hpp"

namespace pissa {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace io {

inline constexpr std::array<char, 4> kMatrixMagic{'P', 'S', 'S', 'A'};
inline constexpr std::array<char, 4> kQuantMagic{'P', 'S', 'Q', '4'};
inline constexpr std::uint32_t kFormatVersion = 1;

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temporary and renames it into place, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

class ByteWriter {
public:
    void raw(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
    void u32_le(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void f64_le(double d) {
        const auto bits = std::bit_cast<std::uint64_t>(d);
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    const std::string& bytes() const noexcept { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(const std::vector<std::uint8_t>& data, std::string what) : data_(data), what_(std::move(what)) {}

    void need(std::size_t n) const {
        if (data_.size() - pos_ < n)
            throw FormatError(what_ + ": truncated at byte offset " + std::to_string(pos_) + ", expected " +
                              std::to_string(pos_ + n) + " bytes, got " + std::to_string(data_.size()));
    }
    std::uint32_t u32_le() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint32_t u32_be() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | data_[pos_ + i];
        pos_ += 4;
        return v;
    }
    double f64_le() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(bits);
    }
    std::uint8_t byte() {
        need(1);
        return data_[pos_++];
    }
    void magic(const std::array<char, 4>& expected) {
        need(4);
        std::string got(reinterpret_cast<const char*>(data_.data() + pos_), 4);
        if (std::memcmp(got.data(), expected.data(), 4) != 0)
            throw FormatError(what_ + ": bad magic '" + got + "', expected '" + std::string(expected.data(), 4) + "'");
        pos_ += 4;
    }
    void expect_end() const {
        if (pos_ != data_.size())
            throw FormatError(what_ + ": " + std::to_string(data_.size() - pos_) + " trailing bytes after offset " +
                              std::to_string(pos_));
    }
    std::size_t offset() const noexcept { return pos_; }

private:
    const std::vector<std::uint8_t>& data_;
    std::size_t pos_ = 0;
    std::string what_;
};

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
    if (v > 0xFFFFFFFFu) throw FormatError(std::string(what) + " does not fit in u32");
    return static_cast<std::uint32_t>(v);
}

inline std::string encode_matrix(const Matrix& m) {
    ByteWriter w;
    w.raw(kMatrixMagic.data(), 4);
    w.u32_le(kFormatVersion);
    w.u32_le(checked_u32(m.rows(), "rows"));
    w.u32_le(checked_u32(m.cols(), "cols"));
    for (double v : m.data()) w.f64_le(v);
    return w.bytes();
}

inline Matrix decode_matrix(const std::vector<std::uint8_t>& bytes, const std::string& what = "matrix") {
    ByteReader r(bytes, what);
    r.magic(kMatrixMagic);
    const auto version = r.u32_le();
    if (version != kFormatVersion)
        throw FormatError(what + ": unsupported format version " + std::to_string(version));
    const std::size_t rows = r.u32_le();
    const std::size_t cols = r.u32_le();
    // rows·cols fits in 64 bits; the byte count may not
    if (rows * cols > (std::numeric_limits<std::size_t>::max() - r.offset()) / 8)
        throw FormatError(what + ": header declares " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " entries, too large to address");
    r.need(rows * cols * 8);
    std::vector<double> data(rows * cols);
    for (double& v : data) v = r.f64_le();
    r.expect_end();
    try {
        return Matrix(rows, cols, std::move(data));
    } catch (const std::exception& e) {
        throw FormatError(what + ": " + e.what());
    }
}

inline void save_matrix(const std::filesystem::path& path, const Matrix& m) { write_file_atomic(path, encode_matrix(m)); }

inline Matrix load_matrix(const std::filesystem::path& path) { return decode_matrix(read_file(path), path.string()); }

inline std::string encode_quantized(const QuantizedMatrix& q) {
    ByteWriter w;
    w.raw(kQuantMagic.data(), 4);
    w.u32_le(kFormatVersion);
    w.u32_le(checked_u32(q.rows(), "rows"));
    w.u32_le(checked_u32(q.cols(), "cols"));
    w.u32_le(checked_u32(q.block_size(), "block_size"));
    for (double s : q.scales()) w.f64_le(s);
    w.raw(q.packed_codes().data(), q.packed_codes().size());
    return w.bytes();
}

/// Decodes a PSQ4 payload; the codebook is always standard NF4.
inline QuantizedMatrix decode_quantized(const std::vector<std::uint8_t>& bytes, const std::string& what = "quantized") {
    ByteReader r(bytes, what);
    r.magic(kQuantMagic);
    const auto version = r.u32_le();
    if (version != kFormatVersion)
        throw FormatError(what + ": unsupported format version " + std::to_string(version));
    const std::size_t rows = r.u32_le();
    const std::size_t cols = r.u32_le();
    const std::size_t block = r.u32_le();
    if (rows == 0 || cols == 0 || block == 0) throw FormatError(what + ": zero dimension or block size");
    const std::size_t n = rows * cols;
    const std::size_t blocks = QuantizedMatrix::block_count(n, block);
    const std::size_t packed = QuantizedMatrix::packed_bytes(n);
    if (blocks > (std::numeric_limits<std::size_t>::max() - r.offset() - packed) / 8)
        throw FormatError(what + ": header declares too many blocks to address");
    r.need(blocks * 8 + packed);
    std::vector<double> scales(blocks);
    for (double& s : scales) s = r.f64_le();
    std::vector<std::uint8_t> codes(packed);
    for (auto& c : codes) c = r.byte();
    r.expect_end();
    if (n % 2 == 1 && (codes.back() >> 4) != 0) throw FormatError(what + ": padding nibble is not zero");
    try {
        return QuantizedMatrix(rows, cols, block, std::move(codes), std::move(scales));
    } catch (const std::exception& e) {
        throw FormatError(what + ": " + e.what());
    }
}

inline void save_quantized(const std::filesystem::path& path, const QuantizedMatrix& q) {
    write_file_atomic(path, encode_quantized(q));
}

inline QuantizedMatrix load_quantized(const std::filesystem::path& path) {
    return decode_quantized(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// IDX (MNIST) ingestion

inline constexpr std::uint32_t kIdxImages = 0x00000803;
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

struct IdxImages {
    std::size_t count = 0, rows = 0, cols = 0;
    std::vector<std::uint8_t> pixels;
};

inline IdxImages parse_idx_images(const std::vector<std::uint8_t>& bytes, const std::string& what = "idx images") {
    ByteReader r(bytes, what);
    const auto magic = r.u32_be();
    if (magic != kIdxImages) {
        char buf[96];
        std::snprintf(buf, sizeof buf, ": wrong magic at byte offset 0, expected 0x%08X, got 0x%08X", kIdxImages, magic);
        throw FormatError(what + buf);
    }
    IdxImages img;
    img.count = r.u32_be();
    img.rows = r.u32_be();
    img.cols = r.u32_be();
    if (img.rows != 0 && img.cols != 0 &&
        img.count > std::numeric_limits<std::size_t>::max() / img.rows / img.cols)
        throw FormatError(what + ": header declares too many pixels to address");
    const std::size_t n = img.count * img.rows * img.cols;
    r.need(n);
    img.pixels.resize(n);
    for (auto& p : img.pixels) p = r.byte();
    r.expect_end();
    return img;
}

inline std::vector<std::uint8_t> parse_idx_labels(const std::vector<std::uint8_t>& bytes,
                                                  const std::string& what = "idx labels") {
    ByteReader r(bytes, what);
    const auto magic = r.u32_be();
    if (magic != kIdxLabels) {
        char buf[96];
        std::snprintf(buf, sizeof buf, ": wrong magic at byte offset 0, expected 0x%08X, got 0x%08X", kIdxLabels, magic);
        throw FormatError(what + buf);
    }
    const std::size_t count = r.u32_be();
    r.need(count);
    std::vector<std::uint8_t> labels(count);
    for (auto& l : labels) l = r.byte();
    r.expect_end();
    return labels;
}

/// Images scaled to [0, 1], one flattened image per row; 10 classes.
inline Dataset idx_dataset(const IdxImages& img, const std::vector<std::uint8_t>& labels) {
    if (img.count != labels.size())
        throw FormatError("idx: " + std::to_string(img.count) + " images but " + std::to_string(labels.size()) +
                          " labels");
    if (img.count == 0 || img.rows * img.cols == 0) throw FormatError("idx: empty image set");
    std::size_t classes = 10;
    std::vector<int> l(labels.begin(), labels.end());
    for (int y : l) classes = std::max(classes, static_cast<std::size_t>(y) + 1);
    std::vector<double> f(img.pixels.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = img.pixels[i] / 255.0;
    return {Matrix(img.count, img.rows * img.cols, std::move(f)), std::move(l), classes};
}

inline Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    return idx_dataset(parse_idx_images(read_file(images), images.string()),
                       parse_idx_labels(read_file(labels), labels.string()));
}

// ---------------------------------------------------------------------------
// Adapter checkpoints: <dir>/A.pssa, B.pssa, Wres.pssa|Wres.psq4, meta.txt

struct LayerMeta {
    std::size_t rank = 0;
    Scalar scale = 1;
    Origin origin = Origin::pissa;
    std::uint64_t seed = 0;
};

inline std::string format_scalar(Scalar v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void save_adapter_pair(const std::filesystem::path& dir, const AdapterPair& ad, Origin origin,
                              std::uint64_t seed) {
    save_matrix(dir / "A.pssa", ad.a);
    save_matrix(dir / "B.pssa", ad.b);
    std::ostringstream meta;
    meta << "rank=" << ad.rank() << "\nscale=" << format_scalar(ad.scale) << "\norigin=" << to_string(origin)
         << "\nseed=" << seed << "\n";
    write_file_atomic(dir / "meta.txt", meta.str());
}

inline void save_layer(const std::filesystem::path& dir, const DecomposedLayer& layer, std::uint64_t seed,
                       bool with_base = true) {
    save_adapter_pair(dir, layer.adapter(), layer.origin(), seed);
    if (!with_base) return;
    if (const auto* q = std::get_if<QuantizedMatrix>(&layer.base())) save_quantized(dir / "Wres.psq4", *q);
    else save_matrix(dir / "Wres.pssa", std::get<Matrix>(layer.base()));
}

inline LayerMeta load_meta(const std::filesystem::path& dir) {
    std::ifstream in(dir / "meta.txt");
    if (!in) throw FormatError("missing " + (dir / "meta.txt").string());
    std::map<std::string, std::string> kv;
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("malformed metadata line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw FormatError(std::string("metadata is missing '") + key + "'");
        return it->second;
    };
    LayerMeta m;
    try {
        m.rank = std::stoull(get("rank"));
        m.scale = std::stod(get("scale"));
        m.origin = parse_origin(get("origin"));
        m.seed = std::stoull(get("seed"));
    } catch (const FormatError&) {
        throw;
    } catch (const std::exception& e) {
        throw FormatError("bad metadata in " + dir.string() + ": " + e.what());
    }
    return m;
}

inline AdapterPair load_adapter_pair(const std::filesystem::path& dir, LayerMeta* meta_out = nullptr) {
    const LayerMeta meta = load_meta(dir);
    AdapterPair ad(load_matrix(dir / "A.pssa"), load_matrix(dir / "B.pssa"), meta.scale);
    if (ad.rank() != meta.rank)
        throw FormatError("metadata rank " + std::to_string(meta.rank) + " but A has " + std::to_string(ad.rank()) +
                          " columns");
    if (meta_out) *meta_out = meta;
    return ad;
}

inline DecomposedLayer load_layer(const std::filesystem::path& dir, LayerMeta* meta_out = nullptr) {
    LayerMeta meta;
    AdapterPair ad = load_adapter_pair(dir, &meta);
    if (meta_out) *meta_out = meta;
    if (std::filesystem::exists(dir / "Wres.psq4"))
        return {load_quantized(dir / "Wres.psq4"), std::move(ad), meta.origin};
    return {load_matrix(dir / "Wres.pssa"), std::move(ad), meta.origin};
}

/// <dir>/layer1, <dir>/layer2, each a layer checkpoint plus bias.pssa.
inline void save_model(const std::filesystem::path& dir, const MlpModel& model, std::uint64_t seed) {
    int index = 1;
    for (const Linear* layer : {&model.layer1, &model.layer2}) {
        const auto sub = dir / ("layer" + std::to_string(index++));
        if (const auto* dl = std::get_if<DecomposedLayer>(&layer->weight)) save_layer(sub, *dl, seed);
        else save_matrix(sub / "W.pssa", std::get<Matrix>(layer->weight));
        save_matrix(sub / "bias.pssa", layer->bias);
    }
}

inline MlpModel load_model(const std::filesystem::path& dir) {
    MlpModel model;
    int index = 1;
    for (Linear* layer : {&model.layer1, &model.layer2}) {
        const auto sub = dir / ("layer" + std::to_string(index++));
        if (std::filesystem::exists(sub / "meta.txt")) layer->weight = load_layer(sub);
        else layer->weight = load_matrix(sub / "W.pssa");
        layer->bias = load_matrix(sub / "bias.pssa");
    }
    return model;
}

// ---------------------------------------------------------------------------
// CSV

/// Minimal RFC 4180 quoting: only fields containing a comma, quote or newline are quoted.
inline std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string csv_line(const std::vector<std::string>& fields) {
    std::string line;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) line += ',';
        line += csv_field(fields[i]);
    }
    return line + "\n";
}

inline std::string trace_csv(const TrainTrace& trace) {
    std::string out = "step,loss,grad_norm,lr\n";
    for (std::size_t i = 0; i < trace.size(); ++i)
        out += csv_line({std::to_string(i + 1), format_scalar(trace[i].loss), format_scalar(trace[i].grad_norm),
                         format_scalar(trace[i].lr)});
    return out;
}

}  // namespace io
}  // namespace pissa
