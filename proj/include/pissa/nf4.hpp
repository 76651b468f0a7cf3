// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "pissa/matrix.hpp"

namespace pissa {

/// 16 sorted quantization levels in [-1, 1] containing -1, 0 and 1 exactly.
class Nf4Codebook {
public:
    static constexpr std::size_t kLevels = 16;
    using Levels = std::array<Scalar, kLevels>;

    explicit Nf4Codebook(const Levels& levels) : levels_(levels) {
        for (std::size_t i = 1; i < kLevels; ++i)
            if (!(levels_[i - 1] < levels_[i])) throw std::invalid_argument("codebook levels must be strictly increasing");
        if (levels_.front() != -1.0 || levels_.back() != 1.0)
            throw std::invalid_argument("codebook endpoints must be exactly -1 and 1");
        if (std::find(levels_.begin(), levels_.end(), 0.0) == levels_.end())
            throw std::invalid_argument("codebook must contain an exact zero level");
    }

    const Levels& levels() const noexcept { return levels_; }
    Scalar operator[](std::size_t i) const noexcept { return levels_[i]; }

    std::uint8_t zero_code() const noexcept {
        return static_cast<std::uint8_t>(std::find(levels_.begin(), levels_.end(), 0.0) - levels_.begin());
    }

    /// Index of the nearest level; equidistant candidates resolve to the lower index.
    std::uint8_t nearest(Scalar x) const noexcept {
        std::uint8_t best = 0;
        Scalar best_d = std::abs(x - levels_[0]);
        for (std::uint8_t i = 1; i < kLevels; ++i) {
            const Scalar d = std::abs(x - levels_[i]);
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    }

    Scalar max_gap() const noexcept {
        Scalar g = 0;
        for (std::size_t i = 1; i < kLevels; ++i) g = std::max(g, levels_[i] - levels_[i - 1]);
        return g;
    }

private:
    Levels levels_;
};

/// NormalFloat-4 levels: evenly spaced standard-normal quantiles, 8 on the
/// non-positive side and 9 on the non-negative side with the shared zero merged,
/// normalized so the extremes are exactly ±1. The outermost quantile sits at
/// probability 0.9677083, the value used by the QLoRA lineage.
inline Nf4Codebook build_nf4_codebook() {
    constexpr Scalar offset = 0.9677083;
    const boost::math::normal_distribution<Scalar> standard;
    auto ppf = [&](Scalar p) { return boost::math::quantile(standard, p); };

    std::vector<Scalar> v;
    // linspace(offset, 0.5, 9) without its 0.5 endpoint: 8 positive levels
    for (int i = 0; i < 8; ++i) v.push_back(ppf(offset + (0.5 - offset) * i / 8.0));
    // linspace(offset, 0.5, 8) without its endpoint: 7 negative levels
    for (int i = 0; i < 7; ++i) v.push_back(-ppf(offset + (0.5 - offset) * i / 7.0));
    v.push_back(0.0);
    std::sort(v.begin(), v.end());
    const Scalar top = v.back();
    Nf4Codebook::Levels levels{};
    for (std::size_t i = 0; i < levels.size(); ++i) levels[i] = v[i] / top;
    levels.front() = -1.0;  // -ppf(offset)/ppf(offset), exact by symmetry
    levels.back() = 1.0;
    return Nf4Codebook(levels);
}

inline const Nf4Codebook& default_nf4_codebook() {
    static const Nf4Codebook cb = build_nf4_codebook();
    return cb;
}

struct QuantConfig {
    std::size_t block_size = 64;
    Nf4Codebook codebook = default_nf4_codebook();
};

/// Block-wise absmax 4-bit matrix. Blocks run over the row-major flattening;
/// the final block may be partial. Codes are packed two per byte, low nibble first.
class QuantizedMatrix {
public:
    QuantizedMatrix(std::size_t rows, std::size_t cols, std::size_t block_size, std::vector<std::uint8_t> codes,
                    std::vector<Scalar> scales, Nf4Codebook codebook = default_nf4_codebook())
        : rows_(rows), cols_(cols), block_size_(block_size), codes_(std::move(codes)), scales_(std::move(scales)),
          codebook_(std::move(codebook)) {
        if (rows == 0 || cols == 0) throw ShapeError("quantized matrix dimensions must be positive");
        if (block_size == 0) throw std::invalid_argument("block_size must be >= 1");
        if (codes_.size() != packed_bytes(rows * cols))
            throw std::invalid_argument("packed code length " + std::to_string(codes_.size()) + ", expected " +
                                        std::to_string(packed_bytes(rows * cols)));
        if (scales_.size() != block_count(rows * cols, block_size))
            throw std::invalid_argument("scale count " + std::to_string(scales_.size()) + ", expected " +
                                        std::to_string(block_count(rows * cols, block_size)));
        for (Scalar s : scales_)
            if (!(s >= 0) || !std::isfinite(s)) throw std::invalid_argument("block scales must be finite and >= 0");
    }

    static std::size_t packed_bytes(std::size_t count) noexcept { return (count + 1) / 2; }
    static std::size_t block_count(std::size_t count, std::size_t block) noexcept { return (count + block - 1) / block; }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t block_size() const noexcept { return block_size_; }
    const std::vector<std::uint8_t>& packed_codes() const noexcept { return codes_; }
    const std::vector<Scalar>& scales() const noexcept { return scales_; }
    const Nf4Codebook& codebook() const noexcept { return codebook_; }

    std::uint8_t code(std::size_t flat) const noexcept {
        const std::uint8_t byte = codes_[flat / 2];
        return (flat % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    }

    friend bool operator==(const QuantizedMatrix& a, const QuantizedMatrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.block_size_ == b.block_size_ && a.codes_ == b.codes_ &&
               a.scales_ == b.scales_ && a.codebook_.levels() == b.codebook_.levels();
    }

private:
    std::size_t rows_;
    std::size_t cols_;
    std::size_t block_size_;
    std::vector<std::uint8_t> codes_;
    std::vector<Scalar> scales_;
    Nf4Codebook codebook_;
};

inline QuantizedMatrix quantize(const Matrix& m, const QuantConfig& cfg = {}) {
    if (cfg.block_size == 0) throw std::invalid_argument("block_size must be >= 1");
    const auto values = m.data();
    const std::size_t count = values.size();
    const std::size_t blocks = QuantizedMatrix::block_count(count, cfg.block_size);
    std::vector<Scalar> scales(blocks, 0.0);
    std::vector<std::uint8_t> packed(QuantizedMatrix::packed_bytes(count), 0);
    const std::uint8_t zero = cfg.codebook.zero_code();

    for (std::size_t b = 0; b < blocks; ++b) {
        const std::size_t begin = b * cfg.block_size;
        const std::size_t end = std::min(count, begin + cfg.block_size);
        Scalar absmax = 0;
        for (std::size_t i = begin; i < end; ++i) absmax = std::max(absmax, std::abs(values[i]));
        scales[b] = absmax;
        for (std::size_t i = begin; i < end; ++i) {
            const std::uint8_t c = absmax == 0 ? zero : cfg.codebook.nearest(values[i] / absmax);
            packed[i / 2] |= static_cast<std::uint8_t>(i % 2 == 0 ? c : c << 4);
        }
    }
    return {m.rows(), m.cols(), cfg.block_size, std::move(packed), std::move(scales), cfg.codebook};
}

inline Matrix dequantize(const QuantizedMatrix& q) {
    Matrix out(q.rows(), q.cols());
    auto values = out.data();
    const auto& cb = q.codebook();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = cb[q.code(i)] * q.scales()[i / q.block_size()];
    return out;
}

}  // namespace pissa
