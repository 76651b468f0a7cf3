// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pissa {

using Scalar = double;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(std::size_t rows, std::size_t cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

/// Dense row-major matrix of Scalar. Dimensions are always positive.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, Scalar{0}) {
        check_dims(rows, cols);
    }

    /// Takes ownership of row-major data; rejects a length mismatch or non-finite entries.
    Matrix(std::size_t rows, std::size_t cols, std::vector<Scalar> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        check_dims(rows, cols);
        if (data_.size() != rows * cols) {
            throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                             shape_str(rows, cols));
        }
        for (Scalar v : data_) {
            if (!std::isfinite(v)) throw NumericalError("matrix entries must be finite");
        }
    }

    Matrix(std::initializer_list<std::initializer_list<Scalar>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        check_dims(rows_, cols_);
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("ragged initializer list");
            for (Scalar v : r) {
                if (!std::isfinite(v)) throw NumericalError("matrix entries must be finite");
                data_.push_back(v);
            }
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1;
        return m;
    }

    static Matrix diagonal(std::span<const Scalar> d) {
        Matrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    Scalar& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
    Scalar operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

    std::span<Scalar> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
    std::span<const Scalar> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

    std::span<Scalar> data() noexcept { return data_; }
    std::span<const Scalar> data() const noexcept { return data_; }

    Matrix transpose() const {
        Matrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    /// Copy of columns [begin, end).
    Matrix col_range(std::size_t begin, std::size_t end) const {
        if (begin >= end || end > cols_) throw ShapeError("column range out of bounds");
        Matrix out(rows_, end - begin);
        for (std::size_t i = 0; i < rows_; ++i)
            std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(i * cols_ + begin), end - begin,
                        out.data_.begin() + static_cast<std::ptrdiff_t>(i * (end - begin)));
        return out;
    }

    /// Copy of rows [begin, end).
    Matrix row_range(std::size_t begin, std::size_t end) const {
        if (begin >= end || end > rows_) throw ShapeError("row range out of bounds");
        Matrix out(end - begin, cols_);
        std::copy(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                  data_.begin() + static_cast<std::ptrdiff_t>(end * cols_), out.data_.begin());
        return out;
    }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
    }

    Matrix& operator+=(const Matrix& o) {
        require_same_shape(o, "+=");
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        require_same_shape(o, "-=");
        for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
        return *this;
    }
    Matrix& operator*=(Scalar s) noexcept {
        for (Scalar& v : data_) v *= s;
        return *this;
    }

    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, Scalar s) { return a *= s; }
    friend Matrix operator*(Scalar s, Matrix a) { return a *= s; }
    friend Matrix operator-(Matrix a) { return a *= Scalar{-1}; }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

    void require_same_shape(const Matrix& o, const char* what) const {
        if (rows_ != o.rows_ || cols_ != o.cols_)
            throw ShapeError(std::string("shape mismatch in ") + what + ": " + shape_str(rows_, cols_) + " vs " +
                             shape_str(o.rows_, o.cols_));
    }

private:
    static void check_dims(std::size_t rows, std::size_t cols) {
        if (rows == 0 || cols == 0) throw ShapeError("matrix dimensions must be positive, got " + shape_str(rows, cols));
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<Scalar> data_;
};

/// c = a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " times " + shape_str(b.rows(), b.cols()));
    Matrix c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        Scalar* ci = c.row(i).data();
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const Scalar aik = a(i, k);
            if (aik == 0) continue;
            const Scalar* bk = b.row(k).data();
            for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

/// c = aᵀ * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw ShapeError("matmul_tn: " + shape_str(a.rows(), a.cols()) + "^T times " + shape_str(b.rows(), b.cols()));
    Matrix c(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const Scalar* bk = b.row(k).data();
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const Scalar aki = a(k, i);
            if (aki == 0) continue;
            Scalar* ci = c.row(i).data();
            for (std::size_t j = 0; j < n; ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

/// c = a * bᵀ
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: " + shape_str(a.rows(), a.cols()) + " times " + shape_str(b.rows(), b.cols()) +
                         "^T");
    Matrix c(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const Scalar* ai = a.row(i).data();
        for (std::size_t j = 0; j < b.rows(); ++j) {
            const Scalar* bj = b.row(j).data();
            Scalar s = 0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += ai[k] * bj[k];
            c(i, j) = s;
        }
    }
    return c;
}

inline Scalar frobenius_norm(const Matrix& m) {
    // scaled sum of squares, avoids overflow for large entries
    Scalar scale = 0;
    for (Scalar v : m.data()) scale = std::max(scale, std::abs(v));
    if (scale == 0) return 0;
    Scalar ss = 0;
    for (Scalar v : m.data()) {
        const Scalar t = v / scale;
        ss += t * t;
    }
    return scale * std::sqrt(ss);
}

inline Scalar max_abs(const Matrix& m) {
    Scalar r = 0;
    for (Scalar v : m.data()) r = std::max(r, std::abs(v));
    return r;
}

/// Sum of |a - b| over all entries.
inline Scalar l1_distance(const Matrix& a, const Matrix& b) {
    a.require_same_shape(b, "l1_distance");
    Scalar s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a.data()[k] - b.data()[k]);
    return s;
}

/// ‖a - b‖_F / max(1, ‖a‖_F)
inline Scalar relative_error(const Matrix& reference, const Matrix& approx) {
    return frobenius_norm(reference - approx) / std::max(Scalar{1}, frobenius_norm(reference));
}

/// [a b] side by side.
inline Matrix hconcat(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ShapeError("hconcat: row counts differ");
    Matrix out(a.rows(), a.cols() + b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        std::copy(a.row(i).begin(), a.row(i).end(), out.row(i).begin());
        std::copy(b.row(i).begin(), b.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(a.cols()));
    }
    return out;
}

/// [a; b] stacked.
inline Matrix vconcat(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw ShapeError("vconcat: column counts differ");
    Matrix out(a.rows() + b.rows(), a.cols());
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
    return out;
}

}  // namespace pissa
