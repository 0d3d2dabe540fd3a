#pragma once

// Dense row-major double matrix and the handful of operations the toolkit
// needs. Not a BLAS; the largest products here are a few hundred wide.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lora_cl/error.hpp"

namespace lora_cl {

class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
    }

    // Row-wise literal: Matrix{{1, 2}, {3, 4}}.
    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("ragged matrix literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
    std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

    std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

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

    Matrix& operator*=(double s) {
        for (double& v : data_) v *= s;
        return *this;
    }

    // Exact element equality (bitwise for finite non-zero values).
    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    void require_same_shape(const Matrix& o, const char* op) const {
        if (!same_shape(o))
            throw ShapeError(std::string("operator") + op + ": " + shape_str() + " vs " + o.shape_str());
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(Matrix a, double s) { return a *= s; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
    return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + a.shape_str() + " * " + b.shape_str());
    Matrix c(a.rows(), b.cols());
    // i-k-j order keeps the inner loop contiguous in both b and c.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto crow = c.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto brow = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

// y = m * x
inline std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
    if (m.cols() != x.size())
        throw ShapeError("matvec: " + m.shape_str() + " * vector of " + std::to_string(x.size()));
    std::vector<double> y(m.rows(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        double acc = 0.0;
        for (std::size_t j = 0; j < r.size(); ++j) acc += r[j] * x[j];
        y[i] = acc;
    }
    return y;
}

inline double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size())
        throw ShapeError("dot: length " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    double acc = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) acc += u[k] * v[k];
    return acc;
}

inline double frobenius_norm(const Matrix& m) {
    // Scaled accumulation so huge or tiny entries do not overflow/underflow.
    double scale = 0.0;
    double ssq = 1.0;
    for (double v : m.values()) {
        if (v == 0.0) continue;
        const double a = std::abs(v);
        if (scale < a) {
            ssq = 1.0 + ssq * (scale / a) * (scale / a);
            scale = a;
        } else {
            ssq += (a / scale) * (a / scale);
        }
    }
    return scale * std::sqrt(ssq);
}

inline double max_abs(const Matrix& m) {
    double best = 0.0;
    for (double v : m.values()) best = std::max(best, std::abs(v));
    return best;
}

// Result of a cosine similarity. `degenerate` is set when either vector has
// zero norm, in which case `value` is 0 by convention.
struct Cosine {
    double value = 0.0;
    bool degenerate = false;
};

inline Cosine cosine_similarity(std::span<const double> u, std::span<const double> v) {
    const double uv = dot(u, v);
    const double uu = dot(u, u);
    const double vv = dot(v, v);
    if (uu == 0.0 || vv == 0.0) return {0.0, true};
    const double c = uv / (std::sqrt(uu) * std::sqrt(vv));
    return {std::clamp(c, -1.0, 1.0), false};
}

} // namespace lora_cl
