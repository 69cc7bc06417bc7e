#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace taskvec {

/// Dense row-major matrix of doubles. All merging math runs in 64-bit floats
/// regardless of what dtype the checkpoint stores, so a single scalar type is
/// enough here. Values are immutable by convention once an operation returns;
/// every function below is a pure function of its inputs.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // rows * cols entries, row-major

    Matrix() = default;

    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    Matrix(std::size_t r, std::size_t c, std::vector<double> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != rows * cols) {
            throw std::invalid_argument("Matrix: got " + std::to_string(data.size()) +
                                        " values for a " + shape_str() + " matrix");
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    bool same_shape(const Matrix& other) const {
        return rows == other.rows && cols == other.cols;
    }

    std::string shape_str() const {
        return std::to_string(rows) + "x" + std::to_string(cols);
    }

    friend bool operator==(const Matrix& a, const Matrix& b) = default;
};

/// Sum of squared entries (squared Frobenius norm). Zero iff the matrix is zero.
inline double frobenius_norm_sq(const Matrix& m) {
    double acc = 0.0;
    for (double v : m.data) acc += v * v;
    return acc;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out(j, i) = m(i, j);
    return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw std::invalid_argument("matmul: inner dimensions disagree, " + a.shape_str() +
                                    " * " + b.shape_str());
    }
    Matrix out(a.rows, b.cols);
    // i-k-j order keeps both inner accesses contiguous; for fixed (i,j) the
    // accumulation over k is still in ascending order.
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double av = a(i, k);
            const double* brow = &b.data[k * b.cols];
            double* orow = &out.data[i * out.cols];
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

/// alpha * x + y, elementwise.
inline Matrix axpy(double alpha, const Matrix& x, const Matrix& y) {
    if (!x.same_shape(y)) {
        throw std::invalid_argument("axpy: shape mismatch, x is " + x.shape_str() + ", y is " +
                                    y.shape_str());
    }
    Matrix out = y;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += alpha * x.data[i];
    return out;
}

}  // namespace taskvec
