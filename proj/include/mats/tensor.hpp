// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense row-major double-precision matrices and the handful of factorizations
// the merging code needs. Everything here is deterministic: loops run in a
// fixed order and no operation depends on thread scheduling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mats/error.hpp"

namespace mats {

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_)
            throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(rows_) + "x" +
                             std::to_string(cols_));
    }
    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
    static Matrix column(std::initializer_list<double> values) {
        return Matrix(values.size(), 1, std::vector<double>(values));
    }
    static Matrix row(std::span<const double> values) {
        return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
    }
    static Matrix diagonal(std::span<const double> values) {
        Matrix m(values.size(), values.size());
        for (std::size_t i = 0; i < values.size(); ++i) m(i, i) = values[i];
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::span<double> row_span(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row_span(std::size_t r) const noexcept {
        return {data_.data() + r * cols_, cols_};
    }
    const std::vector<double>& storage() const noexcept { return data_; }

    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
    std::string shape_string() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    // Bitwise equality of shape and contents.
    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

    Matrix& operator+=(const Matrix& o) {
        require_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        require_same(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Matrix& operator*=(double s) noexcept {
        for (double& v : data_) v *= s;
        return *this;
    }

    // this += s * o
    void axpy(double s, const Matrix& o) {
        require_same(o, "axpy");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
    }

private:
    void require_same(const Matrix& o, const char* op) const {
        if (!same_shape(o))
            throw ShapeError(std::string("Matrix ") + op + ": " + shape_string() + " vs " +
                             o.shape_string());
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

inline Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
inline Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
inline Matrix operator*(double s, Matrix a) { return a *= s; }

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + a.shape_string() + " x " + b.shape_string());
    Matrix out(a.rows(), b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double* orow = &out(i, 0);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a(i, p);
            if (av == 0.0) continue;
            const double* brow = b.row_span(p).data();
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

// aᵀ·b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw ShapeError("matmul_tn: " + a.shape_string() + "^T x " + b.shape_string());
    Matrix out(a.cols(), b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double av = a(r, i);
            if (av == 0.0) continue;
            double* orow = &out(i, 0);
            const double* brow = b.row_span(r).data();
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b))
        throw ShapeError("hadamard: " + a.shape_string() + " vs " + b.shape_string());
    Matrix out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

inline double dot(const Matrix& a, const Matrix& b) {
    if (a.size() != b.size())
        throw ShapeError("dot: " + a.shape_string() + " vs " + b.shape_string());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double frobenius_norm(const Matrix& a) { return std::sqrt(dot(a, a)); }

inline double trace(const Matrix& a) {
    double t = 0.0;
    for (std::size_t i = 0; i < std::min(a.rows(), a.cols()); ++i) t += a(i, i);
    return t;
}

// ‖a − b‖_F / ‖b‖_F, falling back to the absolute difference when b = 0.
inline double relative_difference(const Matrix& a, const Matrix& b) {
    const double denom = frobenius_norm(b);
    const double diff = frobenius_norm(a - b);
    return denom > 0.0 ? diff / denom : diff;
}

inline double max_abs_difference(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_difference: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline bool all_finite(const Matrix& a) {
    return std::all_of(a.values().begin(), a.values().end(),
                       [](double v) { return std::isfinite(v); });
}

inline double asymmetry(const Matrix& c) {
    if (c.rows() != c.cols()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < c.rows(); ++i)
        for (std::size_t j = i + 1; j < c.cols(); ++j) m = std::max(m, std::abs(c(i, j) - c(j, i)));
    return m;
}

struct EigenDecomposition {
    Matrix vectors;               // columns are orthonormal eigenvectors
    std::vector<double> values;   // sorted descending
};

// Symmetric eigendecomposition by cyclic Jacobi rotations.
//
// Eigenvalues come back sorted descending (ties keep the original diagonal
// order). Each eigenvector is sign-normalized so that its largest-magnitude
// component is positive, which makes the output a deterministic function of
// the input.
inline EigenDecomposition sym_eig(const Matrix& c, double symmetry_tol = 1e-10) {
    if (c.rows() != c.cols()) throw ContractError("sym_eig: matrix is not square");
    const std::size_t n = c.rows();
    double scale = 0.0;
    for (double v : c.values()) scale = std::max(scale, std::abs(v));
    if (asymmetry(c) > symmetry_tol * std::max(1.0, scale))
        throw ContractError("sym_eig: matrix is not symmetric");

    Matrix a = c;
    Matrix v = Matrix::identity(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (a(i, j) + a(j, i));

    constexpr int kMaxSweeps = 100;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double off = 0.0, diag = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            diag += a(i, i) * a(i, i);
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        }
        if (off == 0.0 || off <= 1e-32 * diag) break;

        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double app = a(p, p), aqq = a(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double cs = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * cs;

                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = cs * akp - sn * akq;
                    a(k, q) = sn * akp + cs * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = cs * apk - sn * aqk;
                    a(q, k) = sn * apk + cs * aqk;
                }
                a(p, q) = a(q, p) = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = cs * vkp - sn * vkq;
                    v(k, q) = sn * vkp + cs * vkq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

    EigenDecomposition out{Matrix(n, n), std::vector<double>(n)};
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        out.values[j] = a(src, src);
        std::size_t pivot = 0;
        for (std::size_t k = 1; k < n; ++k)
            if (std::abs(v(k, src)) > std::abs(v(pivot, src)) + 1e-15) pivot = k;
        const double sign = v(pivot, src) < 0 ? -1.0 : 1.0;
        for (std::size_t k = 0; k < n; ++k) out.vectors(k, j) = sign * v(k, src);
    }
    return out;
}

// Cholesky factorization a = L·Lᵀ. Throws SingularityError on a non-positive pivot.
inline Matrix cholesky(const Matrix& a) {
    if (a.rows() != a.cols()) throw ShapeError("cholesky: matrix is not square");
    const std::size_t n = a.rows();
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > 0.0))
            throw SingularityError("cholesky: non-positive pivot at index " + std::to_string(j));
        const double ljj = std::sqrt(d);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / ljj;
        }
    }
    return l;
}

// Solves a·X = b for symmetric positive definite a.
inline Matrix chol_solve(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows())
        throw ShapeError("chol_solve: " + a.shape_string() + " vs rhs " + b.shape_string());
    const Matrix l = cholesky(a);
    const std::size_t n = a.rows(), m = b.cols();
    Matrix x = b;
    for (std::size_t c = 0; c < m; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, c);
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            double s = x(ii, c);
            for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x(k, c);
            x(ii, c) = s / l(ii, ii);
        }
    }
    return x;
}

// chol_solve with a diagonal ridge retried on singular systems:
// ε = 1e-10·trace(a)/dim, multiplied by 100 per retry, at most `retries` retries.
// `ridge_used` reports the ridge finally applied (0 when none was needed).
inline Matrix chol_solve_ridged(const Matrix& a, const Matrix& b, double* ridge_used = nullptr,
                                int retries = 3) {
    try {
        Matrix x = chol_solve(a, b);
        if (ridge_used) *ridge_used = 0.0;
        return x;
    } catch (const SingularityError&) {
        if (retries <= 0) throw;
    }
    const double dim = static_cast<double>(std::max<std::size_t>(a.rows(), 1));
    double eps = 1e-10 * std::abs(trace(a)) / dim;
    if (eps == 0.0) eps = 1e-10;
    for (int attempt = 0; attempt < retries; ++attempt, eps *= 100.0) {
        Matrix shifted = a;
        for (std::size_t i = 0; i < a.rows(); ++i) shifted(i, i) += eps;
        try {
            Matrix x = chol_solve(shifted, b);
            if (ridge_used) *ridge_used = eps;
            return x;
        } catch (const SingularityError&) {
        }
    }
    throw SingularityError("chol_solve: system remains singular after ridge retries");
}

// Dense Kronecker product a ⊗ g. Under the row-stacking vec convention used
// throughout, (a ⊗ g)·vec(W) = vec(a·W·g) for symmetric a (d×d), g (k×k).
inline Matrix kron_dense(const Matrix& a, const Matrix& g, std::size_t max_entries = 1u << 26) {
    const std::size_t rows = a.rows() * g.rows(), cols = a.cols() * g.cols();
    if (rows != 0 && cols > max_entries / rows)
        throw CapacityError("kron_dense: output " + std::to_string(rows) + "x" +
                            std::to_string(cols) + " exceeds the size cap");
    Matrix out(rows, cols);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double aij = a(i, j);
            for (std::size_t p = 0; p < g.rows(); ++p)
                for (std::size_t q = 0; q < g.cols(); ++q)
                    out(i * g.rows() + p, j * g.cols() + q) = aij * g(p, q);
        }
    return out;
}

// Row-stacking vectorization: vec(W)[i·k + j] = W(i, j), returned as a column.
inline Matrix vec(const Matrix& w) { return Matrix(w.size(), 1, w.storage()); }

inline Matrix unvec(const Matrix& v, std::size_t rows, std::size_t cols) {
    if (v.size() != rows * cols) throw ShapeError("unvec: size mismatch");
    return Matrix(rows, cols, v.storage());
}

inline Matrix outer(std::span<const double> u, std::span<const double> v) {
    Matrix out(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) out(i, j) = u[i] * v[j];
    return out;
}

}  // namespace mats
