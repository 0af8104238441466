// SPDX-License-Identifier: Apache-2.0
#pragma once

// Test-only reference computations. Nothing here calls into the code paths
// it is used to check: products are triple loops, gradients are central
// differences, checksums are bitwise.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mats/checkpoint.hpp"
#include "mats/mlp.hpp"
#include "mats/rng.hpp"
#include "mats/tensor.hpp"

namespace mats::oracle {

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
            out(i, j) = s;
        }
    return out;
}

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (double& v : m.values()) v = scale * rng.normal();
    return m;
}

// AᵀA + shift·I
inline Matrix random_spd(Rng& rng, std::size_t n, double shift = 0.1) {
    const Matrix a = random_matrix(rng, n + 2, n);
    Matrix s = naive_matmul(transpose(a), a);
    for (std::size_t i = 0; i < n; ++i) s(i, i) += shift;
    return s;
}

// Wishart(3n)/(3n) + I: eigenvalues stay within roughly [1.2, 4], so plain CG
// reaches tight tolerances in about n steps even in floating point.
inline Matrix random_well_conditioned_spd(Rng& rng, std::size_t n) {
    const Matrix a = random_matrix(rng, 3 * n, n);
    Matrix s = naive_matmul(transpose(a), a);
    s *= 1.0 / static_cast<double>(3 * n);
    for (std::size_t i = 0; i < n; ++i) s(i, i) += 1.0;
    return s;
}

inline Matrix random_symmetric(Rng& rng, std::size_t n) {
    Matrix m = random_matrix(rng, n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < i; ++j) m(i, j) = m(j, i);
    return m;
}

// Bitwise CRC-32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
inline std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::uint8_t b : bytes) {
        crc ^= b;
        for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
    }
    return ~crc;
}

// Central finite-difference gradient of f with respect to every entry of
// every parameter.
inline Checkpoint finite_difference_gradient(const Checkpoint& params,
                                             const std::function<double(const Checkpoint&)>& f,
                                             double h = 1e-6) {
    Checkpoint grads;
    Checkpoint probe = params;
    for (const auto& [name, p] : params.entries) {
        Param g{p.role, Matrix(p.value.rows(), p.value.cols())};
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value[i];
            probe.at(name).value[i] = orig + h;
            const double up = f(probe);
            probe.at(name).value[i] = orig - h;
            const double down = f(probe);
            probe.at(name).value[i] = orig;
            g.value[i] = (up - down) / (2.0 * h);
        }
        grads.entries[name] = std::move(g);
    }
    return grads;
}

// Five-point stencil: truncation error O(h^4), so h can be large enough that
// rounding in f stays far below the gradient scale.
inline Checkpoint five_point_gradient(const Checkpoint& params, const std::function<double(const Checkpoint&)>& f,
                                      double h = 1e-3) {
    Checkpoint grads;
    Checkpoint probe = params;
    for (const auto& [name, p] : params.entries) {
        Param g{p.role, Matrix(p.value.rows(), p.value.cols())};
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value[i];
            auto at = [&](double offset) {
                probe.at(name).value[i] = orig + offset;
                return f(probe);
            };
            g.value[i] = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12.0 * h);
            probe.at(name).value[i] = orig;
        }
        grads.entries[name] = std::move(g);
    }
    return grads;
}

// Scalar-loop accuracy: argmax with lowest-index tie-break, computed from
// logits produced one example at a time.
inline double loop_accuracy(const MlpSpec& spec, const Checkpoint& params, const TaskDataset& ds) {
    std::size_t correct = 0;
    for (std::size_t r = 0; r < ds.size(); ++r) {
        std::vector<double> act(ds.inputs.row_span(r).begin(), ds.inputs.row_span(r).end());
        for (std::size_t l = 0; l < spec.layers(); ++l) {
            if (spec.use_bias) act.push_back(1.0);
            const Matrix& w = params.at(MlpSpec::weight_name(l)).value;
            std::vector<double> out(w.cols(), 0.0);
            for (std::size_t j = 0; j < w.cols(); ++j) {
                for (std::size_t i = 0; i < act.size(); ++i) out[j] += act[i] * w(i, j);
                if (spec.use_scales) out[j] *= params.at(MlpSpec::scale_name(l)).value[j];
                if (l + 1 < spec.layers()) out[j] = std::tanh(out[j]);
            }
            act = std::move(out);
        }
        std::size_t best = 0;
        for (std::size_t c = 1; c < act.size(); ++c)
            if (act[c] > act[best]) best = c;
        correct += best == ds.labels[r];
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

inline double max_relative_error(const Matrix& analytic, const Matrix& reference, double floor = 1e-8) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(reference[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - reference[i]) / denom);
    }
    return worst;
}

}  // namespace mats::oracle
