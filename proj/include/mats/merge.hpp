// SPDX-License-Identifier: Apache-2.0
#pragma once

// Closed-form and heuristic merges: simple averaging, Task Arithmetic,
// TIES-Merging, diagonal Fisher merging and RegMean, plus the task-subspace
// decomposition C = Q·Λ·Qᵀ used for diagnostics.
//
// All methods sum models in a canonical order (task name, then parameter
// values) so outputs are bitwise independent of the caller's model order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mats/checkpoint.hpp"
#include "mats/error.hpp"
#include "mats/tensor.hpp"

namespace mats {

struct MergeHyperparams {
    double lambda = 1.0;              // Task Arithmetic / TIES task-vector scale
    double ties_trim_fraction = 0.8;  // fraction of each task vector zeroed by TIES
    double regmean_gamma = 0.9;       // off-diagonal Gram scale for closed-form RegMean
    std::optional<double> epsilon;    // absolute Fisher ridge; nullopt ⇒ relative default
    double epsilon_rel = 1e-12;       // default ridge = epsilon_rel · mean Fisher magnitude

    void validate() const {
        if (!(ties_trim_fraction > 0.0 && ties_trim_fraction < 1.0))
            throw ConfigError("ties_trim_fraction must lie in (0,1)");
        if (!(regmean_gamma > 0.0 && regmean_gamma <= 1.0))
            throw ConfigError("regmean_gamma must lie in (0,1]");
        if (epsilon && *epsilon < 0.0) throw ConfigError("epsilon must be non-negative");
    }
};

enum class MergeMethod { average, task_arithmetic, ties, diag_fisher, regmean };

inline const char* to_string(MergeMethod m) {
    switch (m) {
        case MergeMethod::average: return "simple_average";
        case MergeMethod::task_arithmetic: return "task_arithmetic";
        case MergeMethod::ties: return "ties";
        case MergeMethod::diag_fisher: return "diag_fisher";
        default: return "regmean";
    }
}

inline MergeMethod parse_merge_method(const std::string& s) {
    if (s == "simple_average" || s == "average" || s == "averaging") return MergeMethod::average;
    if (s == "task_arithmetic") return MergeMethod::task_arithmetic;
    if (s == "ties") return MergeMethod::ties;
    if (s == "diag_fisher" || s == "diagonal_fisher") return MergeMethod::diag_fisher;
    if (s == "regmean") return MergeMethod::regmean;
    throw ConfigError("unknown merge method '" + s + "'");
}

namespace detail {

inline bool checkpoint_values_less(const Checkpoint& a, const Checkpoint& b) {
    auto ia = a.entries.begin();
    auto ib = b.entries.begin();
    for (; ia != a.entries.end() && ib != b.entries.end(); ++ia, ++ib) {
        const auto& va = ia->second.value.storage();
        const auto& vb = ib->second.value.storage();
        if (va != vb) return std::lexicographical_compare(va.begin(), va.end(), vb.begin(), vb.end());
    }
    return false;
}

inline Checkpoint merged_shell(const Checkpoint& like, const std::string& method) {
    Checkpoint out;
    for (const auto& [name, p] : like.entries) out.entries[name] = Param{p.role, Matrix(p.value.rows(), p.value.cols())};
    out.provenance["task"] = "merged";
    out.provenance["method"] = method;
    return out;
}

inline const LayerStats& stats_for(const StatsBundle& s, const std::string& name, std::size_t m) {
    const LayerStats* ls = s.find(name);
    if (!ls)
        throw ObjectiveError("statistics for model " + std::to_string(m) + " lack parameter '" + name + "'");
    return *ls;
}

}  // namespace detail

// Indices of `models` sorted by task name, ties broken by parameter values.
inline std::vector<std::size_t> canonical_order(std::span<const Checkpoint> models) {
    std::vector<std::size_t> idx(models.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) {
        const std::string tx = models[x].task(), ty = models[y].task();
        if (tx != ty) return tx < ty;
        return detail::checkpoint_values_less(models[x], models[y]);
    });
    return idx;
}

inline Checkpoint simple_average(std::span<const Checkpoint> models) {
    assert_mergeable(models);
    const auto order = canonical_order(models);
    Checkpoint out = detail::merged_shell(models.front(), "simple_average");
    const double inv_m = 1.0 / static_cast<double>(models.size());
    for (auto& [name, p] : out.entries) {
        for (auto m : order) p.value += models[m].at(name).value;
        p.value *= inv_m;
    }
    return out;
}

// θ_pre + λ·Σ_m (θ_m − θ_pre)
inline Checkpoint task_arithmetic(std::span<const Checkpoint> models, const Checkpoint& pretrained,
                                  double lambda) {
    assert_mergeable(models);
    const Checkpoint both[] = {models.front(), pretrained};
    assert_mergeable(both);
    const auto order = canonical_order(models);
    Checkpoint out = detail::merged_shell(pretrained, "task_arithmetic");
    for (auto& [name, p] : out.entries) {
        const Matrix& pre = pretrained.at(name).value;
        Matrix sum(pre.rows(), pre.cols());
        for (auto m : order) sum += models[m].at(name).value - pre;
        p.value = pre;
        p.value.axpy(lambda, sum);
    }
    return out;
}

// TIES-Merging over the whole flattened task vector of each model:
// trim the smallest trim_fraction entries by magnitude (ties: lower index
// first), elect a per-coordinate sign by larger total mass (ties positive),
// then average the surviving entries that agree with the elected sign.
inline Checkpoint ties_merge(std::span<const Checkpoint> models, const Checkpoint& pretrained, double lambda,
                             double trim_fraction) {
    if (!(trim_fraction > 0.0 && trim_fraction < 1.0))
        throw ConfigError("ties_merge: trim_fraction must lie in (0,1)");
    assert_mergeable(models);
    const Checkpoint both[] = {models.front(), pretrained};
    assert_mergeable(both);
    const auto order = canonical_order(models);

    std::size_t total = 0;
    for (const auto& [_, p] : pretrained.entries) total += p.value.size();
    const std::size_t n_trim =
        std::min(total, static_cast<std::size_t>(std::floor(trim_fraction * static_cast<double>(total) + 1e-9)));

    std::vector<std::vector<double>> tv;
    tv.reserve(models.size());
    for (auto m : order) {
        std::vector<double> t;
        t.reserve(total);
        for (const auto& [name, p] : pretrained.entries) {
            const Matrix& theta = models[m].at(name).value;
            for (std::size_t i = 0; i < theta.size(); ++i) t.push_back(theta[i] - p.value[i]);
        }
        std::vector<std::size_t> idx(total);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return std::abs(t[a]) < std::abs(t[b]); });
        for (std::size_t i = 0; i < n_trim; ++i) t[idx[i]] = 0.0;
        tv.push_back(std::move(t));
    }

    std::vector<double> merged(total, 0.0);
    for (std::size_t i = 0; i < total; ++i) {
        double pos = 0.0, neg = 0.0;
        for (const auto& t : tv) {
            if (t[i] > 0.0) pos += t[i];
            else if (t[i] < 0.0) neg -= t[i];
        }
        const bool positive = pos >= neg;
        double sum = 0.0;
        std::size_t count = 0;
        for (const auto& t : tv) {
            if ((positive && t[i] > 0.0) || (!positive && t[i] < 0.0)) {
                sum += t[i];
                ++count;
            }
        }
        merged[i] = count ? sum / static_cast<double>(count) : 0.0;
    }

    Checkpoint out = detail::merged_shell(pretrained, "ties");
    std::size_t offset = 0;
    for (auto& [name, p] : out.entries) {
        const Matrix& pre = pretrained.at(name).value;
        for (std::size_t i = 0; i < pre.size(); ++i) p.value[i] = pre[i] + lambda * merged[offset + i];
        offset += pre.size();
    }
    return out;
}

// Elementwise (Σ f_m θ_m + ε·θ̄) / (Σ f_m + ε).
inline Matrix diagonal_fisher_merge_param(std::span<const Checkpoint> models,
                                          std::span<const StatsBundle> stats,
                                          std::span<const std::size_t> order, const std::string& name,
                                          const MergeHyperparams& hp) {
    const Matrix& like = models.front().at(name).value;
    Matrix num(like.rows(), like.cols()), den(like.rows(), like.cols()), mean(like.rows(), like.cols());
    double fisher_mass = 0.0;
    for (auto m : order) {
        const Matrix& f = detail::stats_for(stats[m], name, m).diag_fisher;
        const Matrix& theta = models[m].at(name).value;
        if (!f.same_shape(theta))
            throw ObjectiveError("diagonal Fisher for '" + name + "' has shape " + f.shape_string());
        num += hadamard(f, theta);
        den += f;
        mean += theta;
        for (double v : f.values()) fisher_mass += std::abs(v);
    }
    mean *= 1.0 / static_cast<double>(models.size());
    const double eps = hp.epsilon ? *hp.epsilon
                                  : hp.epsilon_rel * fisher_mass /
                                        static_cast<double>(like.size() * models.size());
    Matrix out(like.rows(), like.cols());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double d = den[i] + eps;
        out[i] = d > 0.0 ? (num[i] + eps * mean[i]) / d : mean[i];
    }
    return out;
}

inline void check_aligned(std::span<const Checkpoint> models, std::span<const StatsBundle> stats) {
    assert_mergeable(models);
    if (stats.size() != models.size())
        throw ContractError("statistics list (" + std::to_string(stats.size()) +
                            ") is not aligned with models (" + std::to_string(models.size()) + ")");
}

inline Checkpoint diagonal_fisher_merge(std::span<const Checkpoint> models, std::span<const StatsBundle> stats,
                                        const MergeHyperparams& hp = {}) {
    check_aligned(models, stats);
    const auto order = canonical_order(models);
    Checkpoint out = detail::merged_shell(models.front(), "diag_fisher");
    for (auto& [name, p] : out.entries) p.value = diagonal_fisher_merge_param(models, stats, order, name, hp);
    return out;
}

inline Matrix scale_offdiagonal(const Matrix& g, double gamma) {
    Matrix out = g;
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
            if (i != j) out(i, j) *= gamma;
    return out;
}

// Per linear weight W* = (Σ G̃_m)⁻¹ Σ G̃_m W_m with G̃ the input Gram whose
// off-diagonal entries are scaled by γ. Vector parameters fall back to
// diagonal Fisher merging.
inline Checkpoint regmean_closed_form(std::span<const Checkpoint> models, std::span<const StatsBundle> stats,
                                      const MergeHyperparams& hp = {}) {
    check_aligned(models, stats);
    const auto order = canonical_order(models);
    Checkpoint out = detail::merged_shell(models.front(), "regmean");
    for (auto& [name, p] : out.entries) {
        if (p.role != Role::linear_weight) {
            p.value = diagonal_fisher_merge_param(models, stats, order, name, hp);
            out.provenance["fallback." + name] = "diag_fisher";
            continue;
        }
        const std::size_t d = p.value.rows();
        Matrix a(d, d), b(d, p.value.cols());
        for (auto m : order) {
            const LayerStats& s = detail::stats_for(stats[m], name, m);
            if (!s.input_gram)
                throw ObjectiveError("statistics for '" + name + "' lack input_gram (model " +
                                     std::to_string(m) + ")");
            if (s.input_gram->rows() != d)
                throw ObjectiveError("input_gram for '" + name + "' has shape " + s.input_gram->shape_string());
            const Matrix g = scale_offdiagonal(*s.input_gram, hp.regmean_gamma);
            a += g;
            b += matmul(g, models[m].at(name).value);
        }
        try {
            double ridge = 0.0;
            p.value = chol_solve_ridged(a, b, &ridge);
            if (ridge > 0.0) out.provenance["ridge." + name] = std::to_string(ridge);
        } catch (const SingularityError& e) {
            throw SingularityError("regmean: layer '" + name + "': " + e.what());
        }
    }
    return out;
}

inline Checkpoint merge_closed_form(MergeMethod method, std::span<const Checkpoint> models,
                                    std::span<const StatsBundle> stats, const Checkpoint* pretrained,
                                    const MergeHyperparams& hp) {
    auto need_pre = [&]() -> const Checkpoint& {
        if (!pretrained) throw ContractError(std::string(to_string(method)) + " needs a pretrained checkpoint");
        return *pretrained;
    };
    switch (method) {
        case MergeMethod::average: return simple_average(models);
        case MergeMethod::task_arithmetic: return task_arithmetic(models, need_pre(), hp.lambda);
        case MergeMethod::ties: return ties_merge(models, need_pre(), hp.lambda, hp.ties_trim_fraction);
        case MergeMethod::diag_fisher: return diagonal_fisher_merge(models, stats, hp);
        default: return regmean_closed_form(models, stats, hp);
    }
}

// Task subspace of a covariance C: basis Q and importances Λ with C = Q·Λ·Qᵀ.
inline EigenDecomposition task_subspace(const Matrix& c) { return sym_eig(c); }

// Task subspace of the covariance of data P, C = PᵀP. Λ equals the squared
// singular values of P.
inline EigenDecomposition task_subspace_from_data(const Matrix& p) { return sym_eig(matmul_tn(p, p)); }

}  // namespace mats
