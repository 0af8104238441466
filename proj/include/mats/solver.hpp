// SPDX-License-Identifier: Apache-2.0
#pragma once

// Merging as a linear system. For one parameter θ, every objective defines
// A = Σ_m C_m and b = Σ_m C_m θ_m; the merged value solves A·x = b. A is only
// ever applied to parameter-shaped tensors, never materialized, and the system
// is solved with plain conjugate gradient from a chosen initialization.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mats/checkpoint.hpp"
#include "mats/error.hpp"
#include "mats/merge.hpp"
#include "mats/rng.hpp"
#include "mats/tensor.hpp"

namespace mats {

enum class ObjectiveKind { average, diag_fisher, regmean, block_fisher_kfac, exact_fisher_vector };

inline const char* to_string(ObjectiveKind k) {
    switch (k) {
        case ObjectiveKind::average: return "average";
        case ObjectiveKind::diag_fisher: return "diag_fisher";
        case ObjectiveKind::regmean: return "regmean";
        case ObjectiveKind::block_fisher_kfac: return "block_fisher_kfac";
        default: return "exact_fisher_vector";
    }
}

inline ObjectiveKind parse_objective(const std::string& s) {
    if (s == "average" || s == "simple_average") return ObjectiveKind::average;
    if (s == "diag_fisher" || s == "diagonal_fisher") return ObjectiveKind::diag_fisher;
    if (s == "regmean") return ObjectiveKind::regmean;
    if (s == "block_fisher_kfac" || s == "kfac" || s == "bfm") return ObjectiveKind::block_fisher_kfac;
    if (s == "exact_fisher_vector" || s == "exact_fisher") return ObjectiveKind::exact_fisher_vector;
    throw ConfigError("unknown objective '" + s + "'");
}

// Whether an objective has its own C_m for parameters of this role.
inline bool covers(ObjectiveKind k, Role role) {
    switch (k) {
        case ObjectiveKind::average:
        case ObjectiveKind::diag_fisher: return true;
        case ObjectiveKind::regmean:
        case ObjectiveKind::block_fisher_kfac: return role == Role::linear_weight;
        default: return role == Role::vector;
    }
}

struct LinearSystem {
    std::string param;
    ObjectiveKind kind = ObjectiveKind::average;  // objective actually used
    bool fallback = false;                        // true when the requested one did not cover the parameter
    std::size_t rows = 0, cols = 0;
    std::function<Matrix(const Matrix&)> apply;
    Matrix rhs;

    std::size_t dim() const { return rows * cols; }
};

// Builds A and b for one parameter. Parameters outside the objective's reach
// use the diagonal Fisher system instead (recorded in `fallback`).
inline LinearSystem build_system(ObjectiveKind requested, const std::string& name,
                                 std::span<const Checkpoint> models, std::span<const StatsBundle> stats) {
    if (models.empty()) throw ContractError("build_system: no models");
    const auto order = canonical_order(models);
    const Param& like = models.front().at(name);
    LinearSystem sys;
    sys.param = name;
    sys.rows = like.value.rows();
    sys.cols = like.value.cols();
    sys.kind = requested;
    if (!covers(requested, like.role)) {
        sys.kind = ObjectiveKind::diag_fisher;
        sys.fallback = true;
    }
    auto stat = [&](std::size_t m, const char* what) -> const LayerStats& {
        if (m >= stats.size())
            throw ObjectiveError("objective " + std::string(to_string(sys.kind)) + ": no statistics for model " +
                                 std::to_string(m) + " (parameter '" + name + "', statistic " + what + ")");
        const LayerStats* s = stats[m].find(name);
        if (!s)
            throw ObjectiveError("objective " + std::string(to_string(sys.kind)) + ": parameter '" + name +
                                 "' lacks statistic " + what + " for model " + std::to_string(m));
        return *s;
    };
    auto missing = [&](const char* what) {
        return ObjectiveError("objective " + std::string(to_string(sys.kind)) + ": parameter '" + name +
                              "' lacks statistic " + what);
    };

    sys.rhs = Matrix(sys.rows, sys.cols);
    switch (sys.kind) {
        case ObjectiveKind::average: {
            const double m_count = static_cast<double>(models.size());
            for (auto m : order) sys.rhs += models[m].at(name).value;
            sys.apply = [m_count](const Matrix& x) {
                Matrix y = x;
                y *= m_count;
                return y;
            };
            break;
        }
        case ObjectiveKind::diag_fisher: {
            Matrix fsum(sys.rows, sys.cols);
            for (auto m : order) {
                const Matrix& f = stat(m, "diag_fisher").diag_fisher;
                if (!f.same_shape(like.value)) throw missing("diag_fisher (shape)");
                fsum += f;
                sys.rhs += hadamard(f, models[m].at(name).value);
            }
            sys.apply = [fsum = std::move(fsum)](const Matrix& x) { return hadamard(fsum, x); };
            break;
        }
        case ObjectiveKind::regmean: {
            Matrix gsum(sys.rows, sys.rows);
            for (auto m : order) {
                const LayerStats& s = stat(m, "input_gram");
                if (!s.input_gram) throw missing("input_gram");
                gsum += *s.input_gram;
                sys.rhs += matmul(*s.input_gram, models[m].at(name).value);
            }
            sys.apply = [gsum = std::move(gsum)](const Matrix& x) { return matmul(gsum, x); };
            break;
        }
        case ObjectiveKind::block_fisher_kfac: {
            std::vector<std::pair<Matrix, Matrix>> factors;
            for (auto m : order) {
                const LayerStats& s = stat(m, "input_gram/outgrad_gram");
                if (!s.input_gram) throw missing("input_gram");
                if (!s.outgrad_gram) throw missing("outgrad_gram");
                sys.rhs += matmul(matmul(*s.input_gram, models[m].at(name).value), *s.outgrad_gram);
                factors.emplace_back(*s.input_gram, *s.outgrad_gram);
            }
            // (A_m ⊗ G_m)·vec(X) = vec(A_m·X·G_m)
            sys.apply = [factors = std::move(factors), r = sys.rows, c = sys.cols](const Matrix& x) {
                Matrix y(r, c);
                for (const auto& [a, g] : factors) y += matmul(matmul(a, x), g);
                return y;
            };
            break;
        }
        case ObjectiveKind::exact_fisher_vector: {
            const std::size_t n = like.value.size();
            Matrix fsum(n, n);
            for (auto m : order) {
                const LayerStats& s = stat(m, "exact_fisher");
                if (!s.exact_fisher) throw missing("exact_fisher");
                fsum += *s.exact_fisher;
                // θ is a 1×n row; F symmetric ⇒ (F·θᵀ)ᵀ = θ·F
                sys.rhs += matmul(models[m].at(name).value, *s.exact_fisher);
            }
            sys.apply = [fsum = std::move(fsum)](const Matrix& x) {
                return matmul(Matrix(1, x.size(), x.storage()), fsum);
            };
            break;
        }
    }
    return sys;
}

// Materializes A column by column (tests and small diagnostics only).
inline Matrix dense_operator(const LinearSystem& sys) {
    const std::size_t n = sys.dim();
    Matrix a(n, n);
    Matrix e(sys.rows, sys.cols);
    for (std::size_t j = 0; j < n; ++j) {
        e[j] = 1.0;
        const Matrix col = sys.apply(e);
        for (std::size_t i = 0; i < n; ++i) a(i, j) = col[i];
        e[j] = 0.0;
    }
    return a;
}

struct SystemCheck {
    double linearity = 0.0;     // max ‖A(αu+βv) − αAu − βAv‖ / scale
    double self_adjoint = 0.0;  // max |⟨u,Av⟩ − ⟨Au,v⟩| / scale
    double min_curvature = 0.0; // min ⟨v,Av⟩ / ‖v‖²
    bool ok(double tol = 1e-8) const { return linearity <= tol && self_adjoint <= tol && min_curvature >= -tol; }
};

// Random-probe checks of linearity, self-adjointness and positive semi-definiteness.
inline SystemCheck check_system(const LinearSystem& sys, std::uint64_t seed, int probes = 10) {
    Rng rng(seed);
    SystemCheck out{0.0, 0.0, std::numeric_limits<double>::infinity()};
    auto random = [&] {
        Matrix m(sys.rows, sys.cols);
        for (double& v : m.values()) v = rng.normal();
        return m;
    };
    for (int i = 0; i < probes; ++i) {
        const Matrix u = random(), v = random();
        const double alpha = rng.normal(), beta = rng.normal();
        const Matrix au = sys.apply(u), av = sys.apply(v);
        Matrix comb = u;
        comb *= alpha;
        comb.axpy(beta, v);
        Matrix expect = au;
        expect *= alpha;
        expect.axpy(beta, av);
        const double scale = std::max({frobenius_norm(expect), frobenius_norm(au), frobenius_norm(av), 1e-300});
        out.linearity = std::max(out.linearity, frobenius_norm(sys.apply(comb) - expect) / scale);
        const double uav = dot(u, av), auv = dot(au, v);
        const double sa_scale = std::max(frobenius_norm(u) * frobenius_norm(av), 1e-300);
        out.self_adjoint = std::max(out.self_adjoint, std::abs(uav - auv) / sa_scale);
        out.min_curvature = std::min(out.min_curvature, dot(v, av) / dot(v, v));
    }
    return out;
}

struct CGConfig {
    std::size_t max_iters = 100;
    double rel_residual_tol = 1e-10;
    double curvature_guard = 1e-14;  // stop when pᵀAp ≤ guard·‖p‖²

    void validate() const {
        if (max_iters < 1) throw ConfigError("cg: max_iters must be at least 1");
    }
};

enum class CGTermination { converged, max_iters, degenerate_curvature };

inline const char* to_string(CGTermination t) {
    switch (t) {
        case CGTermination::converged: return "converged";
        case CGTermination::max_iters: return "max_iters";
        default: return "degenerate_curvature";
    }
}

// Entry 0 describes the initial point; entry t the iterate after t updates.
struct CGTrace {
    std::vector<double> residual_norms;
    std::vector<double> objective_values;
    std::size_t iterations = 0;
    CGTermination termination = CGTermination::max_iters;
};

struct CGResult {
    Matrix x;
    CGTrace trace;
};

// φ(x) = ½xᵀAx − xᵀb
inline double quadratic_objective_value(const LinearSystem& sys, const Matrix& x) {
    return 0.5 * dot(x, sys.apply(x)) - dot(x, sys.rhs);
}

inline CGResult cg_solve(const LinearSystem& sys, const Matrix& x0, const CGConfig& cfg) {
    cfg.validate();
    if (x0.size() != sys.dim()) throw ShapeError("cg_solve: initial point has wrong size");
    CGResult res{Matrix(sys.rows, sys.cols, x0.storage()), {}};
    Matrix& x = res.x;
    const Matrix& b = sys.rhs;
    Matrix r = b - sys.apply(x);
    Matrix p = r;
    double rr = dot(r, r);
    const double bnorm = frobenius_norm(b);
    const double threshold = cfg.rel_residual_tol * (bnorm > 0.0 ? bnorm : 1.0);

    // With r = b − Ax, φ(x) = −½·xᵀ(b + r).
    auto record = [&] {
        res.trace.residual_norms.push_back(std::sqrt(rr));
        res.trace.objective_values.push_back(-0.5 * (dot(x, b) + dot(x, r)));
    };
    record();
    if (std::sqrt(rr) <= threshold) {
        res.trace.termination = CGTermination::converged;
        return res;
    }
    for (std::size_t t = 0; t < cfg.max_iters; ++t) {
        const Matrix ap = sys.apply(p);
        const double pap = dot(p, ap);
        if (!std::isfinite(pap))
            throw NumericalError("cg_solve: non-finite curvature at iteration " + std::to_string(t) +
                                 " for '" + sys.param + "'");
        if (pap <= cfg.curvature_guard * dot(p, p)) {
            res.trace.termination = CGTermination::degenerate_curvature;
            return res;
        }
        const double alpha = rr / pap;
        x.axpy(alpha, p);
        r.axpy(-alpha, ap);
        const double rr_next = dot(r, r);
        if (!std::isfinite(rr_next) || !all_finite(x))
            throw NumericalError("cg_solve: NaN in iterate at iteration " + std::to_string(t + 1) +
                                 " for '" + sys.param + "'");
        const double beta = rr_next / rr;
        rr = rr_next;
        ++res.trace.iterations;
        record();
        if (std::sqrt(rr) <= threshold) {
            res.trace.termination = CGTermination::converged;
            return res;
        }
        p *= beta;
        p += r;
    }
    res.trace.termination = CGTermination::max_iters;
    return res;
}

// RegMean's per-layer objective Σ_m (1/N_m)·‖O_m − Z_m·W‖².
inline double regmean_objective_value(std::span<const Matrix> inputs, std::span<const Matrix> outputs,
                                      const Matrix& w) {
    if (inputs.size() != outputs.size()) throw ShapeError("regmean_objective_value: list sizes differ");
    double total = 0.0;
    for (std::size_t m = 0; m < inputs.size(); ++m) {
        const Matrix diff = outputs[m] - matmul(inputs[m], w);
        total += dot(diff, diff) / static_cast<double>(inputs[m].rows());
    }
    return total;
}

enum class InitMethod { average, task_arithmetic, ties, diag_fisher, regmean, pretrained, zero, provided };

inline const char* to_string(InitMethod m) {
    switch (m) {
        case InitMethod::average: return "average";
        case InitMethod::task_arithmetic: return "task_arithmetic";
        case InitMethod::ties: return "ties";
        case InitMethod::diag_fisher: return "diag_fisher";
        case InitMethod::regmean: return "regmean";
        case InitMethod::pretrained: return "pretrained";
        case InitMethod::zero: return "zero";
        default: return "provided";
    }
}

inline InitMethod parse_init(const std::string& s) {
    if (s == "average" || s == "simple_average") return InitMethod::average;
    if (s == "task_arithmetic") return InitMethod::task_arithmetic;
    if (s == "ties") return InitMethod::ties;
    if (s == "diag_fisher") return InitMethod::diag_fisher;
    if (s == "regmean") return InitMethod::regmean;
    if (s == "pretrained") return InitMethod::pretrained;
    if (s == "zero") return InitMethod::zero;
    if (s == "provided") return InitMethod::provided;
    throw ConfigError("unknown init method '" + s + "'");
}

struct MatsConfig {
    ObjectiveKind objective = ObjectiveKind::regmean;
    InitMethod init = InitMethod::task_arithmetic;
    MergeHyperparams init_hyperparams;
    CGConfig cg;
};

struct MatsResult {
    Checkpoint merged;
    std::map<std::string, CGTrace> traces;
    std::map<std::string, ObjectiveKind> objective_used;
};

inline Checkpoint compute_init(InitMethod init, std::span<const Checkpoint> models,
                               std::span<const StatsBundle> stats, const Checkpoint* pretrained,
                               const Checkpoint* provided, const MergeHyperparams& hp) {
    switch (init) {
        case InitMethod::average: return simple_average(models);
        case InitMethod::task_arithmetic:
            return merge_closed_form(MergeMethod::task_arithmetic, models, stats, pretrained, hp);
        case InitMethod::ties: return merge_closed_form(MergeMethod::ties, models, stats, pretrained, hp);
        case InitMethod::diag_fisher: return diagonal_fisher_merge(models, stats, hp);
        case InitMethod::regmean: return regmean_closed_form(models, stats, hp);
        case InitMethod::pretrained:
            if (!pretrained) throw ContractError("init 'pretrained' needs a pretrained checkpoint");
            return *pretrained;
        case InitMethod::zero: {
            Checkpoint z = models.front();
            for (auto& [_, p] : z.entries) p.value = Matrix(p.value.rows(), p.value.cols());
            return z;
        }
        default:
            if (!provided) throw ContractError("init 'provided' needs an initial checkpoint");
            return *provided;
    }
}

// One MaTS merge: per parameter, build the objective's system and run CG from
// the initialization's value of that parameter.
inline MatsResult mats_merge(std::span<const Checkpoint> models, std::span<const StatsBundle> stats,
                             const MatsConfig& cfg, const Checkpoint* pretrained = nullptr,
                             const Checkpoint* provided = nullptr) {
    assert_mergeable(models);
    const Checkpoint init = compute_init(cfg.init, models, stats, pretrained, provided, cfg.init_hyperparams);
    const Checkpoint both[] = {models.front(), init};
    assert_mergeable(both);

    MatsResult res;
    res.merged.provenance["task"] = "merged";
    res.merged.provenance["method"] = "mats";
    res.merged.provenance["init"] = to_string(cfg.init);
    res.merged.provenance["objective"] = to_string(cfg.objective);
    res.merged.provenance["cg_max_iters"] = std::to_string(cfg.cg.max_iters);
    for (const auto& [name, p] : models.front().entries) {
        const LinearSystem sys = build_system(cfg.objective, name, models, stats);
        CGResult solved = cg_solve(sys, init.at(name).value, cfg.cg);
        res.merged.entries[name] = Param{p.role, std::move(solved.x)};
        res.merged.provenance["iterations." + name] = std::to_string(solved.trace.iterations);
        if (sys.fallback) res.merged.provenance["fallback." + name] = to_string(sys.kind);
        res.traces[name] = std::move(solved.trace);
        res.objective_used[name] = sys.kind;
    }
    return res;
}

struct RoundSpec {
    ObjectiveKind objective = ObjectiveKind::regmean;
    CGConfig cg;
};

// Chained MaTS rounds: the first starts from `first_init`, each later round
// starts from the previous round's output. Returns the final round's result.
inline MatsResult multi_round(std::span<const Checkpoint> models, std::span<const StatsBundle> stats,
                              InitMethod first_init, const MergeHyperparams& init_hp,
                              std::span<const RoundSpec> recipe, const Checkpoint* pretrained = nullptr,
                              const Checkpoint* provided = nullptr) {
    if (recipe.empty()) throw ConfigError("multi_round: empty recipe");
    MatsResult current;
    for (std::size_t i = 0; i < recipe.size(); ++i) {
        MatsConfig cfg{recipe[i].objective, i == 0 ? first_init : InitMethod::provided, init_hp, recipe[i].cg};
        const Checkpoint prev = i == 0 ? Checkpoint{} : current.merged;
        current = mats_merge(models, stats, cfg, pretrained, i == 0 ? provided : &prev);
        current.merged.provenance["round"] = std::to_string(i + 1);
    }
    current.merged.provenance["rounds"] = std::to_string(recipe.size());
    return current;
}

// JSON sidecar: per parameter, iterations, final residual, termination and φ values.
inline nlohmann::json trace_sidecar(const MatsResult& res) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [name, t] : res.traces) {
        out[name] = {{"iterations", t.iterations},
                     {"final_residual", t.residual_norms.empty() ? 0.0 : t.residual_norms.back()},
                     {"termination", to_string(t.termination)},
                     {"objective", to_string(res.objective_used.at(name))},
                     {"residual_norms", t.residual_norms},
                     {"phi", t.objective_values}};
    }
    return out;
}

}  // namespace mats
