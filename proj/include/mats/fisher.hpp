// SPDX-License-Identifier: Apache-2.0
#pragma once

// Curvature statistics for merging: diagonal Fisher (empirical or true),
// K-FAC factors per linear layer, and exact Fishers for vector parameters.
//
// Every statistic is a streaming sum over fixed-size batches taken in
// ascending order, divided by N once at the end.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mats/checkpoint.hpp"
#include "mats/error.hpp"
#include "mats/mlp.hpp"
#include "mats/rng.hpp"
#include "mats/tensor.hpp"

namespace mats {

struct KfacFactors {
    Matrix input_gram;    // ZᵀZ/N
    Matrix outgrad_gram;  // O′ᵀO′/N
};

struct StatsConfig {
    FisherMode mode = FisherMode::empirical;
    std::uint64_t seed = 0;               // label sampling for true-mode K-FAC
    std::size_t batch = 256;
    std::size_t exact_fisher_cap = 4096;  // max vector length for exact Fishers
    bool exact_vector_fisher = true;
    // nullopt ⇒ every parameter; an empty list ⇒ an empty bundle.
    std::optional<std::vector<std::string>> parameters;
};

namespace detail {

// Backward passes needed for one batch: for empirical mode a single pass on
// the ground-truth labels (weight 1); for true mode one pass per class, each
// example weighted by p(class|x).
struct WeightedCapture {
    CaptureRecord capture;
    std::vector<double> weights;
};

inline std::vector<WeightedCapture> label_captures(const MlpSpec& spec, const Checkpoint& params,
                                                   const ForwardCache& cache,
                                                   std::span<const std::size_t> labels,
                                                   FisherMode mode) {
    std::vector<WeightedCapture> out;
    const std::size_t n = labels.size();
    if (mode == FisherMode::empirical) {
        out.push_back({backward(spec, params, cache, labels).capture, std::vector<double>(n, 1.0)});
        return out;
    }
    const Matrix p = softmax(cache.logits);
    for (std::size_t c = 0; c < spec.classes(); ++c) {
        std::vector<std::size_t> targets(n, c);
        std::vector<double> w(n);
        for (std::size_t r = 0; r < n; ++r) w[r] = p(r, c);
        out.push_back({backward(spec, params, cache, targets).capture, std::move(w)});
    }
    return out;
}

// Σ_r w_r · (a_r)² (b_r)²ᵀ, accumulated into `acc`.
inline void accumulate_squared_outer(Matrix& acc, const Matrix& a, const Matrix& b,
                                     std::span<const double> w) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double ai = w[r] * a(r, i) * a(r, i);
            if (ai == 0.0) continue;
            double* row = &acc(i, 0);
            for (std::size_t j = 0; j < b.cols(); ++j) row[j] += ai * b(r, j) * b(r, j);
        }
    }
}

inline void accumulate_gram(Matrix& acc, const Matrix& x, std::span<const double> w = {}) {
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double wr = w.empty() ? 1.0 : w[r];
        for (std::size_t i = 0; i < x.cols(); ++i) {
            const double xi = wr * x(r, i);
            if (xi == 0.0) continue;
            double* row = &acc(i, 0);
            for (std::size_t j = 0; j < x.cols(); ++j) row[j] += xi * x(r, j);
        }
    }
}

template <typename Fn>
void for_each_batch(const TaskDataset& ds, std::size_t batch, Fn&& fn) {
    if (batch == 0) batch = ds.size();
    for (std::size_t start = 0; start < ds.size(); start += batch) {
        const std::size_t n = std::min(batch, ds.size() - start);
        Matrix x(n, ds.inputs.cols());
        for (std::size_t r = 0; r < n; ++r)
            std::copy_n(ds.inputs.row_span(start + r).begin(), ds.inputs.cols(), x.row_span(r).begin());
        std::span<const std::size_t> labels(ds.labels.data() + start, n);
        fn(x, labels);
    }
}

}  // namespace detail

// Per-parameter diagonal Fisher, shaped like each parameter.
inline std::map<std::string, Matrix> diagonal_fisher(const MlpSpec& spec, const Checkpoint& params,
                                                     const TaskDataset& ds, FisherMode mode,
                                                     std::size_t batch = 256) {
    ds.validate();
    std::map<std::string, Matrix> acc;
    for (const auto& [name, p] : params.entries) acc[name] = Matrix(p.value.rows(), p.value.cols());
    detail::for_each_batch(ds, batch, [&](const Matrix& x, std::span<const std::size_t> labels) {
        const ForwardCache cache = forward(spec, params, x);
        for (const auto& wc : detail::label_captures(spec, params, cache, labels, mode)) {
            for (std::size_t l = 0; l < spec.layers(); ++l) {
                detail::accumulate_squared_outer(acc[MlpSpec::weight_name(l)], wc.capture.inputs[l],
                                                 wc.capture.outgrad[l], wc.weights);
                if (spec.use_scales) {
                    Matrix& s = acc[MlpSpec::scale_name(l)];
                    const Matrix& g = wc.capture.scale_grad[l];
                    for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < g.cols(); ++c)
                            s[c] += wc.weights[r] * g(r, c) * g(r, c);
                }
            }
        }
    });
    const double inv_n = 1.0 / static_cast<double>(ds.size());
    for (auto& [_, m] : acc) m *= inv_n;
    return acc;
}

// K-FAC factors per linear weight. True mode draws one label per example from
// p(y|x) using a stream seeded by `seed`.
inline std::map<std::string, KfacFactors> kfac_factors(const MlpSpec& spec, const Checkpoint& params,
                                                       const TaskDataset& ds, FisherMode mode,
                                                       std::uint64_t seed = 0,
                                                       std::size_t batch = 256) {
    ds.validate();
    std::map<std::string, KfacFactors> acc;
    for (std::size_t l = 0; l < spec.layers(); ++l)
        acc[MlpSpec::weight_name(l)] = {Matrix(spec.weight_rows(l), spec.weight_rows(l)),
                                        Matrix(spec.layer_dims[l].second, spec.layer_dims[l].second)};
    Rng rng(seed);
    detail::for_each_batch(ds, batch, [&](const Matrix& x, std::span<const std::size_t> labels) {
        const ForwardCache cache = forward(spec, params, x);
        std::vector<std::size_t> targets(labels.begin(), labels.end());
        if (mode == FisherMode::true_fisher) {
            const Matrix p = softmax(cache.logits);
            for (std::size_t r = 0; r < targets.size(); ++r) targets[r] = rng.categorical(p.row_span(r));
        }
        const CaptureRecord cap = backward(spec, params, cache, targets).capture;
        for (std::size_t l = 0; l < spec.layers(); ++l) {
            KfacFactors& f = acc[MlpSpec::weight_name(l)];
            detail::accumulate_gram(f.input_gram, cap.inputs[l]);
            detail::accumulate_gram(f.outgrad_gram, cap.outgrad[l]);
        }
    });
    const double inv_n = 1.0 / static_cast<double>(ds.size());
    for (auto& [_, f] : acc) {
        f.input_gram *= inv_n;
        f.outgrad_gram *= inv_n;
    }
    return acc;
}

// Exact n×n Fisher of a vector parameter: mean of g·gᵀ over examples (and,
// in true mode, over classes weighted by p(y|x)).
inline Matrix exact_fisher_vector(const MlpSpec& spec, const Checkpoint& params, const TaskDataset& ds,
                                  const std::string& param_name, FisherMode mode,
                                  std::size_t cap = 4096, std::size_t batch = 256) {
    ds.validate();
    const Param& p = params.at(param_name);
    if (p.role != Role::vector)
        throw ContractError("exact_fisher_vector: '" + param_name + "' is not a vector parameter");
    if (p.value.size() > cap)
        throw CapacityError("exact_fisher_vector: '" + param_name + "' has " +
                            std::to_string(p.value.size()) + " entries, cap is " + std::to_string(cap));
    std::size_t layer = spec.layers();
    for (std::size_t l = 0; l < spec.layers(); ++l)
        if (spec.use_scales && MlpSpec::scale_name(l) == param_name) layer = l;
    if (layer == spec.layers()) throw ContractError("exact_fisher_vector: unknown vector '" + param_name + "'");

    Matrix acc(p.value.size(), p.value.size());
    detail::for_each_batch(ds, batch, [&](const Matrix& x, std::span<const std::size_t> labels) {
        const ForwardCache cache = forward(spec, params, x);
        for (const auto& wc : detail::label_captures(spec, params, cache, labels, mode))
            detail::accumulate_gram(acc, wc.capture.scale_grad[layer], wc.weights);
    });
    acc *= 1.0 / static_cast<double>(ds.size());
    return acc;
}

// Dense Fisher of a linear layer from captured Z and O′: the mean over rows of
// vec(z o′ᵀ)·vec(z o′ᵀ)ᵀ under row-stacking vec. Used as a test oracle and
// to check the Fisher/RegMean correspondence, so it takes O′ as given.
inline Matrix exact_layer_fisher(const Matrix& z, const Matrix& oprime, std::size_t max_dim = 4096) {
    if (z.rows() != oprime.rows()) throw ShapeError("exact_layer_fisher: row counts differ");
    const std::size_t d = z.cols(), k = oprime.cols(), n = d * k;
    if (n > max_dim) throw CapacityError("exact_layer_fisher: layer too large for a dense Fisher");
    Matrix acc(n, n);
    Matrix g(1, n);
    for (std::size_t r = 0; r < z.rows(); ++r) {
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < k; ++j) g[i * k + j] = z(r, i) * oprime(r, j);
        detail::accumulate_gram(acc, g);
    }
    acc *= 1.0 / static_cast<double>(z.rows());
    return acc;
}

// All statistics for the requested parameters, computed on `ds` (whose split
// tag is recorded in the bundle).
inline StatsBundle collect_stats(const MlpSpec& spec, const Checkpoint& params, const TaskDataset& ds,
                                 const StatsConfig& cfg) {
    StatsBundle bundle;
    bundle.fisher_mode = cfg.mode;
    bundle.split = to_string(ds.split);
    bundle.example_count = ds.size();
    bundle.provenance["task"] = params.task();
    bundle.provenance["dataset"] = ds.task_name;
    bundle.provenance["seed"] = std::to_string(cfg.seed);
    if (ds.size() == 0) throw ConfigError("collect_stats: empty dataset");

    std::vector<std::string> wanted;
    if (cfg.parameters) {
        wanted = *cfg.parameters;
        for (const auto& w : wanted) params.at(w);
    } else {
        for (const auto& [name, _] : params.entries) wanted.push_back(name);
    }
    if (wanted.empty()) return bundle;

    const auto diag = diagonal_fisher(spec, params, ds, cfg.mode, cfg.batch);
    std::map<std::string, KfacFactors> kfac;
    bool need_kfac = false;
    for (const auto& w : wanted) need_kfac |= params.at(w).role == Role::linear_weight;
    if (need_kfac) kfac = kfac_factors(spec, params, ds, cfg.mode, cfg.seed, cfg.batch);

    for (const auto& name : wanted) {
        LayerStats s;
        s.diag_fisher = diag.at(name);
        s.n_examples = ds.size();
        const Param& p = params.at(name);
        if (p.role == Role::linear_weight) {
            s.input_gram = kfac.at(name).input_gram;
            s.outgrad_gram = kfac.at(name).outgrad_gram;
        } else if (cfg.exact_vector_fisher && p.value.size() <= cfg.exact_fisher_cap) {
            s.exact_fisher = exact_fisher_vector(spec, params, ds, name, cfg.mode, cfg.exact_fisher_cap,
                                                 cfg.batch);
        }
        bundle.layers.emplace(name, std::move(s));
    }
    return bundle;
}

// Checks the LayerStats invariants; returns an empty string when they hold.
inline std::string check_layer_stats(const LayerStats& s, double tol = 1e-8) {
    for (double v : s.diag_fisher.values())
        if (!(v >= 0.0)) return "diag_fisher has a negative or non-finite entry";
    auto psd = [&](const std::optional<Matrix>& m, const char* what) -> std::string {
        if (!m) return {};
        double scale = 0.0;
        for (double v : m->values()) scale = std::max(scale, std::abs(v));
        if (asymmetry(*m) > tol * std::max(1.0, scale)) return std::string(what) + " is not symmetric";
        const auto eig = sym_eig(*m, tol);
        if (!eig.values.empty() && eig.values.back() < -tol * std::max(1.0, scale))
            return std::string(what) + " is not PSD";
        return {};
    };
    for (auto msg : {psd(s.input_gram, "input_gram"), psd(s.outgrad_gram, "outgrad_gram"),
                     psd(s.exact_fisher, "exact_fisher")})
        if (!msg.empty()) return msg;
    if (s.exact_fisher) {
        for (std::size_t i = 0; i < s.exact_fisher->rows(); ++i)
            if (std::abs((*s.exact_fisher)(i, i) - s.diag_fisher[i]) > tol)
                return "exact_fisher diagonal disagrees with diag_fisher";
    }
    if (s.n_examples == 0) return "n_examples is zero";
    return {};
}

}  // namespace mats
