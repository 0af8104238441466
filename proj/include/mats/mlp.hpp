// SPDX-License-Identifier: Apache-2.0
#pragma once

// A small tanh MLP classifier with exact backpropagation, plus the synthetic
// task suite the models are trained on.
//
// Layer l computes o_l = (z_l · W_l) ⊙ s_l, where z_l is the layer input
// (augmented with a trailing constant 1 when biases are enabled, so the bias
// is the last row of W_l) and s_l is an optional per-output scaling vector.
// Hidden layers apply tanh to o_l; the last layer's o_l are the logits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mats/checkpoint.hpp"
#include "mats/error.hpp"
#include "mats/rng.hpp"
#include "mats/tensor.hpp"

namespace mats {

struct MlpSpec {
    std::vector<std::pair<std::size_t, std::size_t>> layer_dims;  // (d_in, k_out) per layer
    bool use_bias = true;
    bool use_scales = false;

    static MlpSpec from_widths(std::span<const std::size_t> widths, bool use_bias = true,
                               bool use_scales = false) {
        MlpSpec spec{{}, use_bias, use_scales};
        for (std::size_t i = 0; i + 1 < widths.size(); ++i)
            spec.layer_dims.emplace_back(widths[i], widths[i + 1]);
        spec.validate();
        return spec;
    }

    std::size_t layers() const { return layer_dims.size(); }
    std::size_t input_dim() const { return layer_dims.front().first; }
    std::size_t classes() const { return layer_dims.back().second; }
    std::size_t weight_rows(std::size_t l) const { return layer_dims[l].first + (use_bias ? 1 : 0); }

    static std::string weight_name(std::size_t l) { return "layer" + std::to_string(l) + ".weight"; }
    static std::string scale_name(std::size_t l) { return "layer" + std::to_string(l) + ".scale"; }

    void validate() const {
        if (layer_dims.empty()) throw ConfigError("MlpSpec: no layers");
        for (std::size_t l = 0; l < layer_dims.size(); ++l) {
            if (layer_dims[l].first == 0 || layer_dims[l].second == 0)
                throw ConfigError("MlpSpec: zero-width layer " + std::to_string(l));
            if (l > 0 && layer_dims[l].first != layer_dims[l - 1].second)
                throw ConfigError("MlpSpec: layer " + std::to_string(l) + " does not chain");
        }
    }

    void check_params(const Checkpoint& params) const {
        for (std::size_t l = 0; l < layers(); ++l) {
            const Param& w = params.at(weight_name(l));
            if (w.role != Role::linear_weight || w.value.rows() != weight_rows(l) ||
                w.value.cols() != layer_dims[l].second)
                throw ShapeError("parameter '" + weight_name(l) + "' has shape " +
                                 w.value.shape_string() + ", expected " +
                                 std::to_string(weight_rows(l)) + "x" +
                                 std::to_string(layer_dims[l].second));
            if (use_scales) {
                const Param& s = params.at(scale_name(l));
                if (s.role != Role::vector || s.value.size() != layer_dims[l].second)
                    throw ShapeError("parameter '" + scale_name(l) + "' has wrong length");
            }
        }
    }
};

// Gaussian weights with variance 1/d_in, zero bias rows, unit scales.
inline Checkpoint init_params(const MlpSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    Checkpoint ckpt;
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        const auto [d, k] = spec.layer_dims[l];
        Matrix w(spec.weight_rows(l), k);
        const double sd = 1.0 / std::sqrt(static_cast<double>(d));
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < k; ++j) w(i, j) = sd * rng.normal();
        ckpt.entries[MlpSpec::weight_name(l)] = Param::weight(std::move(w));
        if (spec.use_scales)
            ckpt.entries[MlpSpec::scale_name(l)] = Param::vector(std::vector<double>(k, 1.0));
    }
    ckpt.provenance["task"] = "init";
    ckpt.provenance["seed"] = std::to_string(seed);
    return ckpt;
}

enum class Split { train, validation, test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        default: return "test";
    }
}

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + s + "'");
}

struct TaskDataset {
    Matrix inputs;                     // N×d
    std::vector<std::size_t> labels;   // N
    Split split = Split::train;
    std::string task_name;
    std::size_t classes = 0;

    std::size_t size() const { return labels.size(); }

    void validate() const {
        if (labels.empty()) throw ConfigError("dataset '" + task_name + "' is empty");
        if (inputs.rows() != labels.size()) throw ShapeError("dataset rows disagree with labels");
        for (auto y : labels)
            if (y >= classes) throw ConfigError("label out of range in '" + task_name + "'");
    }

    TaskDataset subset(std::span<const std::size_t> idx) const {
        TaskDataset out{Matrix(idx.size(), inputs.cols()), {}, split, task_name, classes};
        out.labels.reserve(idx.size());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            std::copy_n(inputs.row_span(idx[r]).begin(), inputs.cols(), out.inputs.row_span(r).begin());
            out.labels.push_back(labels[idx[r]]);
        }
        return out;
    }
};

struct ForwardCache {
    std::vector<Matrix> inputs;   // z_l per layer (augmented)
    std::vector<Matrix> linear;   // z_l·W_l before scaling
    Matrix logits;
};

namespace detail {

inline Matrix augment(const Matrix& x, bool bias) {
    if (!bias) return x;
    Matrix z(x.rows(), x.cols() + 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        std::copy_n(x.row_span(r).begin(), x.cols(), z.row_span(r).begin());
        z(r, x.cols()) = 1.0;
    }
    return z;
}

inline void scale_columns(Matrix& m, std::span<const double> s) {
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) m(r, c) *= s[c];
}

}  // namespace detail

inline ForwardCache forward(const MlpSpec& spec, const Checkpoint& params, const Matrix& batch) {
    spec.check_params(params);
    if (batch.cols() != spec.input_dim())
        throw ShapeError("forward: batch has " + std::to_string(batch.cols()) +
                         " features, spec expects " + std::to_string(spec.input_dim()));
    ForwardCache cache;
    Matrix x = batch;
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        Matrix z = detail::augment(x, spec.use_bias);
        Matrix lin = matmul(z, params.at(MlpSpec::weight_name(l)).value);
        Matrix out = lin;
        if (spec.use_scales) detail::scale_columns(out, params.at(MlpSpec::scale_name(l)).value.values());
        cache.inputs.push_back(std::move(z));
        cache.linear.push_back(std::move(lin));
        if (l + 1 < spec.layers()) {
            for (double& v : out.values()) v = std::tanh(v);
            x = std::move(out);
        } else {
            cache.logits = std::move(out);
        }
    }
    return cache;
}

// Row-wise log-softmax.
inline Matrix log_softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto row = logits.row_span(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double s = 0.0;
        for (double v : row) s += std::exp(v - mx);
        const double lse = mx + std::log(s);
        for (std::size_t c = 0; c < row.size(); ++c) out(r, c) = row[c] - lse;
    }
    return out;
}

inline Matrix softmax(const Matrix& logits) {
    Matrix p = log_softmax(logits);
    for (double& v : p.values()) v = std::exp(v);
    return p;
}

// Per-layer quantities captured by a backward pass. `outgrad` rows are the
// per-example gradients of log p(target|x) with respect to z_l·W_l.
struct CaptureRecord {
    std::vector<Matrix> inputs;      // Z_l, N×d_l
    std::vector<Matrix> outgrad;     // O′_l, N×k_l
    std::vector<Matrix> scale_grad;  // per-example ∂log p/∂s_l, N×k_l (scales only)
};

struct BackwardResult {
    Checkpoint grads;  // gradient of the mean log-likelihood
    CaptureRecord capture;
};

inline BackwardResult backward(const MlpSpec& spec, const Checkpoint& params,
                               const ForwardCache& cache, std::span<const std::size_t> targets) {
    const std::size_t n = cache.logits.rows();
    if (targets.size() != n) throw ShapeError("backward: target count differs from batch size");
    for (auto t : targets)
        if (t >= spec.classes()) throw ShapeError("backward: target label out of range");

    BackwardResult res;
    const std::size_t L = spec.layers();
    res.capture.inputs.resize(L);
    res.capture.outgrad.resize(L);
    if (spec.use_scales) res.capture.scale_grad.resize(L);

    // gradient with respect to the (scaled) layer output
    Matrix g = softmax(cache.logits);
    g *= -1.0;
    for (std::size_t r = 0; r < n; ++r) g(r, targets[r]) += 1.0;

    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t l = L; l-- > 0;) {
        const Matrix& w = params.at(MlpSpec::weight_name(l)).value;
        Matrix oprime = g;
        if (spec.use_scales) {
            const auto s = params.at(MlpSpec::scale_name(l)).value.values();
            Matrix sg = hadamard(cache.linear[l], g);
            std::vector<double> mean(sg.cols(), 0.0);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < sg.cols(); ++c) mean[c] += sg(r, c);
            for (double& v : mean) v *= inv_n;
            res.grads.entries[MlpSpec::scale_name(l)] = Param::vector(std::move(mean));
            res.capture.scale_grad[l] = std::move(sg);
            detail::scale_columns(oprime, s);
        }
        Matrix gw = matmul_tn(cache.inputs[l], oprime);
        gw *= inv_n;
        res.grads.entries[MlpSpec::weight_name(l)] = Param::weight(std::move(gw));

        if (l > 0) {
            // ∂/∂z_l drops the bias column, then passes through tanh of layer l-1.
            const std::size_t d = spec.layer_dims[l].first;
            Matrix next(n, d);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t i = 0; i < d; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < w.cols(); ++j) s += oprime(r, j) * w(i, j);
                    const double a = cache.inputs[l](r, i);  // tanh output of layer l-1
                    next(r, i) = s * (1.0 - a * a);
                }
            g = std::move(next);
        }
        res.capture.inputs[l] = cache.inputs[l];
        res.capture.outgrad[l] = std::move(oprime);
    }
    return res;
}

inline double mean_log_likelihood(const MlpSpec& spec, const Checkpoint& params, const Matrix& inputs,
                                  std::span<const std::size_t> labels) {
    const Matrix lp = log_softmax(forward(spec, params, inputs).logits);
    double s = 0.0;
    for (std::size_t r = 0; r < labels.size(); ++r) s += lp(r, labels[r]);
    return s / static_cast<double>(labels.size());
}

enum class Trainable { all, weights, vectors };

struct TrainConfig {
    double lr = 0.1;
    std::size_t batch = 32;
    std::size_t steps = 500;
    std::uint64_t seed = 0;
    Trainable trainable = Trainable::all;
};

// Plain minibatch SGD on the mean cross-entropy. Each batch element picks a
// dataset uniformly at random and then an example from it, so passing several
// datasets gives task-balanced multitask training.
inline Checkpoint train(const MlpSpec& spec, const Checkpoint& init,
                        std::span<const TaskDataset> datasets, const TrainConfig& cfg,
                        const std::string& task_name) {
    if (cfg.steps == 0) return init;
    if (datasets.empty()) throw ConfigError("train: no datasets");
    for (const auto& ds : datasets) ds.validate();
    spec.check_params(init);

    Rng rng(cfg.seed);
    Checkpoint params = init;
    Matrix batch(cfg.batch, spec.input_dim());
    std::vector<std::size_t> labels(cfg.batch);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const TaskDataset& ds =
                datasets.size() == 1 ? datasets[0] : datasets[rng.uniform_index(datasets.size())];
            const std::size_t i = rng.uniform_index(ds.size());
            std::copy_n(ds.inputs.row_span(i).begin(), spec.input_dim(), batch.row_span(b).begin());
            labels[b] = ds.labels[i];
        }
        const ForwardCache cache = forward(spec, params, batch);
        const Matrix lp = log_softmax(cache.logits);
        double ll = 0.0;
        for (std::size_t b = 0; b < cfg.batch; ++b) ll += lp(b, labels[b]);
        if (!std::isfinite(ll))
            throw DivergenceError("train: non-finite loss at step " + std::to_string(step) +
                                  " for task '" + task_name + "'");
        const BackwardResult bw = backward(spec, params, cache, labels);
        for (auto& [name, p] : params.entries) {
            const bool is_vec = p.role == Role::vector;
            if ((cfg.trainable == Trainable::weights && is_vec) ||
                (cfg.trainable == Trainable::vectors && !is_vec))
                continue;
            p.value.axpy(cfg.lr, bw.grads.at(name).value);  // ascend log-likelihood
        }
    }
    params.provenance["task"] = task_name;
    params.provenance["seed"] = std::to_string(cfg.seed);
    params.provenance["step"] = std::to_string(cfg.steps);
    return params;
}

inline Checkpoint train(const MlpSpec& spec, const Checkpoint& init, const TaskDataset& dataset,
                        const TrainConfig& cfg) {
    return train(spec, init, std::span<const TaskDataset>(&dataset, 1), cfg, dataset.task_name);
}

// Argmax class per row; ties resolve to the lowest index.
inline std::vector<std::size_t> predict(const MlpSpec& spec, const Checkpoint& params, const Matrix& x) {
    const Matrix logits = forward(spec, params, x).logits;
    std::vector<std::size_t> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto row = logits.row_span(r);
        out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

// An accuracy tagged with the split it was measured on.
struct Accuracy {
    double value = 0.0;
    Split split = Split::test;
    std::string task;
};

inline Accuracy evaluate(const MlpSpec& spec, const Checkpoint& params, const TaskDataset& ds) {
    const auto pred = predict(spec, params, ds.inputs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[i];
    return {pred.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(pred.size()),
            ds.split, ds.task_name};
}

// ---------------------------------------------------------------------------
// Synthetic task suite

struct SuiteConfig {
    std::size_t num_tasks = 8;
    std::size_t classes = 4;
    std::size_t input_dim = 16;
    double separation = 4.0;         // pairwise prototype distance, in units of noise
    double noise = 1.0;              // isotropic σ
    double rotation_strength = 0.5;  // 0 ⇒ every task uses the shared prototypes as-is
    double offset_scale = 1.0;
    std::uint64_t seed = 0;
    std::size_t train_size = 2000;
    std::size_t validation_size = 500;
    std::size_t test_size = 500;
    std::vector<std::size_t> train_size_override;  // per task, 0 ⇒ train_size
    std::optional<Matrix> centers;                 // classes×input_dim, overrides prototypes
};

struct TaskSplits {
    std::string name;
    Matrix rotation;
    std::vector<double> offset;
    TaskDataset train, validation, test;

    const TaskDataset& get(Split s) const {
        return s == Split::train ? train : s == Split::validation ? validation : test;
    }
};

namespace detail {

// Modified Gram-Schmidt on the columns of m.
inline Matrix orthonormalize_columns(Matrix m) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
        for (std::size_t p = 0; p < j; ++p) {
            double d = 0.0;
            for (std::size_t i = 0; i < m.rows(); ++i) d += m(i, p) * m(i, j);
            for (std::size_t i = 0; i < m.rows(); ++i) m(i, j) -= d * m(i, p);
        }
        double nrm = 0.0;
        for (std::size_t i = 0; i < m.rows(); ++i) nrm += m(i, j) * m(i, j);
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12) throw ConfigError("orthonormalize: degenerate column");
        for (std::size_t i = 0; i < m.rows(); ++i) m(i, j) /= nrm;
    }
    return m;
}

inline TaskDataset sample_split(const Matrix& means, const std::vector<double>& offset, double noise,
                                std::size_t n, Split split, const std::string& name, Rng rng) {
    const std::size_t classes = means.rows(), dim = means.cols();
    TaskDataset ds{Matrix(n, dim), std::vector<std::size_t>(n), split, name, classes};
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t y = r % classes;
        ds.labels[r] = y;
        for (std::size_t c = 0; c < dim; ++c)
            ds.inputs(r, c) = means(y, c) + offset[c] + noise * rng.normal();
    }
    return ds;
}

}  // namespace detail

// Shared class prototypes: an orthonormal random frame scaled so that every
// pair of prototypes is separation·noise apart.
inline Matrix suite_prototypes(const SuiteConfig& cfg) {
    if (cfg.centers) {
        if (cfg.centers->rows() != cfg.classes || cfg.centers->cols() != cfg.input_dim)
            throw ConfigError("suite centers must be classes x input_dim");
        return *cfg.centers;
    }
    if (cfg.classes > cfg.input_dim)
        throw ConfigError("suite: classes must not exceed input_dim for orthogonal prototypes");
    Rng rng = Rng(cfg.seed).split(0xC1A55);
    Matrix g(cfg.input_dim, cfg.classes);
    for (double& v : g.values()) v = rng.normal();
    const Matrix q = detail::orthonormalize_columns(std::move(g));
    const double radius = cfg.separation * cfg.noise / std::sqrt(2.0);
    Matrix protos(cfg.classes, cfg.input_dim);
    for (std::size_t c = 0; c < cfg.classes; ++c)
        for (std::size_t i = 0; i < cfg.input_dim; ++i) protos(c, i) = radius * q(i, c);
    return protos;
}

inline TaskSplits make_task(const SuiteConfig& cfg, const Matrix& protos, const std::string& name,
                            const Matrix& rotation, std::vector<double> offset, std::size_t train_n,
                            std::uint64_t stream) {
    Rng base = Rng(cfg.seed).split(stream);
    const Matrix means = matmul(protos, transpose(rotation));  // row c = R·μ_c
    TaskSplits t{name, rotation, offset, {}, {}, {}};
    t.train = detail::sample_split(means, offset, cfg.noise, train_n, Split::train, name, base.split(1));
    t.validation = detail::sample_split(means, offset, cfg.noise, cfg.validation_size, Split::validation,
                                        name, base.split(2));
    t.test = detail::sample_split(means, offset, cfg.noise, cfg.test_size, Split::test, name, base.split(3));
    return t;
}

// Gaussian-mixture tasks related by task-specific rotations and offsets of
// the shared prototypes. Task names are "task00", "task01", ...
inline std::vector<TaskSplits> gen_synthetic_tasks(const SuiteConfig& cfg) {
    if (cfg.classes < 2) throw ConfigError("suite: need at least 2 classes");
    if (cfg.num_tasks < 1) throw ConfigError("suite: need at least 1 task");
    if (cfg.train_size == 0 || cfg.validation_size == 0 || cfg.test_size == 0)
        throw ConfigError("suite: split sizes must be positive");
    const Matrix protos = suite_prototypes(cfg);
    std::vector<TaskSplits> out;
    for (std::size_t m = 0; m < cfg.num_tasks; ++m) {
        Rng rng = Rng(cfg.seed).split(1000 + m);
        Matrix rot = Matrix::identity(cfg.input_dim);
        if (cfg.rotation_strength != 0.0) {
            for (double& v : rot.values()) v += cfg.rotation_strength * rng.normal();
            rot = detail::orthonormalize_columns(std::move(rot));
        }
        std::vector<double> offset(cfg.input_dim, 0.0);
        for (double& v : offset) v = cfg.offset_scale * rng.normal();
        char name[16];
        std::snprintf(name, sizeof name, "task%02zu", m);
        std::size_t train_n = cfg.train_size;
        if (m < cfg.train_size_override.size() && cfg.train_size_override[m] > 0)
            train_n = cfg.train_size_override[m];
        out.push_back(make_task(cfg, protos, name, rot, std::move(offset), train_n, 2000 + m));
    }
    return out;
}

// The unrotated, unshifted task used to produce the shared starting point.
inline TaskSplits gen_base_task(const SuiteConfig& cfg) {
    return make_task(cfg, suite_prototypes(cfg), "base", Matrix::identity(cfg.input_dim),
                     std::vector<double>(cfg.input_dim, 0.0), cfg.train_size, 999);
}

}  // namespace mats
