// SPDX-License-Identifier: Apache-2.0
#pragma once

// Closed-form FLOP counts for each merging method, given the number of
// models M, the parameter count p and, for the per-layer methods, the shapes
// of the linear layers.

#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "mats/error.hpp"

namespace mats {

enum class FlopsMethod { averaging, task_arithmetic, ties, diag_fisher, regmean, mats };

inline const char* to_string(FlopsMethod m) {
    switch (m) {
        case FlopsMethod::averaging: return "averaging";
        case FlopsMethod::task_arithmetic: return "task_arithmetic";
        case FlopsMethod::ties: return "ties";
        case FlopsMethod::diag_fisher: return "diag_fisher";
        case FlopsMethod::regmean: return "regmean";
        default: return "mats";
    }
}

inline FlopsMethod parse_flops_method(const std::string& s) {
    if (s == "averaging" || s == "average" || s == "simple_average") return FlopsMethod::averaging;
    if (s == "task_arithmetic") return FlopsMethod::task_arithmetic;
    if (s == "ties") return FlopsMethod::ties;
    if (s == "diag_fisher" || s == "diagonal_fisher") return FlopsMethod::diag_fisher;
    if (s == "regmean") return FlopsMethod::regmean;
    if (s == "mats") return FlopsMethod::mats;
    throw ConfigError("unknown FLOPs method '" + s + "'");
}

struct LayerShape {
    double d = 0;  // input dimension
    double k = 0;  // output dimension
    double count = 1;
};

struct FlopsModelSpec {
    double models = 0;                 // M
    double params = 0;                 // p
    std::vector<LayerShape> layers;    // needed by regmean and mats
    std::optional<double> cg_iters;    // N, needed by mats

    void validate() const {
        if (!(params > 0)) throw SpecError("FLOPs spec: parameter count must be positive");
        if (!(models >= 1)) throw SpecError("FLOPs spec: need at least one model");
    }
};

inline double flops_estimate(FlopsMethod method, const FlopsModelSpec& spec) {
    spec.validate();
    const double M = spec.models, p = spec.params;
    auto need_layers = [&] {
        if (spec.layers.empty())
            throw SpecError(std::string(to_string(method)) + " FLOPs need linear-layer shapes");
    };
    switch (method) {
        case FlopsMethod::averaging: return M * p;
        case FlopsMethod::task_arithmetic: return 2 * M * p + p;
        case FlopsMethod::diag_fisher: return 3 * M * p - p;
        case FlopsMethod::ties: return 9.8 * M * p + M * p * std::log(p) - 2 * p;
        case FlopsMethod::regmean: {
            need_layers();
            double total = 0;
            for (const auto& l : spec.layers) {
                const double d = l.d, k = l.k;
                total += l.count * ((M - 1) * d * d + 2.0 / 3.0 * d * d * d + M * d * d * k +
                                    (M - 1) * d * k + d * d * k);
            }
            return total;
        }
        default: {
            need_layers();
            if (!spec.cg_iters) throw SpecError("mats FLOPs need the CG iteration count");
            const double n = *spec.cg_iters;
            double total = 0;
            for (const auto& l : spec.layers) {
                const double d = l.d, k = l.k;
                total += l.count * ((M - 1) * d * d + M * d * d * k + (M - 1) * d * k +
                                    n * (d * d * k + 12 * d * k));
            }
            return total;
        }
    }
}

// Reference shapes of the two large-scale settings the formulas were
// published for: full-model fine-tuning of a 783M-parameter encoder-decoder,
// and its 282K-parameter scaling-vector variant.
inline FlopsModelSpec reference_full_model_spec(double models = 8, std::optional<double> cg_iters = 100) {
    return {models, 783e6, {{1024, 1024, 288}, {1024, 2816, 96}, {2816, 38, 48}}, cg_iters};
}

inline FlopsModelSpec reference_vector_spec(double models = 8) { return {models, 282e3, {}, std::nullopt}; }

// Scientific notation with two significant figures, e.g. 2.3E6.
inline std::string format_sci2(double v) {
    if (v == 0) return "0.0E0";
    int exp = static_cast<int>(std::floor(std::log10(std::abs(v))));
    double mant = v / std::pow(10.0, exp);
    mant = std::round(mant * 10.0) / 10.0;
    if (std::abs(mant) >= 10.0) {
        mant /= 10.0;
        ++exp;
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1fE%d", mant, exp);
    return buf;
}

}  // namespace mats
