// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end experiment driver: builds the synthetic suite, pretrains a shared
// starting point, fine-tunes one model per task, collects statistics, runs
// every configured merge over its hyperparameter grid, selects on validation
// accuracy and reports test accuracy. Everything is seeded; the same config
// produces the same bytes.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mats/checkpoint.hpp"
#include "mats/error.hpp"
#include "mats/fisher.hpp"
#include "mats/flops.hpp"
#include "mats/merge.hpp"
#include "mats/mlp.hpp"
#include "mats/solver.hpp"

namespace mats {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct MethodSpec {
    std::string method;  // simple_average | task_arithmetic | ties | diag_fisher | regmean | mats
    std::string label;   // row name in the report
    std::vector<double> lambdas{1.0};
    std::vector<double> trims{0.8};
    std::vector<double> gammas{0.9};
    std::vector<std::size_t> cg_iters{100};
    ObjectiveKind objective = ObjectiveKind::regmean;
    InitMethod init = InitMethod::task_arithmetic;
    std::vector<RoundSpec> extra_rounds;  // later MaTS rounds, each starting from the previous output
};

struct ExperimentConfig {
    std::string scenario = "multitask";  // multitask | intermediate_task
    std::vector<std::uint64_t> seeds;
    SuiteConfig suite;
    std::vector<std::size_t> hidden{32, 32};
    bool use_bias = true;
    bool use_scales = false;
    TrainConfig pretrain{0.1, 32, 2000, 0, Trainable::all};
    TrainConfig finetune{0.1, 32, 1000, 0, Trainable::all};
    TrainConfig multitask{0.1, 32, 4000, 0, Trainable::all};
    bool multitask_baseline = true;
    FisherMode fisher_mode = FisherMode::empirical;
    Split stats_split = Split::train;
    std::size_t stats_batch = 256;
    std::vector<MethodSpec> methods;
    std::size_t target_train_size = 200;  // intermediate_task only
    std::size_t intermediates = 3;        // intermediate_task only
    double flops_cg_iters = 100;
    std::string out_dir;                  // empty ⇒ nothing written

    MlpSpec model_spec() const {
        std::vector<std::size_t> widths{suite.input_dim};
        widths.insert(widths.end(), hidden.begin(), hidden.end());
        widths.push_back(suite.classes);
        return MlpSpec::from_widths(widths, use_bias, use_scales);
    }

    void validate() const {
        if (scenario != "multitask" && scenario != "intermediate_task")
            throw ConfigError("scenario must be multitask or intermediate_task, got '" + scenario + "'");
        if (seeds.empty()) throw ConfigError("config: seeds must be listed explicitly");
        for (const auto& m : methods) {
            if (m.lambdas.empty() || m.trims.empty() || m.gammas.empty() || m.cg_iters.empty())
                throw ConfigError("config: method '" + m.label + "' has an empty grid");
            for (auto n : m.cg_iters)
                if (n < 1) throw ConfigError("config: cg_iters must be at least 1");
        }
        if (scenario == "intermediate_task" && intermediates < 1)
            throw ConfigError("config: intermediate_task needs at least one intermediate task");
        model_spec();
    }
};

namespace detail {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
}

inline Trainable parse_trainable(const std::string& s) {
    if (s == "all") return Trainable::all;
    if (s == "weights") return Trainable::weights;
    if (s == "vectors") return Trainable::vectors;
    throw ConfigError("unknown trainable set '" + s + "' (expected all|weights|vectors)");
}

inline const char* to_string(Trainable t) {
    return t == Trainable::all ? "all" : t == Trainable::weights ? "weights" : "vectors";
}

inline TrainConfig parse_train(const json& j, TrainConfig base) {
    base.lr = get_or(j, "lr", base.lr);
    base.batch = get_or(j, "batch", base.batch);
    base.steps = get_or(j, "steps", base.steps);
    if (j.contains("trainable")) base.trainable = parse_trainable(j.at("trainable").get<std::string>());
    if (!(base.lr > 0.0)) throw ConfigError("training: lr must be positive");
    if (base.batch == 0) throw ConfigError("training: batch must be positive");
    return base;
}

inline json train_json(const TrainConfig& t) {
    return {{"lr", t.lr}, {"batch", t.batch}, {"steps", t.steps}, {"trainable", to_string(t.trainable)}};
}

inline std::vector<double> step_grid(double lo, double hi, double step) {
    std::vector<double> out;
    for (int i = 0;; ++i) {
        const double v = lo + step * i;
        if (v > hi + 1e-9) break;
        out.push_back(std::round(v * 1e6) / 1e6);
    }
    return out;
}

inline MethodSpec parse_method(const json& j) {
    MethodSpec m;
    m.method = j.at("method").get<std::string>();
    if (m.method == "average" || m.method == "averaging") m.method = "simple_average";
    m.label = get_or<std::string>(j, "label", m.method);
    if (m.method == "task_arithmetic" || m.method == "ties") m.lambdas = step_grid(0.1, 1.0, 0.1);
    if (m.method == "regmean") m.gammas = step_grid(0.1, 1.0, 0.1);
    if (m.method == "mats") {
        m.cg_iters.clear();
        for (std::size_t n = 10; n <= 100; n += 10) m.cg_iters.push_back(n);
    }
    m.lambdas = get_or(j, "lambda", m.lambdas);
    m.trims = get_or(j, "trim", m.trims);
    m.gammas = get_or(j, "gamma", m.gammas);
    m.cg_iters = get_or(j, "cg_iters", m.cg_iters);
    if (j.contains("objective")) m.objective = parse_objective(j.at("objective").get<std::string>());
    if (j.contains("init")) m.init = parse_init(j.at("init").get<std::string>());
    if (j.contains("rounds"))
        for (const auto& r : j.at("rounds")) {
            RoundSpec rs;
            rs.objective = parse_objective(r.at("objective").get<std::string>());
            rs.cg.max_iters = get_or<std::size_t>(r, "cg_iters", 100);
            m.extra_rounds.push_back(rs);
        }
    static const char* known[] = {"simple_average", "task_arithmetic", "ties", "diag_fisher", "regmean", "mats"};
    if (std::find(std::begin(known), std::end(known), m.method) == std::end(known))
        throw ConfigError("unknown method '" + m.method + "'");
    return m;
}

}  // namespace detail

inline std::vector<MethodSpec> default_methods() {
    std::vector<MethodSpec> out;
    for (const char* name : {"simple_average", "task_arithmetic", "ties", "diag_fisher", "regmean", "mats"})
        out.push_back(detail::parse_method(json{{"method", name}}));
    return out;
}

// Parses the JSON config. Relative out_dir values resolve against base_dir.
inline ExperimentConfig parse_config(const json& j, const std::filesystem::path& base_dir = {}) {
    using detail::get_or;
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    ExperimentConfig c;
    try {
        c.scenario = get_or<std::string>(j, "scenario", c.scenario);
        if (!j.contains("seeds")) throw ConfigError("config: seeds must be listed explicitly");
        c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        if (j.contains("suite")) {
            const json& s = j.at("suite");
            c.suite.num_tasks = get_or(s, "num_tasks", c.suite.num_tasks);
            c.suite.classes = get_or(s, "classes", c.suite.classes);
            c.suite.input_dim = get_or(s, "input_dim", c.suite.input_dim);
            c.suite.separation = get_or(s, "separation", c.suite.separation);
            c.suite.noise = get_or(s, "noise", c.suite.noise);
            c.suite.rotation_strength = get_or(s, "rotation_strength", c.suite.rotation_strength);
            c.suite.offset_scale = get_or(s, "offset_scale", c.suite.offset_scale);
            c.suite.train_size = get_or(s, "train_size", c.suite.train_size);
            c.suite.validation_size = get_or(s, "validation_size", c.suite.validation_size);
            c.suite.test_size = get_or(s, "test_size", c.suite.test_size);
        }
        if (j.contains("model")) {
            const json& m = j.at("model");
            c.hidden = get_or(m, "hidden", c.hidden);
            c.use_bias = get_or(m, "use_bias", c.use_bias);
            c.use_scales = get_or(m, "use_scales", c.use_scales);
        }
        if (j.contains("pretrain")) c.pretrain = detail::parse_train(j.at("pretrain"), c.pretrain);
        if (j.contains("finetune")) c.finetune = detail::parse_train(j.at("finetune"), c.finetune);
        if (j.contains("multitask")) c.multitask = detail::parse_train(j.at("multitask"), c.multitask);
        c.multitask_baseline = get_or(j, "multitask_baseline", c.multitask_baseline);
        if (j.contains("stats")) {
            const json& s = j.at("stats");
            if (s.contains("fisher_mode")) c.fisher_mode = parse_fisher_mode(s.at("fisher_mode").get<std::string>());
            if (s.contains("split")) c.stats_split = parse_split(s.at("split").get<std::string>());
            c.stats_batch = get_or(s, "batch", c.stats_batch);
        }
        if (j.contains("methods")) {
            for (const auto& m : j.at("methods")) c.methods.push_back(detail::parse_method(m));
        } else {
            c.methods = default_methods();
        }
        if (j.contains("intermediate")) {
            const json& i = j.at("intermediate");
            c.target_train_size = get_or(i, "target_train_size", c.target_train_size);
            c.intermediates = get_or(i, "intermediates", c.intermediates);
        }
        c.flops_cg_iters = get_or(j, "flops_cg_iters", c.flops_cg_iters);
        c.out_dir = get_or<std::string>(j, "out_dir", "");
        if (!c.out_dir.empty() && std::filesystem::path(c.out_dir).is_relative() && !base_dir.empty())
            c.out_dir = (base_dir / c.out_dir).lexically_normal().string();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return parse_config(j, std::filesystem::path(path).parent_path());
}

// ---------------------------------------------------------------------------
// Datasets as MATSCKPT files: "inputs" (N×d) and "labels" (length N).

inline Checkpoint dataset_to_checkpoint(const TaskDataset& ds) {
    Checkpoint c;
    c.entries["inputs"] = Param::weight(ds.inputs);
    std::vector<double> labels(ds.labels.begin(), ds.labels.end());
    c.entries["labels"] = Param::vector(std::move(labels));
    c.provenance["task"] = ds.task_name;
    c.provenance["split"] = to_string(ds.split);
    c.provenance["classes"] = std::to_string(ds.classes);
    return c;
}

inline TaskDataset checkpoint_to_dataset(const Checkpoint& c) {
    TaskDataset ds;
    ds.inputs = c.at("inputs").value;
    for (double v : c.at("labels").value.values()) {
        if (v < 0 || v != std::floor(v)) throw FormatError("dataset labels must be non-negative integers", 0);
        ds.labels.push_back(static_cast<std::size_t>(v));
    }
    ds.task_name = c.task();
    ds.split = parse_split(c.provenance.count("split") ? c.provenance.at("split") : "test");
    ds.classes = c.provenance.count("classes") ? std::stoul(c.provenance.at("classes")) : 0;
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Evaluation and validation-only selection

inline std::vector<Accuracy> evaluate_tasks(const MlpSpec& spec, const Checkpoint& params,
                                            std::span<const TaskSplits> tasks, Split split) {
    std::vector<Accuracy> out;
    for (const auto& t : tasks) out.push_back(evaluate(spec, params, t.get(split)));
    return out;
}

inline double mean_accuracy(std::span<const Accuracy> accs) {
    if (accs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& a : accs) s += a.value;
    return s / static_cast<double>(accs.size());
}

struct Candidate {
    std::string hyperparams;
    Checkpoint merged;
    std::vector<Accuracy> validation;
    json trace;  // CG sidecar for MaTS candidates
};

// Index of the candidate with the best mean validation accuracy; the first
// wins ties. Refuses anything not measured on the validation split.
inline std::size_t select_by_validation(std::span<const Candidate> cands) {
    if (cands.empty()) throw ContractError("select_by_validation: no candidates");
    std::size_t best = 0;
    double best_acc = -1.0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        for (const auto& a : cands[i].validation)
            if (a.split != Split::validation)
                throw ContractError("selection saw a " + std::string(to_string(a.split)) +
                                    "-split accuracy for task '" + a.task + "'");
        const double acc = mean_accuracy(cands[i].validation);
        if (acc > best_acc) {
            best_acc = acc;
            best = i;
        }
    }
    return best;
}

namespace detail {

inline std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

}  // namespace detail

// Every grid point of one method as a merged checkpoint (validation filled by the caller).
inline std::vector<Candidate> method_candidates(const MethodSpec& m, std::span<const Checkpoint> models,
                                                std::span<const StatsBundle> stats, const Checkpoint& pretrained) {
    using detail::fmt_num;
    std::vector<Candidate> out;
    if (m.method == "simple_average") {
        out.push_back({"-", simple_average(models), {}, {}});
    } else if (m.method == "task_arithmetic") {
        for (double l : m.lambdas) out.push_back({"lambda=" + fmt_num(l), task_arithmetic(models, pretrained, l), {}, {}});
    } else if (m.method == "ties") {
        for (double t : m.trims)
            for (double l : m.lambdas)
                out.push_back({"lambda=" + fmt_num(l) + " trim=" + fmt_num(t), ties_merge(models, pretrained, l, t),
                               {}, {}});
    } else if (m.method == "diag_fisher") {
        out.push_back({"-", diagonal_fisher_merge(models, stats), {}, {}});
    } else if (m.method == "regmean") {
        for (double g : m.gammas) {
            MergeHyperparams hp;
            hp.regmean_gamma = g;
            out.push_back({"gamma=" + fmt_num(g), regmean_closed_form(models, stats, hp), {}, {}});
        }
    } else {
        const bool uses_lambda = m.init == InitMethod::task_arithmetic || m.init == InitMethod::ties;
        const std::vector<double> lambdas = uses_lambda ? m.lambdas : std::vector<double>{1.0};
        for (double l : lambdas)
            for (auto n : m.cg_iters) {
                MergeHyperparams hp;
                hp.lambda = l;
                std::vector<RoundSpec> recipe{{m.objective, {}}};
                recipe[0].cg.max_iters = n;
                recipe.insert(recipe.end(), m.extra_rounds.begin(), m.extra_rounds.end());
                MatsResult res = multi_round(models, stats, m.init, hp, recipe, &pretrained);
                std::string hyper = "cg_iters=" + std::to_string(n);
                if (uses_lambda) hyper = "lambda=" + fmt_num(l) + " " + hyper;
                out.push_back({hyper, std::move(res.merged), {}, trace_sidecar(res)});
            }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Results and report

struct MethodRow {
    std::string method;
    std::vector<std::string> chosen;        // per seed
    std::vector<std::vector<double>> acc;   // [seed][column], test accuracy in [0,1]

    double column_mean(std::size_t col) const {
        double s = 0.0;
        for (const auto& a : acc) s += a[col];
        return acc.empty() ? 0.0 : s / static_cast<double>(acc.size());
    }
    double average() const {
        if (acc.empty() || acc.front().empty()) return 0.0;
        double s = 0.0;
        for (std::size_t c = 0; c < acc.front().size(); ++c) s += column_mean(c);
        return s / static_cast<double>(acc.front().size());
    }
};

struct FlopsRow {
    std::string method;
    double desk = 0, vector_ref = 0, full_ref = 0;
};

struct ScenarioResults {
    std::string scenario = "multitask";
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> columns;
    std::vector<MethodRow> rows;
    std::vector<FlopsRow> flops;

    const MethodRow* find(const std::string& method) const {
        for (const auto& r : rows)
            if (r.method == method) return &r;
        return nullptr;
    }

    json to_json() const {
        json j;
        j["scenario"] = scenario;
        j["seeds"] = seeds;
        j["columns"] = columns;
        j["rows"] = json::array();
        for (const auto& r : rows) j["rows"].push_back({{"method", r.method}, {"chosen", r.chosen}, {"accuracy", r.acc}});
        j["flops"] = json::array();
        for (const auto& f : flops)
            j["flops"].push_back({{"method", f.method}, {"desk", f.desk}, {"vector_ref", f.vector_ref},
                                  {"full_ref", f.full_ref}});
        return j;
    }

    static ScenarioResults from_json(const json& j) {
        ScenarioResults r;
        try {
            r.scenario = j.at("scenario").get<std::string>();
            r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
            r.columns = j.at("columns").get<std::vector<std::string>>();
            for (const auto& row : j.at("rows"))
                r.rows.push_back({row.at("method").get<std::string>(), row.at("chosen").get<std::vector<std::string>>(),
                                  row.at("accuracy").get<std::vector<std::vector<double>>>()});
            for (const auto& f : j.at("flops"))
                r.flops.push_back({f.at("method").get<std::string>(), f.at("desk").get<double>(),
                                   f.at("vector_ref").get<double>(), f.at("full_ref").get<double>()});
        } catch (const json::exception& e) {
            throw FormatError(std::string("results file: ") + e.what(), 0);
        }
        return r;
    }
};

struct Report {
    std::string markdown;
    std::string csv;
};

namespace detail {

inline std::string pct1(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
    return buf;
}

inline std::string exact(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline Report emit_report(const ScenarioResults& res) {
    std::ostringstream md, csv;
    const bool inter = res.scenario == "intermediate_task";
    md << "# Merging results (" << res.scenario << ")\n\n";
    md << "Seeds:";
    for (auto s : res.seeds) md << ' ' << s;
    md << ". ";
    md << (inter ? "Each column merges the target task's model with one intermediate-task model and reports "
                   "target-task test accuracy (%)."
                 : "Test accuracy (%) per task.");
    md << " Values are means over seeds; hyperparameters are selected per seed on validation accuracy.\n\n";

    md << "| Method |";
    csv << "method";
    for (const auto& c : res.columns) {
        md << ' ' << c << " |";
        csv << ',' << c;
    }
    md << " Avg |\n|---|";
    csv << ",avg\n";
    for (std::size_t i = 0; i < res.columns.size(); ++i) md << "---|";
    md << "---|\n";
    for (const auto& r : res.rows) {
        md << "| " << r.method << " |";
        csv << r.method;
        for (std::size_t c = 0; c < res.columns.size(); ++c) {
            md << ' ' << detail::pct1(r.column_mean(c)) << " |";
            csv << ',' << detail::exact(100.0 * r.column_mean(c));
        }
        md << ' ' << detail::pct1(r.average()) << " |\n";
        csv << ',' << detail::exact(100.0 * r.average()) << '\n';
    }

    md << "\n## Selected hyperparameters\n\n| Method |";
    for (auto s : res.seeds) md << " seed " << s << " |";
    md << "\n|---|";
    for (std::size_t i = 0; i < res.seeds.size(); ++i) md << "---|";
    md << '\n';
    for (const auto& r : res.rows) {
        md << "| " << r.method << " |";
        for (const auto& c : r.chosen) md << ' ' << c << " |";
        md << '\n';
    }

    md << "\n## FLOPs\n\n| Method | desk model | scaling vectors, p=282K | full model, p=783M |\n|---|---|---|---|\n";
    for (const auto& f : res.flops)
        md << "| " << f.method << " | " << format_sci2(f.desk) << " | " << (f.vector_ref > 0 ? format_sci2(f.vector_ref) : std::string("-"))
           << " | " << format_sci2(f.full_ref) << " |\n";
    if (!res.flops.empty())
        md << "\nFLOP counts are direct evaluations of the closed-form per-method counts with M equal to the "
              "number of merged models. The full-model column uses 288 layers of 1024x1024, 96 of 1024x2816 "
              "and 48 of 2816x38 as listed, with N=100 CG iterations for MaTS. For TIES and RegMean at "
              "full-model scale these evaluations differ from commonly quoted rounded totals (about 1.9E11 "
              "and 6.5E12 here); no constants were adjusted to match them. The scaling-vector column has no "
              "layer shapes, so RegMean and MaTS are not listed there.\n";
    return {md.str(), csv.str()};
}

// ---------------------------------------------------------------------------
// Pipeline

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << text;
}

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const Error& e) {
        throw Error("stage '" + name + "' failed: " + e.what());
    }
}

inline std::string safe_name(std::string s) {
    for (char& ch : s)
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '_' && ch != '-' && ch != '.') ch = '_';
    return s;
}

}  // namespace detail

// Models, statistics and datasets for one seed.
struct SeedState {
    MlpSpec spec;
    std::vector<TaskSplits> tasks;
    Checkpoint pretrained;
    std::vector<Checkpoint> finetuned;
    std::vector<StatsBundle> stats;
};

inline SuiteConfig suite_for_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    SuiteConfig s = cfg.suite;
    s.seed = seed;
    if (cfg.scenario == "intermediate_task") {
        s.num_tasks = 1 + cfg.intermediates;
        s.train_size_override = {cfg.target_train_size};
    }
    return s;
}

inline Checkpoint pretrain_model(const ExperimentConfig& cfg, const MlpSpec& spec, const SuiteConfig& suite,
                                 std::uint64_t seed) {
    TaskSplits base = gen_base_task(suite);
    TrainConfig tc = cfg.pretrain;
    tc.seed = Rng(seed).split(0x9E37).seed();
    tc.trainable = Trainable::all;
    return train(spec, init_params(spec, seed), std::span<const TaskDataset>(&base.train, 1), tc, "pretrained");
}

inline Checkpoint finetune_model(const ExperimentConfig& cfg, const MlpSpec& spec, const Checkpoint& pretrained,
                                 const TaskSplits& task, std::uint64_t seed, std::size_t index) {
    TrainConfig tc = cfg.finetune;
    tc.seed = Rng(seed).split(0xF1 + index).seed();
    return train(spec, pretrained, std::span<const TaskDataset>(&task.train, 1), tc, task.name);
}

inline StatsBundle task_stats(const ExperimentConfig& cfg, const MlpSpec& spec, const Checkpoint& model,
                              const TaskSplits& task, std::uint64_t seed, std::size_t index) {
    StatsConfig sc;
    sc.mode = cfg.fisher_mode;
    sc.seed = Rng(seed).split(0x57A7 + index).seed();
    sc.batch = cfg.stats_batch;
    return collect_stats(spec, model, task.get(cfg.stats_split), sc);
}

inline SeedState prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    SeedState st;
    st.spec = cfg.model_spec();
    const SuiteConfig suite = suite_for_seed(cfg, seed);
    st.tasks = detail::stage("gen-data", [&] { return gen_synthetic_tasks(suite); });
    st.pretrained = detail::stage("pretrain", [&] { return pretrain_model(cfg, st.spec, suite, seed); });
    for (std::size_t i = 0; i < st.tasks.size(); ++i) {
        st.finetuned.push_back(detail::stage("finetune " + st.tasks[i].name, [&] {
            return finetune_model(cfg, st.spec, st.pretrained, st.tasks[i], seed, i);
        }));
        st.stats.push_back(detail::stage("stats " + st.tasks[i].name, [&] {
            return task_stats(cfg, st.spec, st.finetuned[i], st.tasks[i], seed, i);
        }));
    }
    return st;
}

inline FlopsModelSpec desk_flops_spec(const MlpSpec& spec, double models, double cg_iters) {
    FlopsModelSpec f{models, 0, {}, cg_iters};
    for (std::size_t l = 0; l < spec.layers(); ++l) {
        const double d = static_cast<double>(spec.weight_rows(l)), k = static_cast<double>(spec.layer_dims[l].second);
        f.params += d * k + (spec.use_scales ? k : 0.0);
        f.layers.push_back({d, k, 1});
    }
    return f;
}

inline std::vector<FlopsRow> flops_rows(const MlpSpec& spec, double models, double cg_iters) {
    const FlopsModelSpec desk = desk_flops_spec(spec, models, cg_iters);
    const FlopsModelSpec vec_ref = reference_vector_spec(models);
    const FlopsModelSpec full = reference_full_model_spec(models, cg_iters);
    std::vector<FlopsRow> out;
    for (auto m : {FlopsMethod::averaging, FlopsMethod::task_arithmetic, FlopsMethod::diag_fisher, FlopsMethod::ties,
                   FlopsMethod::regmean, FlopsMethod::mats}) {
        const bool per_layer = m == FlopsMethod::regmean || m == FlopsMethod::mats;
        out.push_back({to_string(m), flops_estimate(m, desk), per_layer ? 0.0 : flops_estimate(m, vec_ref),
                       flops_estimate(m, full)});
    }
    return out;
}

struct MethodOutcome {
    std::string chosen;
    Checkpoint merged;
    json trace;
};

// Runs all grid points, picks one on the validation split of `select_on`.
inline MethodOutcome run_method(const MethodSpec& m, const MlpSpec& spec, std::span<const Checkpoint> models,
                                std::span<const StatsBundle> stats, const Checkpoint& pretrained,
                                std::span<const TaskSplits> select_on) {
    std::vector<Candidate> cands = method_candidates(m, models, stats, pretrained);
    for (auto& c : cands) c.validation = evaluate_tasks(spec, c.merged, select_on, Split::validation);
    const std::size_t best = select_by_validation(cands);
    return {cands[best].hyperparams, std::move(cands[best].merged), std::move(cands[best].trace)};
}

namespace detail {

inline std::vector<double> values_of(std::span<const Accuracy> a) {
    std::vector<double> v;
    for (const auto& x : a) v.push_back(x.value);
    return v;
}

inline MethodRow& row_for(ScenarioResults& res, const std::string& name) {
    for (auto& r : res.rows)
        if (r.method == name) return r;
    res.rows.push_back({name, {}, {}});
    return res.rows.back();
}

}  // namespace detail

inline void write_seed_artifacts(const std::filesystem::path& dir, const SeedState& st) {
    save((dir / "pretrained.mats").string(), st.pretrained);
    for (std::size_t i = 0; i < st.tasks.size(); ++i) {
        save((dir / "models" / (st.tasks[i].name + ".mats")).string(), st.finetuned[i]);
        save((dir / "stats" / (st.tasks[i].name + ".mats")).string(), st.stats[i]);
    }
}

inline ScenarioResults run_scenario(const ExperimentConfig& cfg) {
    cfg.validate();
    ScenarioResults res;
    res.scenario = cfg.scenario;
    res.seeds = cfg.seeds;
    const bool write = !cfg.out_dir.empty();
    const std::filesystem::path out(cfg.out_dir);
    const bool inter = cfg.scenario == "intermediate_task";

    for (std::uint64_t seed : cfg.seeds) {
        SeedState st = prepare_seed(cfg, seed);
        const std::filesystem::path seed_dir = out / ("seed_" + std::to_string(seed));
        if (write) {
            std::filesystem::create_directories(seed_dir / "models");
            std::filesystem::create_directories(seed_dir / "stats");
            std::filesystem::create_directories(seed_dir / "merged");
            write_seed_artifacts(seed_dir, st);
        }
        auto save_merged = [&](const std::string& name, const MethodOutcome& o) {
            if (!write) return;
            save((seed_dir / "merged" / (detail::safe_name(name) + ".mats")).string(), o.merged);
            if (!o.trace.is_null())
                detail::write_text(seed_dir / "traces" / (detail::safe_name(name) + ".json"), o.trace.dump(1) + "\n");
        };

        if (!inter) {
            if (res.columns.empty())
                for (const auto& t : st.tasks) res.columns.push_back(t.name);
            auto add = [&](const std::string& name, const std::string& chosen, const Checkpoint& model) {
                MethodRow& row = detail::row_for(res, name);
                row.chosen.push_back(chosen);
                row.acc.push_back(detail::values_of(evaluate_tasks(st.spec, model, st.tasks, Split::test)));
            };
            add("pretrained", "-", st.pretrained);
            {
                MethodRow& row = detail::row_for(res, "individual");
                row.chosen.push_back("-");
                std::vector<double> acc;
                for (std::size_t i = 0; i < st.tasks.size(); ++i)
                    acc.push_back(evaluate(st.spec, st.finetuned[i], st.tasks[i].test).value);
                row.acc.push_back(acc);
            }
            if (cfg.multitask_baseline) {
                const Checkpoint joint = detail::stage("multitask baseline", [&] {
                    std::vector<TaskDataset> all;
                    for (const auto& t : st.tasks) all.push_back(t.train);
                    TrainConfig tc = cfg.multitask;
                    tc.seed = Rng(seed).split(0x3017).seed();
                    return train(st.spec, st.pretrained, all, tc, "multitask");
                });
                if (write) save((seed_dir / "multitask.mats").string(), joint);
                add("multitask", "-", joint);
            }
            for (const auto& m : cfg.methods) {
                const MethodOutcome o = detail::stage("merge " + m.label, [&] {
                    return run_method(m, st.spec, st.finetuned, st.stats, st.pretrained, st.tasks);
                });
                save_merged(m.label, o);
                add(m.label, o.chosen, o.merged);
            }
        } else {
            // task00 is the target; every other task is a candidate intermediate.
            if (res.columns.empty())
                for (std::size_t i = 1; i < st.tasks.size(); ++i) res.columns.push_back(st.tasks[i].name);
            const std::span<const TaskSplits> target(&st.tasks[0], 1);
            {
                MethodRow& row = detail::row_for(res, "target only");
                row.chosen.push_back("-");
                const double a = evaluate(st.spec, st.finetuned[0], st.tasks[0].test).value;
                row.acc.push_back(std::vector<double>(res.columns.size(), a));
            }
            for (const auto& m : cfg.methods) {
                MethodRow& row = detail::row_for(res, m.label);
                std::vector<double> acc;
                std::string chosen;
                for (std::size_t i = 1; i < st.tasks.size(); ++i) {
                    const std::vector<Checkpoint> pair{st.finetuned[0], st.finetuned[i]};
                    const std::vector<StatsBundle> pair_stats{st.stats[0], st.stats[i]};
                    const MethodOutcome o = detail::stage("merge " + m.label + " with " + st.tasks[i].name, [&] {
                        return run_method(m, st.spec, pair, pair_stats, st.pretrained, target);
                    });
                    save_merged(m.label + "_" + st.tasks[i].name, o);
                    acc.push_back(evaluate(st.spec, o.merged, st.tasks[0].test).value);
                    chosen += (chosen.empty() ? "" : "; ") + o.chosen;
                }
                row.chosen.push_back(chosen);
                row.acc.push_back(acc);
            }
        }
        if (res.flops.empty())
            res.flops = flops_rows(st.spec, inter ? 2.0 : static_cast<double>(st.tasks.size()), cfg.flops_cg_iters);
    }

    if (write) {
        const Report rep = emit_report(res);
        detail::write_text(out / "report.md", rep.markdown);
        detail::write_text(out / "report.csv", rep.csv);
        detail::write_text(out / "results.json", res.to_json().dump(1) + "\n");
    }
    return res;
}

}  // namespace mats
