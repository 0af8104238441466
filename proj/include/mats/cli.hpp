// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line front end. Stage subcommands share one working directory
// layout so they can be chained by hand:
//
//   <out>/data/<task>/{train,validation,test}.mats   gen-data
//   <out>/pretrained.mats, <out>/models/<task>.mats  train
//   <out>/stats/<task>.mats                          stats
//   <out>/merged/<label>.mats (+ .trace.json)        merge
//
// `run` executes the whole scenario in memory and writes the same artifacts
// plus report.md, report.csv and results.json.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mats/harness.hpp"

namespace mats {

namespace cli_detail {

namespace fs = std::filesystem;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::string method;
    std::string objective;
    std::string init;
    std::optional<std::size_t> cg_iters;
    std::string fisher_mode;
    std::string split;
    std::string model;
    std::string results;
    std::optional<double> lambda, trim, gamma;
    double models = 0, params = 0;
    std::vector<double> layer_dims;  // flattened d,k pairs
};

inline ExperimentConfig base_config(const Options& o) {
    ExperimentConfig cfg;
    if (!o.config.empty()) {
        cfg = load_config(o.config);
    } else {
        cfg.seeds = {0};
        cfg.methods = default_methods();
    }
    if (o.seed) cfg.seeds = {*o.seed};
    if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
    if (cfg.out_dir.empty()) cfg.out_dir = "mats_out";
    if (!o.fisher_mode.empty()) cfg.fisher_mode = parse_fisher_mode(o.fisher_mode);
    if (!o.split.empty()) cfg.stats_split = parse_split(o.split);
    return cfg;
}

inline SuiteConfig stage_suite(const ExperimentConfig& cfg) { return suite_for_seed(cfg, cfg.seeds.front()); }

inline fs::path data_path(const fs::path& out, const std::string& task, Split s) {
    return out / "data" / task / (std::string(to_string(s)) + ".mats");
}

inline std::vector<std::string> task_names(const ExperimentConfig& cfg) {
    std::vector<std::string> names;
    for (const auto& t : gen_synthetic_tasks(stage_suite(cfg))) names.push_back(t.name);
    return names;
}

inline TaskSplits load_task(const fs::path& out, const std::string& task) {
    TaskSplits t;
    t.name = task;
    auto get = [&](Split s) {
        const fs::path p = data_path(out, task, s);
        if (!fs::exists(p)) throw Error("missing dataset '" + p.string() + "' (run gen-data first)");
        return checkpoint_to_dataset(load_checkpoint(p.string()));
    };
    t.train = get(Split::train);
    t.validation = get(Split::validation);
    t.test = get(Split::test);
    return t;
}

inline std::vector<TaskSplits> load_tasks(const ExperimentConfig& cfg) {
    std::vector<TaskSplits> out;
    for (const auto& name : task_names(cfg)) out.push_back(load_task(cfg.out_dir, name));
    return out;
}

inline Checkpoint load_required(const fs::path& p, const char* hint) {
    if (!fs::exists(p)) throw Error("missing '" + p.string() + "' (" + hint + ")");
    return load_checkpoint(p.string());
}

inline int cmd_gen_data(const Options& o, std::ostream& out) {
    const ExperimentConfig cfg = base_config(o);
    const SuiteConfig suite = stage_suite(cfg);
    std::vector<TaskSplits> tasks = gen_synthetic_tasks(suite);
    tasks.push_back(gen_base_task(suite));
    for (const auto& t : tasks)
        for (Split s : {Split::train, Split::validation, Split::test}) {
            const fs::path p = data_path(cfg.out_dir, t.name, s);
            fs::create_directories(p.parent_path());
            save(p.string(), dataset_to_checkpoint(t.get(s)));
        }
    out << "wrote " << tasks.size() << " tasks to " << (fs::path(cfg.out_dir) / "data").string() << "\n";
    return 0;
}

inline int cmd_train(const Options& o, std::ostream& out) {
    const ExperimentConfig cfg = base_config(o);
    const std::uint64_t seed = cfg.seeds.front();
    const MlpSpec spec = cfg.model_spec();
    const fs::path dir(cfg.out_dir);
    const TaskSplits base = load_task(dir, "base");
    TrainConfig tc = cfg.pretrain;
    tc.seed = Rng(seed).split(0x9E37).seed();
    tc.trainable = Trainable::all;
    const Checkpoint pre = train(spec, init_params(spec, seed), std::span<const TaskDataset>(&base.train, 1), tc,
                                 "pretrained");
    save((dir / "pretrained.mats").string(), pre);
    const auto tasks = load_tasks(cfg);
    fs::create_directories(dir / "models");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const Checkpoint m = finetune_model(cfg, spec, pre, tasks[i], seed, i);
        save((dir / "models" / (tasks[i].name + ".mats")).string(), m);
        out << tasks[i].name << " validation accuracy " << evaluate(spec, m, tasks[i].validation).value << "\n";
    }
    return 0;
}

inline int cmd_stats(const Options& o, std::ostream& out) {
    const ExperimentConfig cfg = base_config(o);
    const MlpSpec spec = cfg.model_spec();
    const fs::path dir(cfg.out_dir);
    const auto tasks = load_tasks(cfg);
    fs::create_directories(dir / "stats");
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const Checkpoint m = load_required(dir / "models" / (tasks[i].name + ".mats"), "run train first");
        save((dir / "stats" / (tasks[i].name + ".mats")).string(),
             task_stats(cfg, spec, m, tasks[i], cfg.seeds.front(), i));
    }
    out << "wrote statistics for " << tasks.size() << " tasks (" << to_string(cfg.fisher_mode) << " Fisher, "
        << to_string(cfg.stats_split) << " split)\n";
    return 0;
}

inline int cmd_merge(const Options& o, std::ostream& out) {
    if (o.method.empty()) throw ConfigError("merge: --method is required");
    const ExperimentConfig cfg = base_config(o);
    const fs::path dir(cfg.out_dir);
    std::vector<Checkpoint> models;
    std::vector<StatsBundle> stats;
    const auto names = task_names(cfg);
    for (const auto& name : names) models.push_back(load_required(dir / "models" / (name + ".mats"), "run train first"));
    const Checkpoint pre = load_required(dir / "pretrained.mats", "run train first");
    const bool needs_stats = o.method == "diag_fisher" || o.method == "regmean" || o.method == "mats";
    if (needs_stats)
        for (const auto& name : names) {
            const fs::path p = dir / "stats" / (name + ".mats");
            if (!fs::exists(p)) throw Error("missing '" + p.string() + "' (run stats first)");
            stats.push_back(load_stats(p.string()));
        }

    json mj{{"method", o.method}};
    if (o.lambda) mj["lambda"] = std::vector<double>{*o.lambda};
    if (o.trim) mj["trim"] = std::vector<double>{*o.trim};
    if (o.gamma) mj["gamma"] = std::vector<double>{*o.gamma};
    if (o.cg_iters) mj["cg_iters"] = std::vector<std::size_t>{*o.cg_iters};
    if (!o.objective.empty()) mj["objective"] = o.objective;
    if (!o.init.empty()) mj["init"] = o.init;
    MethodSpec m = detail::parse_method(mj);
    // Without an explicit value a single merge uses the first grid point.
    m.lambdas.resize(1);
    m.trims.resize(1);
    m.gammas.resize(1);
    m.cg_iters = {o.cg_iters.value_or(100)};
    auto cands = method_candidates(m, models, stats, pre);
    const Candidate& c = cands.front();
    fs::create_directories(dir / "merged");
    const fs::path target = dir / "merged" / (detail::safe_name(m.label) + ".mats");
    save(target.string(), c.merged);
    if (!c.trace.is_null())
        detail::write_text(dir / "merged" / (detail::safe_name(m.label) + ".trace.json"), c.trace.dump(1) + "\n");
    out << "wrote " << target.string() << " (" << c.hyperparams << ")\n";
    return 0;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
    if (o.model.empty()) throw ConfigError("eval: --model is required");
    const ExperimentConfig cfg = base_config(o);
    const Split split = o.split.empty() ? Split::validation : parse_split(o.split);
    const MlpSpec spec = cfg.model_spec();
    const Checkpoint params = load_checkpoint(o.model);
    const auto tasks = load_tasks(cfg);
    const auto accs = evaluate_tasks(spec, params, tasks, split);
    for (const auto& a : accs) out << a.task << ' ' << detail::exact(a.value) << '\n';
    out << "average " << detail::exact(mean_accuracy(accs)) << '\n';
    return 0;
}

inline int cmd_flops(const Options& o, std::ostream& out) {
    if (o.method.empty()) throw ConfigError("flops: --method is required");
    if (o.layer_dims.size() % 2 != 0) throw ConfigError("flops: --layer takes d,k pairs");
    FlopsModelSpec spec{o.models, o.params, {}, std::nullopt};
    for (std::size_t i = 0; i < o.layer_dims.size(); i += 2) spec.layers.push_back({o.layer_dims[i], o.layer_dims[i + 1], 1});
    if (o.cg_iters) spec.cg_iters = static_cast<double>(*o.cg_iters);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", flops_estimate(parse_flops_method(o.method), spec));
    out << buf << '\n';
    return 0;
}

inline int cmd_run(const Options& o, std::ostream& out) {
    const ExperimentConfig cfg = base_config(o);
    const ScenarioResults res = run_scenario(cfg);
    out << emit_report(res).markdown;
    out << "\nartifacts written to " << cfg.out_dir << "\n";
    return 0;
}

inline int cmd_report(const Options& o, std::ostream& out) {
    fs::path results = o.results;
    if (results.empty()) {
        if (o.out_dir.empty()) throw ConfigError("report: pass --results or --out-dir");
        results = fs::path(o.out_dir) / "results.json";
    }
    std::ifstream in(results);
    if (!in) throw Error("cannot open results '" + results.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("results '" + results.string() + "': " + e.what(), 0);
    }
    const Report rep = emit_report(ScenarioResults::from_json(j));
    if (!o.out_dir.empty()) {
        detail::write_text(fs::path(o.out_dir) / "report.md", rep.markdown);
        detail::write_text(fs::path(o.out_dir) / "report.csv", rep.csv);
    }
    out << rep.markdown;
    return 0;
}

}  // namespace cli_detail

// Exit codes: 0 success, 1 usage error (message and usage on err), 2 runtime error.
inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
    using namespace cli_detail;
    Options o;
    CLI::App app{"Merging models by solving a linear system with conjugate gradient", "mats"};
    app.require_subcommand(1);

    auto common = [&](CLI::App* sc) {
        sc->add_option("--config", o.config, "JSON experiment config");
        sc->add_option("--seed", o.seed, "override the config's seed list with one seed");
        sc->add_option("--out-dir", o.out_dir, "artifact directory (default: config out_dir or mats_out)");
    };
    auto* gen = app.add_subcommand("gen-data", "generate the synthetic task suite");
    auto* trn = app.add_subcommand("train", "pretrain and fine-tune one model per task");
    auto* sts = app.add_subcommand("stats", "collect Fisher and Gram statistics for each fine-tuned model");
    auto* mrg = app.add_subcommand("merge", "merge the fine-tuned models with one method");
    auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on every task");
    auto* flp = app.add_subcommand("flops", "estimate merge cost in FLOPs");
    auto* run = app.add_subcommand("run", "run a full scenario and write the report");
    auto* rep = app.add_subcommand("report", "render report tables from results.json");
    for (auto* sc : {gen, trn, sts, mrg, evl, run}) common(sc);
    sts->add_option("--fisher-mode", o.fisher_mode, "empirical or true");
    sts->add_option("--split", o.split, "dataset split used for statistics");
    mrg->add_option("--method", o.method, "simple_average|task_arithmetic|ties|diag_fisher|regmean|mats");
    mrg->add_option("--objective", o.objective, "MaTS objective");
    mrg->add_option("--init", o.init, "MaTS initialisation");
    mrg->add_option("--cg-iters", o.cg_iters, "MaTS conjugate-gradient iterations");
    mrg->add_option("--lambda", o.lambda, "task-vector scale");
    mrg->add_option("--trim", o.trim, "TIES trim fraction");
    mrg->add_option("--gamma", o.gamma, "RegMean off-diagonal scale");
    evl->add_option("--model", o.model, "checkpoint to evaluate");
    evl->add_option("--split", o.split, "dataset split (default validation)");
    flp->add_option("--method", o.method, "averaging|task_arithmetic|ties|diag_fisher|regmean|mats");
    flp->add_option("--models", o.models, "number of merged models M")->required();
    flp->add_option("--params", o.params, "total parameter count p")->required();
    flp->add_option("--layer", o.layer_dims, "linear layer shape d,k (repeatable)")->delimiter(',');
    flp->add_option("--cg-iters", o.cg_iters, "CG iterations N for mats");
    run->add_option("--fisher-mode", o.fisher_mode, "empirical or true");
    run->add_option("--split", o.split, "dataset split used for statistics");
    rep->add_option("--results", o.results, "results.json from a previous run");
    rep->add_option("--out-dir", o.out_dir, "write report.md and report.csv here");

    if (argc <= 1) {
        err << app.help();
        return 1;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "mats: " << e.what() << "\n\n";
        CLI::App* failing = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << failing->help();
        return 1;
    }

    CLI::App* sc = app.get_subcommands().front();
    const std::string name = sc->get_name();
    try {
        if (name == "gen-data") return cmd_gen_data(o, out);
        if (name == "train") return cmd_train(o, out);
        if (name == "stats") return cmd_stats(o, out);
        if (name == "merge") return cmd_merge(o, out);
        if (name == "eval") return cmd_eval(o, out);
        if (name == "flops") return cmd_flops(o, out);
        if (name == "run") return cmd_run(o, out);
        return cmd_report(o, out);
    } catch (const std::exception& e) {
        err << "mats " << name << ": " << e.what() << "\n";
        return 2;
    }
}

}  // namespace mats
