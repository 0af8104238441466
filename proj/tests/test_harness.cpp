// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mats/cli.hpp"

using namespace mats;
namespace fs = std::filesystem;

namespace {

json tiny_config_json() {
    return json::parse(R"({
      "scenario": "multitask",
      "seeds": [3, 4],
      "suite": {"num_tasks": 3, "train_size": 300, "validation_size": 100, "test_size": 100},
      "model": {"hidden": [8]},
      "pretrain": {"steps": 300},
      "finetune": {"steps": 200},
      "multitask": {"steps": 300},
      "methods": [
        {"method": "simple_average"},
        {"method": "task_arithmetic", "lambda": [0.5, 1.0]},
        {"method": "ties", "lambda": [1.0], "trim": [0.5]},
        {"method": "diag_fisher"},
        {"method": "regmean", "gamma": [0.9, 1.0]},
        {"method": "mats", "cg_iters": [5, 20], "lambda": [1.0]}
      ]
    })");
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mats_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int cli(std::vector<std::string> args, std::string* out = nullptr, std::string* err = nullptr) {
    args.insert(args.begin(), "mats");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream o, e;
    const int code = cli_dispatch(static_cast<int>(argv.size()), argv.data(), o, e);
    if (out) *out = o.str();
    if (err) *err = e.str();
    return code;
}

MethodRow row(const std::string& name, std::vector<std::vector<double>> acc) {
    return {name, std::vector<std::string>(acc.size(), "-"), std::move(acc)};
}

}  // namespace

TEST(Config, ParsesAndValidates) {
    const ExperimentConfig c = parse_config(tiny_config_json());
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4}));
    EXPECT_EQ(c.methods.size(), 6u);
    EXPECT_EQ(c.methods[1].lambdas, (std::vector<double>{0.5, 1.0}));
    EXPECT_EQ(c.model_spec().layers(), 2u);

    json j = tiny_config_json();
    j.erase("seeds");
    EXPECT_THROW(parse_config(j), ConfigError);
    j = tiny_config_json();
    j["scenario"] = "bogus";
    EXPECT_THROW(parse_config(j), ConfigError);
    j = tiny_config_json();
    j["methods"][1]["lambda"] = json::array();
    EXPECT_THROW(parse_config(j), ConfigError);
    j = tiny_config_json();
    j["methods"][0]["method"] = "nope";
    EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Config, DefaultGrids) {
    const auto methods = default_methods();
    ASSERT_EQ(methods.size(), 6u);
    EXPECT_EQ(methods[1].lambdas.size(), 10u);
    EXPECT_DOUBLE_EQ(methods[1].lambdas.back(), 1.0);
    EXPECT_EQ(methods[4].gammas.size(), 10u);
    EXPECT_EQ(methods[5].cg_iters.front(), 10u);
    EXPECT_EQ(methods[5].cg_iters.back(), 100u);
}

TEST(Config, ShippedSamplesParse) {
    for (const char* name : {"suite.json", "intermediate.json", "vectors.json"})
        EXPECT_NO_THROW(load_config(std::string(MATS_SAMPLES_DIR) + "/" + name)) << name;
}

TEST(Datasets, CheckpointRoundTrip) {
    SuiteConfig s;
    s.num_tasks = 1;
    s.train_size = 20;
    s.validation_size = s.test_size = 5;
    const TaskDataset ds = gen_synthetic_tasks(s)[0].validation;
    const TaskDataset back = checkpoint_to_dataset(std::get<Checkpoint>(decode(encode(dataset_to_checkpoint(ds)))));
    EXPECT_EQ(back.inputs, ds.inputs);
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.split, Split::validation);
    EXPECT_EQ(back.task_name, ds.task_name);
    EXPECT_EQ(back.classes, ds.classes);
}

TEST(Selection, RefusesNonValidationAccuracies) {
    std::vector<Candidate> c(2);
    c[0].validation = {{0.5, Split::validation, "a"}};
    c[1].validation = {{0.9, Split::test, "a"}};
    EXPECT_THROW(select_by_validation(c), ContractError);
    c[1].validation = {{0.9, Split::train, "a"}};
    EXPECT_THROW(select_by_validation(c), ContractError);
    EXPECT_THROW(select_by_validation(std::span<const Candidate>{}), ContractError);
}

TEST(Selection, PicksBestMeanAndFirstOnTies) {
    std::vector<Candidate> c(3);
    c[0].validation = {{0.5, Split::validation, "a"}, {0.7, Split::validation, "b"}};
    c[1].validation = {{0.8, Split::validation, "a"}, {0.6, Split::validation, "b"}};
    c[2].validation = {{0.6, Split::validation, "a"}, {0.8, Split::validation, "b"}};
    EXPECT_EQ(select_by_validation(c), 1u);
}

TEST(Report, EmptyMethodListGivesHeaderOnlyTables) {
    ScenarioResults r;
    r.seeds = {0};
    r.columns = {"task00", "task01"};
    const Report rep = emit_report(r);
    EXPECT_EQ(rep.csv, "method,task00,task01,avg\n");
    EXPECT_NE(rep.markdown.find("| Method | task00 | task01 | Avg |\n|---|---|---|---|\n\n"), std::string::npos);
    EXPECT_NE(rep.markdown.find("|---|---|---|---|\n"), std::string::npos);
    EXPECT_EQ(rep.markdown.find("| averaging"), std::string::npos);
}

TEST(Report, SingleMethodAverageIsMeanOfColumns) {
    ScenarioResults r;
    r.seeds = {0, 1};
    r.columns = {"a", "b", "c"};
    r.rows.push_back(row("m", {{0.5, 0.6, 0.7}, {0.7, 0.8, 0.9}}));
    const Report rep = emit_report(r);
    EXPECT_NEAR(r.rows[0].average(), (0.6 + 0.7 + 0.8) / 3, 1e-15);
    EXPECT_NE(rep.markdown.find("| m | 60.0 | 70.0 | 80.0 | 70.0 |"), std::string::npos) << rep.markdown;
    std::istringstream csv(rep.csv);
    std::string header, line;
    std::getline(csv, header);
    std::getline(csv, line);
    EXPECT_EQ(line.substr(0, 2), "m,");
    double cols[4];
    ASSERT_EQ(std::sscanf(line.c_str() + 2, "%lf,%lf,%lf,%lf", &cols[0], &cols[1], &cols[2], &cols[3]), 4);
    EXPECT_EQ(cols[3], 100.0 * r.rows[0].average());  // exact, not rounded
    EXPECT_FALSE(std::getline(csv, line));
}

TEST(Report, FlopsTableAndFootnote) {
    ScenarioResults r;
    r.seeds = {0};
    r.flops = flops_rows(MlpSpec::from_widths(std::vector<std::size_t>{16, 32, 32, 4}), 8, 100);
    const Report rep = emit_report(r);
    EXPECT_NE(rep.markdown.find("| averaging | "), std::string::npos);
    EXPECT_NE(rep.markdown.find("| 2.3E6 | 6.3E9 |"), std::string::npos);
    EXPECT_NE(rep.markdown.find("| regmean | 5.2E5 | - | 6.5E12 |"), std::string::npos) << rep.markdown;
}

TEST(Results, JsonRoundTrip) {
    ScenarioResults r;
    r.scenario = "intermediate_task";
    r.seeds = {1, 2};
    r.columns = {"task01"};
    r.rows.push_back(row("x", {{0.1}, {0.30000000000000004}}));
    r.flops.push_back({"averaging", 1, 2, 3});
    const ScenarioResults back = ScenarioResults::from_json(json::parse(r.to_json().dump()));
    EXPECT_EQ(emit_report(back).csv, emit_report(r).csv);
    EXPECT_EQ(emit_report(back).markdown, emit_report(r).markdown);
}

TEST(Pipeline, AveragingIdenticalModelsKeepsAccuracy) {
    const ExperimentConfig cfg = parse_config(tiny_config_json());
    const SeedState st = prepare_seed(cfg, 3);
    const std::vector<Checkpoint> same{st.finetuned[0], st.finetuned[0]};
    const std::vector<StatsBundle> stats{st.stats[0], st.stats[0]};
    const auto merged = run_method(cfg.methods[0], st.spec, same, stats, st.pretrained, st.tasks);
    for (const auto& t : st.tasks)
        EXPECT_EQ(evaluate(st.spec, merged.merged, t.test).value, evaluate(st.spec, st.finetuned[0], t.test).value);
}

TEST(Pipeline, RunProducesReportAndIsByteDeterministic) {
    ExperimentConfig cfg = parse_config(tiny_config_json());
    const fs::path da = fresh_dir("det_a"), db = fresh_dir("det_b");
    cfg.out_dir = da.string();
    const ScenarioResults a = run_scenario(cfg);
    cfg.out_dir = db.string();
    run_scenario(cfg);

    ASSERT_EQ(a.rows.size(), 3u + 6u);
    EXPECT_EQ(a.columns.size(), 3u);
    for (const auto& r : a.rows) {
        EXPECT_EQ(r.acc.size(), 2u) << r.method;
        EXPECT_GE(r.average(), 0.25) << r.method;  // at least chance for 4 classes
    }

    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(da)) {
        if (!e.is_regular_file()) continue;
        const fs::path rel = fs::relative(e.path(), da);
        ASSERT_TRUE(fs::exists(db / rel)) << rel;
        EXPECT_EQ(slurp(e.path()), slurp(db / rel)) << rel;
        ++files;
    }
    EXPECT_GT(files, 30u);
}

TEST(Pipeline, ArtifactsAndDeterminismAcrossRuns) {
    ExperimentConfig cfg = parse_config(tiny_config_json());
    cfg.seeds = {5};
    const fs::path a = fresh_dir("art_a"), b = fresh_dir("art_b");
    cfg.out_dir = a.string();
    run_scenario(cfg);
    cfg.out_dir = b.string();
    run_scenario(cfg);
    for (const char* rel : {"report.md", "report.csv", "results.json", "seed_5/pretrained.mats",
                            "seed_5/models/task00.mats", "seed_5/stats/task02.mats", "seed_5/merged/mats.mats",
                            "seed_5/traces/mats.json", "seed_5/multitask.mats"}) {
        ASSERT_TRUE(fs::exists(a / rel)) << rel;
        EXPECT_EQ(slurp(a / rel), slurp(b / rel)) << rel;
    }
    const json trace = json::parse(slurp(a / "seed_5/traces/mats.json"));
    EXPECT_TRUE(trace.contains("layer0.weight"));
    EXPECT_EQ(load_checkpoint((a / "seed_5/models/task00.mats").string()).task(), "task00");
}

TEST(Pipeline, IntermediateScenarioShape) {
    json j = tiny_config_json();
    j["scenario"] = "intermediate_task";
    j["seeds"] = {1};
    j["intermediate"] = {{"target_train_size", 50}, {"intermediates", 2}};
    const ScenarioResults r = run_scenario(parse_config(j));
    EXPECT_EQ(r.columns, (std::vector<std::string>{"task01", "task02"}));
    ASSERT_NE(r.find("target only"), nullptr);
    ASSERT_NE(r.find("regmean"), nullptr);
    EXPECT_EQ(r.find("regmean")->acc[0].size(), 2u);
    EXPECT_EQ(r.find("multitask"), nullptr);
    // pairwise merges are costed with M = 2
    EXPECT_EQ(r.flops[0].method, "averaging");
    EXPECT_DOUBLE_EQ(r.flops[0].desk,
                     flops_estimate(FlopsMethod::averaging, desk_flops_spec(parse_config(j).model_spec(), 2, 100)));
}

TEST(Pipeline, StageFailureNamesTheStage) {
    json j = tiny_config_json();
    j["model"]["hidden"] = json::array();
    j["suite"]["noise"] = 1e150;
    j["pretrain"]["lr"] = 1e200;
    try {
        run_scenario(parse_config(j));
        FAIL() << "expected divergence";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("stage 'pretrain'"), std::string::npos) << e.what();
    }
}

TEST(Cli, NoArgumentsPrintsUsageAndExitsOne) {
    std::string out, err;
    EXPECT_EQ(cli({}, &out, &err), 1);
    EXPECT_TRUE(out.empty());
    EXPECT_NE(err.find("Usage"), std::string::npos);
}

TEST(Cli, UnknownFlagIsUsageError) {
    std::string err;
    EXPECT_EQ(cli({"flops", "--bogus"}, nullptr, &err), 1);
    EXPECT_NE(err.find("Usage"), std::string::npos);
    EXPECT_EQ(cli({"frobnicate"}, nullptr, &err), 1);
}

TEST(Cli, FlopsPrintsExactCount) {
    std::string out;
    EXPECT_EQ(cli({"flops", "--method", "averaging", "--models", "8", "--params", "282000"}, &out), 0);
    EXPECT_EQ(out, "2256000\n");
    EXPECT_EQ(cli({"flops", "--method", "mats", "--models", "2", "--params", "8", "--layer", "3,2", "--cg-iters",
                   "5"},
                  &out),
              0);
    EXPECT_EQ(out, "501\n");
    std::string err;
    EXPECT_EQ(cli({"flops", "--method", "regmean", "--models", "8", "--params", "10"}, nullptr, &err), 2);
    EXPECT_NE(err.find("layer"), std::string::npos);
}

TEST(Cli, StagesChainThroughFiles) {
    const fs::path dir = fresh_dir("stages");
    const fs::path cfg = dir / "cfg.json";
    json j = tiny_config_json();
    j["seeds"] = {7};
    std::ofstream(cfg) << j.dump();
    const std::string c = cfg.string(), o = (dir / "out").string();
    std::string out, err;
    ASSERT_EQ(cli({"merge", "--config", c, "--out-dir", o, "--method", "simple_average"}, nullptr, &err), 2);
    EXPECT_NE(err.find("train first"), std::string::npos) << err;
    ASSERT_EQ(cli({"gen-data", "--config", c, "--out-dir", o}, &out, &err), 0) << err;
    ASSERT_TRUE(fs::exists(dir / "out/data/base/train.mats"));
    ASSERT_EQ(cli({"train", "--config", c, "--out-dir", o}, &out, &err), 0) << err;
    ASSERT_EQ(cli({"stats", "--config", c, "--out-dir", o, "--fisher-mode", "true"}, &out, &err), 0) << err;
    EXPECT_EQ(load_stats((dir / "out/stats/task01.mats").string()).fisher_mode, FisherMode::true_fisher);
    ASSERT_EQ(cli({"merge", "--config", c, "--out-dir", o, "--method", "mats", "--objective", "block_fisher_kfac",
                   "--init", "average", "--cg-iters", "15"},
                  &out, &err),
              0)
        << err;
    ASSERT_TRUE(fs::exists(dir / "out/merged/mats.trace.json"));
    ASSERT_EQ(cli({"eval", "--config", c, "--out-dir", o, "--model", (dir / "out/merged/mats.mats").string(),
                   "--split", "test"},
                  &out, &err),
              0)
        << err;
    EXPECT_NE(out.find("task02 "), std::string::npos);
    EXPECT_NE(out.find("average "), std::string::npos);

    // The staged pipeline reproduces the in-memory one for the same seed.
    const ExperimentConfig ec = parse_config(j);
    const SeedState st = prepare_seed(ec, 7);
    EXPECT_EQ(encode(load_checkpoint((dir / "out/models/task01.mats").string())), encode(st.finetuned[1]));
}

TEST(Cli, RunAndReport) {
    const fs::path dir = fresh_dir("run");
    json j = tiny_config_json();
    j["seeds"] = {2};
    std::ofstream(dir / "cfg.json") << j.dump();
    std::string out, err;
    ASSERT_EQ(cli({"run", "--config", (dir / "cfg.json").string(), "--out-dir", (dir / "o").string()}, &out, &err), 0)
        << err;
    EXPECT_NE(out.find("| regmean |"), std::string::npos);
    const std::string md = slurp(dir / "o/report.md");
    ASSERT_EQ(cli({"report", "--results", (dir / "o/results.json").string()}, &out, &err), 0) << err;
    EXPECT_EQ(out, md);
    EXPECT_EQ(cli({"report", "--results", (dir / "missing.json").string()}, &out, &err), 2);
}

TEST(Cli, ShippedSuiteRunsViaBinary) {
    const fs::path dir = fresh_dir("binary");
    const std::string cmd = std::string(MATS_CLI_PATH) + " run --config " + MATS_SAMPLES_DIR +
                            "/suite.json --seed 0 --out-dir " + (dir / "o").string() + " > " +
                            (dir / "log").string() + " 2>&1";
    ASSERT_EQ(std::system(cmd.c_str()), 0) << slurp(dir / "log");
    EXPECT_TRUE(fs::exists(dir / "o/report.md"));
    EXPECT_TRUE(fs::exists(dir / "o/report.csv"));
}
