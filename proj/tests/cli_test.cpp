// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "deltamoe/pipeline.hpp"
#include "test_util.hpp"

namespace deltamoe {
namespace {

namespace fs = std::filesystem;

struct CliResult {
    int status = -1;
    std::string out, err;
    std::map<std::string, std::string> outputs;
    fs::path run;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

CliResult cli(const std::string& args, const std::string& env = "") {
    static int n = 0;
    const auto dir = testing::temp_dir("cli_io");
    const auto out = dir / ("out" + std::to_string(n));
    const auto err = dir / ("err" + std::to_string(n++));
    const std::string cmd = env + " " + DELTAMOE_CLI_PATH + " " + args + " > " + out.string() + " 2> " + err.string();
    CliResult r;
    const int raw = std::system(cmd.c_str());
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    std::istringstream lines(r.out);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.rfind("run ", 0) == 0) r.run = line.substr(4);
        if (line.rfind("output ", 0) == 0) {
            const auto sp = line.find(' ', 7);
            r.outputs[line.substr(7, sp - 7)] = line.substr(sp + 1);
        }
    }
    return r;
}

// Small enough for a few seconds end to end.
fs::path tiny_config_file() {
    const auto dir = testing::temp_dir("cli_cfg");
    const auto path = dir / "tiny.cfg";
    std::ofstream out(path);
    out << "model.d_model = 16\nmodel.ffn_dim = 24\nmodel.n_heads = 2\nmodel.max_seq_len = 32\n"
           "data.original.n_tokens = 4000\ndata.expanded.n_tokens = 3000\ndata.eval_tokens = 1500\n"
           "data.echo_payloads = 12\ndata.max_payload = 4\n"
           "pretrain.steps = 6\npretrain.batch_size = 4\nposttrain.steps = 6\nposttrain.batch_size = 4\n"
           "cpt.steps = 6\ncpt.batch_size = 4\nrouter_tune.steps = 4\nrouter_tune.batch_size = 4\n"
           "eval.route_tokens = 400\n";
    return path;
}

std::string base_args(const std::string& workdir) {
    return "--config " + tiny_config_file().string() + " --workdir " + workdir;
}

std::map<std::string, std::string> artifact_files(const fs::path& run) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(run)) {
        if (!e.is_regular_file()) continue;
        files[fs::relative(e.path(), run).string()] = slurp(e.path());
    }
    return files;
}

TEST(Cli, PipelineIsReproducible) {
    const auto work = testing::temp_dir("cli_pipeline").string();
    const auto a = cli("pipeline --seed 7 " + base_args(work));
    ASSERT_EQ(a.status, 0) << a.err;
    const auto b = cli("pipeline --seed 7 " + base_args(work));
    ASSERT_EQ(b.status, 0) << b.err;
    ASSERT_NE(a.run, b.run);
    const auto fa = artifact_files(a.run), fb = artifact_files(b.run);
    ASSERT_EQ(fa.size(), fb.size());
    for (const auto& [name, bytes] : fa) {
        ASSERT_TRUE(fb.count(name)) << name;
        EXPECT_TRUE(bytes == fb.at(name)) << name;
    }
    for (const char* f : {"checkpoints/base.ckpt", "checkpoints/post.ckpt", "checkpoints/deltamoe.ckpt",
                          "checkpoints/deltamoe_rt.ckpt", "checkpoints/dense_ft_avg.ckpt", "delta.bin",
                          "reports/tradeoff.json", "reports/tradeoff.csv", "reports/route_stats_deltamoe_rt.csv",
                          "reports/merge_deltamoe.json", "logs/cpt.jsonl", "config.resolved", "run.json"}) {
        EXPECT_TRUE(fa.count(f)) << f;
    }
    EXPECT_EQ(a.outputs.size(), 9u);
    EXPECT_EQ(a.outputs, b.outputs);
    const auto report = nlohmann::json::parse(fa.at("reports/tradeoff.json"));
    ASSERT_EQ(report.size(), 9u);
    for (const auto& row : report) EXPECT_EQ(row["hash"], a.outputs.at(row["model_id"].get<std::string>()));
    const auto c = cli("pipeline --seed 8 " + base_args(work));
    ASSERT_EQ(c.status, 0) << c.err;
    EXPECT_NE(c.outputs.at("base"), a.outputs.at("base"));
}

TEST(Cli, StagesDiffAndMerge) {
    const auto work = testing::temp_dir("cli_stages").string();
    const auto args = base_args(work);
    const auto gen = cli("gen-corpus " + args);
    ASSERT_EQ(gen.status, 0) << gen.err;
    const auto corpora = (gen.run / "corpora").string();
    const auto pre = cli("pretrain --corpora " + corpora + " " + args);
    ASSERT_EQ(pre.status, 0) << pre.err;
    const auto base = (pre.run / "base.ckpt").string();
    const auto post_run = cli("posttrain " + base + " --corpora " + corpora + " " + args);
    ASSERT_EQ(post_run.status, 0) << post_run.err;
    const auto post = (post_run.run / "post.ckpt").string();
    EXPECT_EQ(load(post).provenance.parent, pre.outputs.at("base.ckpt"));

    const auto d = cli("diff " + base + " " + post + " " + args);
    ASSERT_EQ(d.status, 0) << d.err;
    const auto delta = (d.run / "delta.bin").string();
    const auto report = nlohmann::json::parse(slurp(d.run / "reports/diff.json"));
    EXPECT_EQ(report["a"], pre.outputs.at("base.ckpt"));
    EXPECT_TRUE(report["only_in_a"].empty());

    const auto rebuilt = cli("merge " + base + " --delta " + delta + " " + args);
    ASSERT_EQ(rebuilt.status, 0) << rebuilt.err;
    EXPECT_EQ(rebuilt.outputs.at("merged.ckpt"), post_run.outputs.at("post.ckpt"));

    // grafting onto a fresh upcycle reproduces the post model's behaviour
    const auto up = cli("upcycle " + base + " " + args);
    ASSERT_EQ(up.status, 0) << up.err;
    const auto graft = cli("merge " + (up.run / "moe.ckpt").string() + " --delta " + delta + " " + args);
    ASSERT_EQ(graft.status, 0) << graft.err;
    const auto merged = (graft.run / "merged.ckpt").string();
    const auto ev = cli("eval " + post + " " + merged + " --corpora " + corpora + " " + args);
    ASSERT_EQ(ev.status, 0) << ev.err;
    const auto rows = nlohmann::json::parse(slurp(ev.run / "reports/tradeoff.json"));
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0]["model_id"], "post");
    EXPECT_EQ(rows[1]["model_id"], "merged");
    for (const char* k : {"ppl_expanded", "ppl_original"}) {
        const double p = rows[0][k], m = rows[1][k];
        EXPECT_NEAR(m, p, 1e-4 * p) << k;
    }
    EXPECT_EQ(rows[0]["echo_original"], rows[1]["echo_original"]);

    const auto cpt = cli("cpt " + (up.run / "moe.ckpt").string() + " --corpora " + corpora + " " + args);
    ASSERT_EQ(cpt.status, 0) << cpt.err;
    const auto rt = cli("router-tune " + (cpt.run / "cpt.ckpt").string() + " --corpora " + corpora + " " + args);
    ASSERT_EQ(rt.status, 0) << rt.err;
    const auto rs = cli("route-stats " + (rt.run / "router_tuned.ckpt").string() + " --corpora " + corpora + " " + args);
    ASSERT_EQ(rs.status, 0) << rs.err;
    const auto csv = slurp(rs.run / "reports/route_stats.csv");
    EXPECT_EQ(csv.rfind("layer,expert,language,count,frequency\n", 0), 0u);

    const auto avg = cli("merge " + post + " --strategy avg --lambda 0.5 --with " + base + " " + args);
    ASSERT_EQ(avg.status, 0) << avg.err;
    const auto moe_avg = cli("merge " + (cpt.run / "cpt.ckpt").string() + " --strategy moe_avg --with " + post + " " + args);
    ASSERT_EQ(moe_avg.status, 0) << moe_avg.err;
    EXPECT_EQ(nlohmann::json::parse(slurp(moe_avg.run / "reports/merge.json"))["strategy"], "moe_avg");
    const auto run = nlohmann::json::parse(slurp(moe_avg.run / "run.json"));
    EXPECT_EQ(run["command"], "merge");
    EXPECT_EQ(run["outputs"]["merged.ckpt"], moe_avg.outputs.at("merged.ckpt"));
    EXPECT_EQ(run["inputs"].size(), 2u);
}

TEST(Cli, ConfigPrecedence) {
    const auto dir = testing::temp_dir("cli_prec");
    const auto cfg = dir / "p.cfg";
    {
        std::ofstream out(cfg);
        out << "seed = 3\nmerge.lambda = 0.1\n";
    }
    auto resolved = [&](const std::string& extra, const std::string& env) {
        const auto r = cli("upcycle missing.ckpt --config " + cfg.string() + " --workdir " + (dir / "w").string() + " " + extra, env);
        // the run directory exists even though the input is missing
        const auto runs = dir / "w";
        fs::path newest;
        for (const auto& e : fs::directory_iterator(runs)) {
            if (newest.empty() || e.path().string() > newest.string()) newest = e.path();
        }
        RunConfig c;
        apply_text(c, slurp(newest / "config.resolved"));
        fs::remove_all(runs);
        EXPECT_EQ(r.status, 1);
        return c;
    };
    EXPECT_EQ(resolved("", "").seed, 3u);
    EXPECT_EQ(resolved("", "DELTAMOE_SEED=5").seed, 5u);
    EXPECT_EQ(resolved("--set seed=6", "DELTAMOE_SEED=5").seed, 6u);
    EXPECT_EQ(resolved("--set seed=6 --seed 8", "DELTAMOE_SEED=5").seed, 8u);
    const auto c = resolved("--lambda 0.75", "DELTAMOE_LAMBDA=0.2");
    EXPECT_EQ(c.merge_lambda, 0.75);
    EXPECT_EQ(resolved("", "DELTAMOE_LAMBDA=0.2").merge_lambda, 0.2);
}

TEST(Cli, ErrorsExitWithCodeLine) {
    const auto work = testing::temp_dir("cli_err").string();
    const auto missing = cli("upcycle /nonexistent/x.ckpt --workdir " + work);
    EXPECT_EQ(missing.status, 1);
    EXPECT_EQ(missing.err.rfind("error E_IO: ", 0), 0u) << missing.err;

    const auto bad_key = cli("gen-corpus --set no.such=1 --workdir " + work);
    EXPECT_EQ(bad_key.status, 1);
    EXPECT_EQ(bad_key.err.rfind("error E_CONFIG: ", 0), 0u) << bad_key.err;

    const auto bad_value = cli("gen-corpus --lambda 2 --workdir " + work);
    EXPECT_EQ(bad_value.status, 1);
    EXPECT_EQ(bad_value.err.rfind("error E_CONFIG: ", 0), 0u) << bad_value.err;

    const auto garbage = testing::temp_dir("cli_err_file") / "junk.ckpt";
    {
        std::ofstream out(garbage);
        out << "not a checkpoint";
    }
    const auto parse = cli("upcycle " + garbage.string() + " --workdir " + work);
    EXPECT_EQ(parse.status, 1);
    EXPECT_EQ(parse.err.rfind("error E_PARSE: ", 0), 0u) << parse.err;

    const auto args = base_args(work);
    const auto pre = cli("pretrain " + args);
    ASSERT_EQ(pre.status, 0) << pre.err;
    const auto base = (pre.run / "base.ckpt").string();
    const auto dense_rs = cli("route-stats " + base + " " + args);
    EXPECT_EQ(dense_rs.status, 1);
    EXPECT_EQ(dense_rs.err.rfind("error E_ARGUMENT: ", 0), 0u) << dense_rs.err;

    const auto no_delta = cli("merge " + base + " " + args);
    EXPECT_EQ(no_delta.status, 1);
    EXPECT_EQ(no_delta.err.rfind("error E_ARGUMENT: ", 0), 0u) << no_delta.err;

    const auto up = cli("upcycle " + base + " " + args);
    ASSERT_EQ(up.status, 0);
    const auto incompatible = cli("diff " + base + " " + (up.run / "moe.ckpt").string() + " " + args);
    EXPECT_EQ(incompatible.status, 1);
    EXPECT_EQ(incompatible.err.rfind("error E_INCOMPATIBLE: ", 0), 0u) << incompatible.err;

    const auto usage = cli("frobnicate");
    EXPECT_NE(usage.status, 0);
}

}  // namespace
}  // namespace deltamoe
