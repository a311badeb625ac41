// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Stage wiring shared by the command-line tool and the acceptance suite.

#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "json.hpp"

#include "deltamoe/analytics.hpp"
#include "deltamoe/checkpoint.hpp"
#include "deltamoe/moe.hpp"
#include "deltamoe/run_config.hpp"
#include "deltamoe/surgery.hpp"
#include "deltamoe/trainer.hpp"

namespace deltamoe {

namespace fs = std::filesystem;

// Seed streams derived from the run seed.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kPretrain = 2;
inline constexpr std::uint64_t kPosttrain = 3;
inline constexpr std::uint64_t kCpt = 4;
inline constexpr std::uint64_t kRouterTune = 6;
inline constexpr std::uint64_t kPayloads = 7;
}  // namespace streams

// ---- corpora -----------------------------------------------------------------

struct Corpora {
    Corpus original, expanded;            // training splits
    Corpus original_eval, expanded_eval;  // held out
    Corpus pretrain_extra;                // expansion sample mixed into pretraining; may be empty
    std::vector<std::vector<TokenId>> original_payloads, expanded_payloads;

    EvalSet eval_set() const { return {original_eval, expanded_eval, original_payloads, expanded_payloads}; }
};

namespace pipeline_detail {

inline std::size_t scaled(std::size_t n, double m) {
    return std::max<std::size_t>(1000, static_cast<std::size_t>(std::llround(static_cast<double>(n) * m)));
}

// File corpora: trailing documents up to `eval_tokens` are held out.
inline std::pair<Corpus, Corpus> split_file(const LanguageSource& src, std::size_t eval_tokens) {
    Corpus all = ingest_text_file(src.file, src.spec.tag);
    Corpus train{all.tag, {}, all.provenance}, eval{all.tag, {}, all.provenance + " (held out)"};
    std::size_t n = 0;
    std::size_t cut = all.documents.size();
    while (cut > 1 && n < eval_tokens) n += all.documents[--cut].size();
    train.documents.assign(all.documents.begin(), all.documents.begin() + static_cast<std::ptrdiff_t>(cut));
    eval.documents.assign(all.documents.begin() + static_cast<std::ptrdiff_t>(cut), all.documents.end());
    return {train, eval};
}

inline Corpus generated(const LanguageSpec& base, std::size_t n_tokens, std::uint64_t stream) {
    LanguageSpec s = base;
    s.n_tokens = n_tokens;
    s.sample_stream = stream;
    return gen_language(s);
}

}  // namespace pipeline_detail

inline Corpora build_corpora(const RunConfig& cfg) {
    using pipeline_detail::generated;
    using pipeline_detail::scaled;
    Corpora c;
    if (!cfg.original.file.empty()) {
        std::tie(c.original, c.original_eval) = pipeline_detail::split_file(cfg.original, cfg.eval_tokens);
    } else {
        c.original = generated(cfg.original.spec, cfg.original.spec.n_tokens, 0);
        c.original_eval = generated(cfg.original.spec, std::max<std::size_t>(1000, cfg.eval_tokens), 1);
    }
    if (!cfg.expanded.file.empty()) {
        std::tie(c.expanded, c.expanded_eval) = pipeline_detail::split_file(cfg.expanded, cfg.eval_tokens);
    } else {
        c.expanded = generated(cfg.expanded.spec, scaled(cfg.expanded.spec.n_tokens, cfg.token_multiplier), 0);
        c.expanded_eval = generated(cfg.expanded.spec, std::max<std::size_t>(1000, cfg.eval_tokens), 1);
    }
    if (cfg.pretrain_exp_fraction > 0.0) {
        const std::size_t n = scaled(c.original.num_tokens(), cfg.pretrain_exp_fraction);
        if (cfg.expanded.file.empty()) {
            c.pretrain_extra = generated(cfg.expanded.spec, n, 2);
        } else {
            c.pretrain_extra = Corpus{c.expanded.tag, {}, c.expanded.provenance};
            std::size_t have = 0;
            for (const auto& d : c.expanded.documents) {
                if (have >= n) break;
                c.pretrain_extra.documents.push_back(d);
                have += d.size();
            }
        }
    }
    c.original_payloads = sample_payloads(c.original_eval, cfg.echo_payloads, rng::mix(cfg.seed, streams::kPayloads),
                                          cfg.max_payload);
    c.expanded_payloads = sample_payloads(c.expanded_eval, cfg.echo_payloads,
                                          rng::mix(cfg.seed, streams::kPayloads + 1), cfg.max_payload);
    return c;
}

// Reads the caches written by gen-corpus; payloads are re-sampled from the
// held-out splits exactly as build_corpora does.
inline Corpora load_corpora(const std::string& dir, const RunConfig& cfg) {
    const fs::path d(dir);
    Corpora c;
    c.original = load_token_cache((d / "original.train.tok").string(), cfg.original.spec.tag);
    c.original_eval = load_token_cache((d / "original.eval.tok").string(), cfg.original.spec.tag);
    c.expanded = load_token_cache((d / "expanded.train.tok").string(), cfg.expanded.spec.tag);
    c.expanded_eval = load_token_cache((d / "expanded.eval.tok").string(), cfg.expanded.spec.tag);
    if (fs::exists(d / "expanded.pretrain.tok")) {
        c.pretrain_extra = load_token_cache((d / "expanded.pretrain.tok").string(), cfg.expanded.spec.tag);
    }
    c.original_payloads = sample_payloads(c.original_eval, cfg.echo_payloads, rng::mix(cfg.seed, streams::kPayloads),
                                          cfg.max_payload);
    c.expanded_payloads = sample_payloads(c.expanded_eval, cfg.echo_payloads,
                                          rng::mix(cfg.seed, streams::kPayloads + 1), cfg.max_payload);
    return c;
}

// ---- run directories ---------------------------------------------------------

// One timestamped directory per invocation. run.json records the resolved
// config file name, input and output hashes; logs/ holds the train logs.
class RunDir {
public:
    RunDir(const RunConfig& cfg, const std::string& command) : command_(command) {
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&now, &tm);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
        const fs::path root(cfg.workdir);
        fs::create_directories(root);
        fs::path p = root / (command + "-" + stamp);
        for (int i = 1; fs::exists(p); ++i) p = root / (command + "-" + stamp + "-" + std::to_string(i));
        fs::create_directories(p / "logs");
        path_ = p;
        write("config.resolved", to_text(cfg));
    }

    const fs::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

    void write(const std::string& name, const std::string& text) const {
        const fs::path p = path_ / name;
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        std::ofstream out(p, std::ios::trunc | std::ios::binary);
        if (!out) throw IoError("cannot write " + p.string());
        out << text;
    }

    void input(const std::string& name, const std::string& hash) { inputs_[name] = hash; }
    void output(const std::string& name, const std::string& hash) { outputs_[name] = hash; }

    std::string save_model(const Model<float>& m, const std::string& name, const Provenance& prov) {
        const std::string h = save(m, file(name), prov);
        if (load(file(name)).hash != h) throw IoError("checkpoint " + name + " did not read back identically");
        output(name, h);
        return h;
    }

    void finish() const {
        nlohmann::ordered_json j;
        j["command"] = command_;
        j["config"] = "config.resolved";
        j["inputs"] = inputs_;
        j["outputs"] = outputs_;
        write("run.json", j.dump(2) + "\n");
    }

private:
    std::string command_;
    fs::path path_;
    std::map<std::string, std::string> inputs_, outputs_;
};

// ---- stages ------------------------------------------------------------------

inline RunStageOptions progress(const std::string& label, std::size_t every = 100, std::string last_good = {}) {
    RunStageOptions o;
    o.last_good_checkpoint = std::move(last_good);
    const auto t0 = std::chrono::steady_clock::now();
    o.on_step = [label, every, t0](const TrainRecord& r) {
        if (every == 0 || r.step % every != 0) return;
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << label << " step " << r.step << " L=" << r.total << " L_NTP=" << r.ntp << " L_LB=" << r.lb
                  << " lr=" << r.lr << " (" << static_cast<int>(s) << "s)\n";
    };
    return o;
}

inline StageResult<float> pretrain_stage(const RunConfig& cfg, const Corpora& c, const RunStageOptions& opts = {}) {
    const auto plan = make_plan(cfg, Stage::pretrain, cfg.pretrain, streams::kPretrain);
    std::vector<Corpus> data{c.original};
    if (!c.pretrain_extra.documents.empty()) data.push_back(c.pretrain_extra);
    auto stream = batch_stream(data, plan.batch_size, plan.seq_len, plan.seed);
    return run_stage(init_dense<float>(cfg.model, rng::mix(cfg.seed, streams::kInit)), plan, *stream, opts);
}

inline StageResult<float> posttrain_stage(const RunConfig& cfg, const Model<float>& base, const Corpora& c,
                                          const RunStageOptions& opts = {}) {
    const auto plan = make_plan(cfg, Stage::posttrain, cfg.posttrain, streams::kPosttrain);
    std::unique_ptr<BatchStream> stream =
        synth_posttrain_task(c.original, plan.seed, plan.batch_size, plan.seq_len, cfg.max_payload);
    if (cfg.posttrain_text_batches > 0) {
        // plain text from the pretraining mixture
        std::vector<Corpus> text{c.original};
        if (!c.pretrain_extra.documents.empty()) text.push_back(c.pretrain_extra);
        stream = std::make_unique<ReplayStream>(
            std::move(stream), batch_stream(text, plan.batch_size, plan.seq_len, rng::mix(plan.seed, 1)),
            ReplayRatio{1, cfg.posttrain_text_batches});
    }
    return run_stage(base, plan, *stream, opts);
}

// MoE CPT trains the expansion experts and routers; on a dense model this is
// the dense baseline and trains everything. Both see the same batch order.
inline StageResult<float> cpt_stage(const RunConfig& cfg, const Model<float>& model, const Corpora& c,
                                    const RunStageOptions& opts = {}) {
    const auto plan = make_plan(cfg, Stage::cpt, cfg.cpt, streams::kCpt);
    auto stream = batch_stream({c.expanded}, plan.batch_size, plan.seq_len, plan.seed);
    return run_stage(model, plan, *stream, opts);
}

inline StageResult<float> router_tune_stage(const RunConfig& cfg, const Model<float>& moe, const Corpora& c,
                                            const RunStageOptions& opts = {}) {
    const auto plan = make_plan(cfg, Stage::router_tune, cfg.router_tune, streams::kRouterTune);
    auto stream = make_replay_stream(c.original, c.expanded, plan.replay, plan.batch_size, plan.seq_len, plan.seed);
    return run_stage(moe, plan, *stream, opts);
}

// ---- full pipeline -----------------------------------------------------------

struct PipelineResult {
    fs::path dir;
    TradeoffReport report;
    std::map<std::string, RouterStats> routes;  // by model id
    std::map<std::string, std::string> hashes;  // by model id
};

inline void write_corpora(RunDir& run, const Corpora& c) {
    auto put = [&](const Corpus& corpus, const std::string& name) {
        save_token_cache(corpus, run.file("corpora/" + name));
    };
    fs::create_directories(run.path() / "corpora");
    put(c.original, "original.train.tok");
    put(c.original_eval, "original.eval.tok");
    put(c.expanded, "expanded.train.tok");
    put(c.expanded_eval, "expanded.eval.tok");
    if (!c.pretrain_extra.documents.empty()) put(c.pretrain_extra, "expanded.pretrain.tok");
}

// gen-corpus -> pretrain -> posttrain -> diff -> upcycle -> cpt -> merge(delta)
// -> router-tune -> eval -> route-stats, plus the dense and averaging
// baselines built from the same base, post, delta and CPT data.
inline PipelineResult run_pipeline(const RunConfig& cfg, RunDir& run, std::ostream& log = std::cerr) {
    validate(cfg);
    kernels::set_num_threads(static_cast<int>(cfg.threads));
    PipelineResult out;
    out.dir = run.path();
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
    auto note = [&](const std::string& what) { log << "[" << static_cast<int>(elapsed()) << "s] " << what << "\n"; };

    const Corpora c = build_corpora(cfg);
    write_corpora(run, c);
    note("corpora ready");

    std::map<std::string, Model<float>> models;
    auto keep = [&](const std::string& id, Model<float> m, const std::string& stage, const std::string& parent) {
        out.hashes[id] = run.save_model(m, "checkpoints/" + id + ".ckpt", {stage, parent, cfg.seed});
        models.emplace(id, std::move(m));
        note(id + " " + out.hashes[id].substr(0, 12));
    };
    auto save_log = [&](const TrainLog& l, const std::string& name) { l.write_jsonl(run.file("logs/" + name + ".jsonl")); };

    auto pre = pretrain_stage(cfg, c, progress("pretrain"));
    save_log(pre.log, "pretrain");
    keep("base", std::move(pre.model), "pretrain", "");

    auto post = posttrain_stage(cfg, models.at("base"), c, progress("posttrain", 100, "checkpoints/base.ckpt"));
    save_log(post.log, "posttrain");
    keep("post", std::move(post.model), "posttrain", out.hashes.at("base"));

    const Delta delta = compute_delta(models.at("base"), models.at("post"), out.hashes.at("base"), out.hashes.at("post"));
    run.output("delta.bin", save_delta(delta, run.file("delta.bin")));

    const auto moe0 = upcycle(models.at("base"), cfg.model.n_experts, cfg.model.top_k);
    auto moe = cpt_stage(cfg, moe0, c, progress("cpt", 100, "checkpoints/base.ckpt"));
    save_log(moe.log, "cpt");
    keep("moe_cpt", std::move(moe.model), "cpt", out.hashes.at("base"));

    auto graft = graft_delta_moe(models.at("moe_cpt"), delta);
    run.write("reports/merge_deltamoe.json", graft.report.to_json().dump(2) + "\n");
    keep("deltamoe", std::move(graft.model), "merge", out.hashes.at("moe_cpt"));

    auto rt = router_tune_stage(cfg, models.at("deltamoe"), c, progress("router_tune", 50, "checkpoints/deltamoe.ckpt"));
    save_log(rt.log, "router_tune");
    keep("deltamoe_rt", std::move(rt.model), "router_tune", out.hashes.at("deltamoe"));

    auto dense = cpt_stage(cfg, models.at("base"), c, progress("dense_cpt", 100, "checkpoints/base.ckpt"));
    save_log(dense.log, "dense_cpt");
    keep("dense_cpt", std::move(dense.model), "cpt", out.hashes.at("base"));

    auto ft_delta = merge_delta_dense(models.at("dense_cpt"), delta);
    run.write("reports/merge_dense_ft_delta.json", ft_delta.report.to_json().dump(2) + "\n");
    keep("dense_ft_delta", std::move(ft_delta.model), "merge", out.hashes.at("dense_cpt"));

    auto ft_avg = merge_avg_dense(models.at("dense_cpt"), models.at("post"), cfg.merge_lambda);
    run.write("reports/merge_dense_ft_avg.json", ft_avg.report.to_json().dump(2) + "\n");
    keep("dense_ft_avg", std::move(ft_avg.model), "merge", out.hashes.at("dense_cpt"));

    auto moe_avg = merge_avg_moe(models.at("moe_cpt"), models.at("post"));
    run.write("reports/merge_moe_cpt_avg.json", moe_avg.report.to_json().dump(2) + "\n");
    keep("moe_cpt_avg", std::move(moe_avg.model), "merge", out.hashes.at("moe_cpt"));

    const EvalSet eval = c.eval_set();
    for (const char* id : {"base", "post", "dense_cpt", "dense_ft_delta", "dense_ft_avg", "moe_cpt", "moe_cpt_avg",
                           "deltamoe", "deltamoe_rt"}) {
        out.report.rows.push_back(evaluate_model(id, out.hashes.at(id), models.at(id), eval));
        const auto& r = out.report.rows.back();
        note(std::string("eval ") + id + " ppl_exp=" + std::to_string(r.ppl_expanded) +
             " ppl_orig=" + std::to_string(r.ppl_original) + " echo_orig=" + std::to_string(r.echo_original));
    }
    run.write("reports/tradeoff.json", out.report.to_json().dump(2) + "\n");
    run.write("reports/tradeoff.csv", out.report.to_csv());

    for (const char* id : {"moe_cpt", "deltamoe", "deltamoe_rt"}) {
        out.routes[id] = route_frequencies(models.at(id), {c.original_eval, c.expanded_eval}, cfg.route_tokens);
        run.write(std::string("reports/route_stats_") + id + ".csv", out.routes[id].to_csv());
    }
    note("pipeline done");
    run.finish();
    return out;
}

}  // namespace deltamoe
