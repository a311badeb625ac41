// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// deltamoe: command-line front end. Every invocation writes into a fresh
// timestamped directory under the configured workdir and prints
//   run <dir>
//   output <name> <sha256>
// On failure it prints "error <CODE>: <message>" to stderr and exits 1.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "deltamoe/pipeline.hpp"

namespace {

using namespace deltamoe;

struct Common {
    std::string config_path;
    std::optional<std::string> seed, workdir, strategy, lambda, token_multiplier, threads;
    std::vector<std::string> sets;
    std::string corpora;
};

RunConfig resolve(const Common& o) {
    RunConfig cfg;
    if (!o.config_path.empty()) apply_file(cfg, o.config_path);
    apply_env(cfg);
    for (const auto& kv : o.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        set_key(cfg, config_detail::trim(kv.substr(0, eq)), config_detail::trim(kv.substr(eq + 1)));
    }
    const std::pair<const std::optional<std::string>*, const char*> flags[] = {
        {&o.seed, "seed"},         {&o.workdir, "paths.workdir"},
        {&o.strategy, "merge.strategy"}, {&o.lambda, "merge.lambda"},
        {&o.token_multiplier, "data.token_multiplier"}, {&o.threads, "threads"},
    };
    for (const auto& [v, key] : flags) {
        if (*v) set_key(cfg, key, **v);
    }
    validate(cfg);
    kernels::set_num_threads(static_cast<int>(cfg.threads));
    return cfg;
}

Corpora corpora_for(const RunConfig& cfg, const Common& o) {
    return o.corpora.empty() ? build_corpora(cfg) : load_corpora(o.corpora, cfg);
}

LoadedModel load_input(RunDir& run, const std::string& path) {
    auto m = load(path);
    run.input(path, m.hash);
    return m;
}

void report(const RunDir& run, const std::map<std::string, std::string>& outputs) {
    std::cout << "run " << run.path().string() << "\n";
    for (const auto& [name, hash] : outputs) std::cout << "output " << name << " " << hash << "\n";
}

// Saves, records and prints one output checkpoint.
void emit_model(RunDir& run, const Model<float>& m, const std::string& name, const std::string& stage,
                const std::string& parent, const RunConfig& cfg, std::map<std::string, std::string>& outputs) {
    outputs[name] = run.save_model(m, name, {stage, parent, cfg.seed});
}

int run_cli(int argc, char** argv) {
    CLI::App app{"DeltaMoE desk-scale pipeline"};
    app.require_subcommand(1);
    Common o;
    auto add_common = [&](CLI::App* s) {
        s->add_option("--config", o.config_path, "key = value config file")->check(CLI::ExistingFile);
        s->add_option("--seed", o.seed, "run seed");
        s->add_option("--workdir", o.workdir, "root of run directories");
        s->add_option("--strategy", o.strategy, "merge strategy: delta, avg, moe_avg");
        s->add_option("--lambda", o.lambda, "averaging weight of the first model");
        s->add_option("--token-multiplier", o.token_multiplier, "scale of the CPT corpus");
        s->add_option("--threads", o.threads, "BLAS threads");
        s->add_option("--set", o.sets, "override any config key (key=value), repeatable");
    };
    auto add_corpora = [&](CLI::App* s) {
        s->add_option("--corpora", o.corpora, "directory written by gen-corpus")->check(CLI::ExistingDirectory);
    };

    std::vector<std::string> inputs;
    std::string delta_path, with_path;

    auto* gen = app.add_subcommand("gen-corpus", "generate and cache the corpora");
    auto* pretrain = app.add_subcommand("pretrain", "train the dense base model");
    auto* posttrain = app.add_subcommand("posttrain", "post-train a dense model on the echo task");
    auto* up = app.add_subcommand("upcycle", "turn a dense checkpoint into an MoE checkpoint");
    auto* cpt = app.add_subcommand("cpt", "continued pretraining on the expansion language");
    auto* rt = app.add_subcommand("router-tune", "train MoE routers on replayed data");
    auto* dif = app.add_subcommand("diff", "delta between two dense checkpoints (post - base)");
    auto* mrg = app.add_subcommand("merge", "apply a delta or average two checkpoints");
    auto* ev = app.add_subcommand("eval", "perplexity and echo accuracy trade-off table");
    auto* rs = app.add_subcommand("route-stats", "expert selection frequencies per layer and language");
    auto* pipe = app.add_subcommand("pipeline", "run every stage and the baselines");
    for (auto* s : {gen, pretrain, posttrain, up, cpt, rt, dif, mrg, ev, rs, pipe}) add_common(s);
    for (auto* s : {pretrain, posttrain, cpt, rt, ev, rs}) add_corpora(s);
    for (auto* s : {posttrain, up, cpt, rt, rs}) s->add_option("checkpoint", inputs, "input checkpoint")->required()->expected(1);
    dif->add_option("checkpoints", inputs, "base and post checkpoints")->required()->expected(2);
    ev->add_option("checkpoints", inputs, "checkpoints to evaluate")->required()->expected(1, 64);
    mrg->add_option("checkpoint", inputs, "target checkpoint")->required()->expected(1);
    mrg->add_option("--delta", delta_path, "delta file for --strategy delta");
    mrg->add_option("--with", with_path, "second checkpoint for averaging strategies");

    CLI11_PARSE(app, argc, argv);

    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    const RunConfig cfg = resolve(o);
    RunDir run(cfg, name);
    std::map<std::string, std::string> outputs;

    if (sub == gen) {
        write_corpora(run, build_corpora(cfg));
    } else if (sub == pretrain) {
        const auto c = corpora_for(cfg, o);
        auto r = pretrain_stage(cfg, c, progress("pretrain"));
        r.log.write_jsonl(run.file("logs/pretrain.jsonl"));
        emit_model(run, r.model, "base.ckpt", "pretrain", "", cfg, outputs);
    } else if (sub == posttrain) {
        auto in = load_input(run, inputs[0]);
        const auto c = corpora_for(cfg, o);
        auto r = posttrain_stage(cfg, in.model, c, progress("posttrain", 100, inputs[0]));
        r.log.write_jsonl(run.file("logs/posttrain.jsonl"));
        emit_model(run, r.model, "post.ckpt", "posttrain", in.hash, cfg, outputs);
    } else if (sub == up) {
        auto in = load_input(run, inputs[0]);
        emit_model(run, upcycle(in.model, cfg.model.n_experts, cfg.model.top_k), "moe.ckpt", "upcycle", in.hash, cfg,
                   outputs);
    } else if (sub == cpt) {
        auto in = load_input(run, inputs[0]);
        const auto c = corpora_for(cfg, o);
        auto r = cpt_stage(cfg, in.model, c, progress("cpt", 100, inputs[0]));
        r.log.write_jsonl(run.file("logs/cpt.jsonl"));
        emit_model(run, r.model, "cpt.ckpt", "cpt", in.hash, cfg, outputs);
    } else if (sub == rt) {
        auto in = load_input(run, inputs[0]);
        const auto c = corpora_for(cfg, o);
        auto r = router_tune_stage(cfg, in.model, c, progress("router_tune", 50, inputs[0]));
        r.log.write_jsonl(run.file("logs/router_tune.jsonl"));
        emit_model(run, r.model, "router_tuned.ckpt", "router_tune", in.hash, cfg, outputs);
    } else if (sub == dif) {
        auto a = load_input(run, inputs[0]);
        auto b = load_input(run, inputs[1]);
        auto d = diff_models(a, b);
        outputs["delta.bin"] = save_delta(d.delta, run.file("delta.bin"));
        run.output("delta.bin", outputs["delta.bin"]);
        run.write("reports/diff.json", d.report.to_json().dump(2) + "\n");
    } else if (sub == mrg) {
        auto target = load_input(run, inputs[0]);
        MergeResult<float> m;
        if (cfg.merge_strategy == "delta") {
            if (delta_path.empty()) throw ArgumentError("merge --strategy delta needs --delta");
            const Delta d = load_delta(delta_path);
            m = target.model.is_moe() ? graft_delta_moe(target.model, d) : merge_delta_dense(target.model, d);
        } else {
            if (with_path.empty()) throw ArgumentError("merge --strategy " + cfg.merge_strategy + " needs --with");
            auto other = load_input(run, with_path);
            m = cfg.merge_strategy == "avg" ? merge_avg_dense(target.model, other.model, cfg.merge_lambda)
                                            : merge_avg_moe(target.model, other.model);
        }
        run.write("reports/merge.json", m.report.to_json().dump(2) + "\n");
        emit_model(run, m.model, "merged.ckpt", "merge", target.hash, cfg, outputs);
    } else if (sub == ev) {
        const auto c = corpora_for(cfg, o);
        const EvalSet eval = c.eval_set();
        TradeoffReport rep;
        for (const auto& path : inputs) {
            auto in = load_input(run, path);
            rep.rows.push_back(evaluate_model(fs::path(path).stem().string(), in.hash, in.model, eval));
        }
        run.write("reports/tradeoff.json", rep.to_json().dump(2) + "\n");
        run.write("reports/tradeoff.csv", rep.to_csv());
        std::cout << rep.to_csv();
    } else if (sub == rs) {
        auto in = load_input(run, inputs[0]);
        const auto c = corpora_for(cfg, o);
        const auto stats = route_frequencies(in.model, {c.original_eval, c.expanded_eval}, cfg.route_tokens);
        if (!stats.conserved()) throw NumericError("route statistics violate count conservation");
        run.write("reports/route_stats.csv", stats.to_csv());
    } else if (sub == pipe) {
        auto r = run_pipeline(cfg, run);
        outputs = r.hashes;
        std::cout << r.report.to_csv();
    }
    run.finish();
    report(run, outputs);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const deltamoe::Error& e) {
        std::cerr << "error " << deltamoe::error_code_name(e.code()) << ": " << e.what() << "\n";
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error E_IO: " << e.what() << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error E_INTERNAL: " << e.what() << "\n";
    }
    return 1;
}
