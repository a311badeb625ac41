// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Declarative run configuration: `key = value` lines with dotted keys, '#'
// comments. Every key has a default; unknown keys are rejected. Layers apply
// in order defaults < file < DELTAMOE_* environment < command-line flags.

#pragma once

#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "deltamoe/config.hpp"
#include "deltamoe/data.hpp"
#include "deltamoe/trainer.hpp"

namespace deltamoe {

struct LanguageSource {
    LanguageSpec spec;
    std::string file;  // line-oriented UTF-8; replaces the generator when set
};

struct StageSettings {
    std::size_t steps = 0;
    double epochs = 1.0;
    double lr = 1e-3;
    double warmup_frac = 0.03;
    double floor_frac = 0.1;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.95;
    std::size_t batch_size = 32;
};

struct RunConfig {
    std::uint64_t seed = 7;
    std::size_t threads = 1;
    ModelConfig model;
    LanguageSource original;
    LanguageSource expanded;
    std::size_t eval_tokens = 100'000;
    std::size_t echo_payloads = 200;
    std::size_t max_payload = 8;
    double token_multiplier = 1.0;        // scales the CPT corpus
    double pretrain_exp_fraction = 0.05;  // expansion tokens mixed into pretraining, relative to original
    StageSettings pretrain, posttrain, cpt, router_tune;
    // Plain-text batches (pretraining mixture) interleaved after each echo batch.
    std::size_t posttrain_text_batches = 1;
    std::size_t replay_original = 1;
    std::size_t replay_expansion = 2;
    std::string merge_strategy = "delta";
    double merge_lambda = 0.5;
    std::size_t route_tokens = 50'000;
    std::string workdir = "runs";

    RunConfig() {
        original.spec.tag = "orig_A";
        original.spec.seed = 1;
        original.spec.alpha_lo = 'a';
        original.spec.alpha_hi = 'z';
        expanded.spec.tag = "exp_X";
        expanded.spec.seed = 2;
        expanded.spec.alpha_lo = 'A';
        expanded.spec.alpha_hi = 'Z';
        pretrain.lr = 3e-3;
        posttrain.steps = 500;
        posttrain.lr = 2e-3;
        cpt.lr = 3e-4;
        router_tune.steps = 200;
        router_tune.lr = 1e-3;
    }
};

namespace config_detail {

struct Field {
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

inline std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

template <typename U>
U parse_uint(const std::string& key, const std::string& s) {
    U v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
    return v;
}

inline double parse_double(const std::string& key, const std::string& s) {
    double v{};
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
        throw ConfigError(key + ": expected a finite number, got '" + s + "'");
    }
    return v;
}

inline unsigned parse_byte(const std::string& key, const std::string& s) {
    // a single non-digit character stands for itself
    if (s.size() == 1 && !std::isdigit(static_cast<unsigned char>(s[0]))) return static_cast<unsigned char>(s[0]);
    const auto v = parse_uint<unsigned>(key, s);
    if (v > 255) throw ConfigError(key + ": byte value out of range");
    return v;
}

inline void add_size(std::vector<Field>& f, std::string key, std::size_t& ref) {
    f.push_back({key, [&ref, key](const std::string& s) { ref = parse_uint<std::size_t>(key, s); },
                 [&ref] { return std::to_string(ref); }});
}

inline void add_u64(std::vector<Field>& f, std::string key, std::uint64_t& ref) {
    f.push_back({key, [&ref, key](const std::string& s) { ref = parse_uint<std::uint64_t>(key, s); },
                 [&ref] { return std::to_string(ref); }});
}

inline void add_double(std::vector<Field>& f, std::string key, double& ref) {
    f.push_back({key, [&ref, key](const std::string& s) { ref = parse_double(key, s); },
                 [&ref] { return fmt_double(ref); }});
}

inline void add_string(std::vector<Field>& f, std::string key, std::string& ref) {
    f.push_back({key, [&ref](const std::string& s) { ref = s; }, [&ref] { return ref; }});
}

inline void add_byte(std::vector<Field>& f, std::string key, unsigned& ref) {
    f.push_back({key, [&ref, key](const std::string& s) { ref = parse_byte(key, s); },
                 [&ref] { return std::to_string(ref); }});
}

inline void add_language(std::vector<Field>& f, const std::string& p, LanguageSource& l) {
    add_string(f, p + ".tag", l.spec.tag);
    add_u64(f, p + ".seed", l.spec.seed);
    add_size(f, p + ".n_tokens", l.spec.n_tokens);
    add_byte(f, p + ".alpha_lo", l.spec.alpha_lo);
    add_byte(f, p + ".alpha_hi", l.spec.alpha_hi);
    add_double(f, p + ".temperature", l.spec.temperature);
    add_double(f, p + ".bigram_weight", l.spec.bigram_weight);
    add_double(f, p + ".repeat_prob", l.spec.repeat_prob);
    add_string(f, p + ".file", l.file);
}

inline void add_stage(std::vector<Field>& f, const std::string& p, StageSettings& s) {
    add_size(f, p + ".steps", s.steps);
    add_double(f, p + ".epochs", s.epochs);
    add_double(f, p + ".lr", s.lr);
    add_double(f, p + ".warmup_frac", s.warmup_frac);
    add_double(f, p + ".floor_frac", s.floor_frac);
    add_double(f, p + ".weight_decay", s.weight_decay);
    add_double(f, p + ".beta1", s.beta1);
    add_double(f, p + ".beta2", s.beta2);
    add_size(f, p + ".batch_size", s.batch_size);
}

inline std::vector<Field> fields(RunConfig& c) {
    std::vector<Field> f;
    add_u64(f, "seed", c.seed);
    add_size(f, "threads", c.threads);
    add_size(f, "model.d_model", c.model.d_model);
    add_size(f, "model.ffn_dim", c.model.ffn_dim);
    add_size(f, "model.n_layers", c.model.n_layers);
    add_size(f, "model.n_heads", c.model.n_heads);
    add_size(f, "model.vocab_size", c.model.vocab_size);
    add_size(f, "model.max_seq_len", c.model.max_seq_len);
    add_size(f, "model.n_experts", c.model.n_experts);
    add_size(f, "model.top_k", c.model.top_k);
    add_double(f, "model.lb_alpha", c.model.lb_alpha);
    add_language(f, "data.original", c.original);
    add_language(f, "data.expanded", c.expanded);
    add_size(f, "data.eval_tokens", c.eval_tokens);
    add_size(f, "data.echo_payloads", c.echo_payloads);
    add_size(f, "data.max_payload", c.max_payload);
    add_double(f, "data.token_multiplier", c.token_multiplier);
    add_double(f, "data.pretrain_exp_fraction", c.pretrain_exp_fraction);
    add_stage(f, "pretrain", c.pretrain);
    add_stage(f, "posttrain", c.posttrain);
    add_stage(f, "cpt", c.cpt);
    add_stage(f, "router_tune", c.router_tune);
    add_size(f, "posttrain.text_batches", c.posttrain_text_batches);
    add_size(f, "router_tune.replay_original", c.replay_original);
    add_size(f, "router_tune.replay_expansion", c.replay_expansion);
    add_string(f, "merge.strategy", c.merge_strategy);
    add_double(f, "merge.lambda", c.merge_lambda);
    add_size(f, "eval.route_tokens", c.route_tokens);
    add_string(f, "paths.workdir", c.workdir);
    return f;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace config_detail

inline void set_key(RunConfig& c, const std::string& key, const std::string& value) {
    for (auto& f : config_detail::fields(c)) {
        if (f.key == key) {
            f.set(value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_key(RunConfig& c, const std::string& key) {
    for (auto& f : config_detail::fields(c)) {
        if (f.key == key) return f.get();
    }
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::vector<std::string> config_keys() {
    RunConfig c;
    std::vector<std::string> keys;
    for (auto& f : config_detail::fields(c)) keys.push_back(f.key);
    return keys;
}

inline void apply_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        set_key(c, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
    }
}

inline void apply_file(RunConfig& c, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    apply_text(c, ss.str(), path);
}

// Fully resolved config, one `key = value` per line in a fixed order.
inline std::string to_text(RunConfig c) {
    std::string out;
    for (auto& f : config_detail::fields(c)) out += f.key + " = " + f.get() + "\n";
    return out;
}

inline void validate(const RunConfig& c) {
    try {
        c.model.validate();
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    if (c.model.vocab_size != tokens::kVocabSize) throw ConfigError("model.vocab_size must be 272 for the byte tokenizer");
    if (c.merge_strategy != "delta" && c.merge_strategy != "avg" && c.merge_strategy != "moe_avg") {
        throw ConfigError("merge.strategy must be one of delta, avg, moe_avg");
    }
    if (!(c.merge_lambda >= 0.0 && c.merge_lambda <= 1.0)) throw ConfigError("merge.lambda must be in [0, 1]");
    if (!(c.token_multiplier > 0.0)) throw ConfigError("data.token_multiplier must be positive");
    if (!(c.pretrain_exp_fraction >= 0.0)) throw ConfigError("data.pretrain_exp_fraction must be >= 0");
    if (c.threads == 0) throw ConfigError("threads must be positive");
    if (c.max_payload == 0 || 2 * c.max_payload + 3 > c.model.max_seq_len) {
        throw ConfigError("data.max_payload must fit twice in the context");
    }
    if (c.replay_original + c.replay_expansion == 0) throw ConfigError("router_tune replay ratio is empty");
    for (const auto* s : {&c.pretrain, &c.posttrain, &c.cpt, &c.router_tune}) {
        if (s->batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(s->lr >= 0.0)) throw ConfigError("lr must be >= 0");
        if (s->steps == 0 && !(s->epochs > 0.0)) throw ConfigError("stage needs steps or epochs");
    }
    for (const auto* l : {&c.original.spec, &c.expanded.spec}) {
        if (l->alpha_lo > l->alpha_hi || l->alpha_hi > 255) throw ConfigError("language '" + l->tag + "': bad alphabet range");
    }
    const std::array<LanguageSpec, 2> specs{c.original.spec, c.expanded.spec};
    if (c.original.spec.tag == c.expanded.spec.tag) throw ConfigError("language tags must differ");
    try {
        if (c.original.file.empty() && c.expanded.file.empty()) check_disjoint_alphabets(specs);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
}

// Environment names mirror the flags: DELTAMOE_SEED, DELTAMOE_WORKDIR,
// DELTAMOE_STRATEGY, DELTAMOE_LAMBDA, DELTAMOE_TOKEN_MULTIPLIER, DELTAMOE_THREADS.
inline const std::vector<std::pair<std::string, std::string>>& flag_keys() {
    static const std::vector<std::pair<std::string, std::string>> k{
        {"SEED", "seed"},
        {"WORKDIR", "paths.workdir"},
        {"STRATEGY", "merge.strategy"},
        {"LAMBDA", "merge.lambda"},
        {"TOKEN_MULTIPLIER", "data.token_multiplier"},
        {"THREADS", "threads"},
    };
    return k;
}

inline void apply_env(RunConfig& c) {
    for (const auto& [env, key] : flag_keys()) {
        if (const char* v = std::getenv(("DELTAMOE_" + env).c_str())) set_key(c, key, v);
    }
}

inline TrainPlan make_plan(const RunConfig& c, Stage stage, const StageSettings& s, std::uint64_t stream) {
    TrainPlan p;
    p.stage = stage;
    p.steps = s.steps;
    p.epochs = s.epochs;
    p.peak_lr = s.lr;
    p.warmup_frac = s.warmup_frac;
    p.floor_frac = s.floor_frac;
    p.weight_decay = s.weight_decay;
    p.beta1 = s.beta1;
    p.beta2 = s.beta2;
    p.batch_size = s.batch_size;
    p.seq_len = c.model.max_seq_len;
    p.alpha = c.model.lb_alpha;
    p.seed = rng::mix(c.seed, stream);
    p.replay = {c.replay_original, c.replay_expansion};
    return p;
}

}  // namespace deltamoe
