// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Single-file checkpoint container.
//
//   [u64 LE manifest length][UTF-8 JSON manifest][payload]
//
// The manifest lists tensors with byte offsets relative to the payload start;
// offsets are in order, non-overlapping and exactly cover the payload. Model
// checkpoints hold row-major little-endian binary32 tensors. Delta files use
// the same container with model_kind "delta" and binary64 tensors.

#pragma once

#include <openssl/evp.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "deltamoe/model.hpp"
#include "deltamoe/surgery.hpp"

namespace deltamoe {

inline constexpr int kFormatVersion = 1;

struct Provenance {
    std::string stage;
    std::string parent;  // content hash of the input checkpoint, if any
    std::uint64_t seed = 0;
};

inline std::string sha256_hex(std::span<const unsigned char> bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw IoError("sha256 digest failed");
    }
    std::ostringstream os;
    for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
}

namespace ckpt_detail {

using Json = nlohmann::ordered_json;

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const unsigned char* p) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(p[i]) << (8 * i);
    return std::bit_cast<T>(bits);
}

struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

template <typename S>
Json tensor_table(const ParamStore<S>& store, const char* dtype, std::vector<unsigned char>& payload) {
    Json tensors = Json::array();
    for (const auto& name : store.names()) {
        const auto& t = store.at(name);
        const std::uint64_t off = payload.size();
        for (S v : t.data()) put_le<S>(payload, v);
        Json e;
        e["name"] = name;
        e["dtype"] = dtype;
        e["shape"] = t.shape();
        e["byte_offset"] = off;
        e["byte_length"] = static_cast<std::uint64_t>(payload.size()) - off;
        tensors.push_back(std::move(e));
    }
    return tensors;
}

inline std::vector<unsigned char> assemble(const Json& manifest, const std::vector<unsigned char>& payload) {
    const std::string text = manifest.dump();
    std::vector<unsigned char> out;
    out.reserve(8 + text.size() + payload.size());
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

// Digest of the manifest without provenance, followed by the payload.
inline std::string content_hash(Json manifest, const std::vector<unsigned char>& payload) {
    manifest.erase("provenance");
    return sha256_hex(assemble(manifest, payload));
}

inline void write_atomic(const std::string& path, const std::vector<unsigned char>& bytes) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("short write on " + tmp.string());
    }
    fs::rename(tmp, target);
}

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::uint64_t require_uint(const Json& j, const char* key, const std::string& field) {
    if (!j.is_object() || !j.contains(key)) throw ParseError(field, "missing");
    const auto& v = j.at(key);
    if (!v.is_number_unsigned()) throw ParseError(field, "must be a non-negative integer");
    return v.get<std::uint64_t>();
}

inline std::string require_string(const Json& j, const char* key, const std::string& field) {
    if (!j.is_object() || !j.contains(key)) throw ParseError(field, "missing");
    const auto& v = j.at(key);
    if (!v.is_string()) throw ParseError(field, "must be a string");
    return v.get<std::string>();
}

inline ModelConfig parse_config(const Json& m) {
    if (!m.contains("config") || !m.at("config").is_object()) throw ParseError("config", "missing or not an object");
    const auto& c = m.at("config");
    ModelConfig cfg;
    auto size = [&](const char* key) {
        const auto v = require_uint(c, key, std::string("config.") + key);
        if (v > (1ULL << 31)) throw ParseError(std::string("config.") + key, "implausibly large");
        return static_cast<std::size_t>(v);
    };
    cfg.d_model = size("d_model");
    cfg.ffn_dim = size("ffn_dim");
    cfg.n_layers = size("n_layers");
    cfg.n_heads = size("n_heads");
    cfg.vocab_size = size("vocab_size");
    cfg.max_seq_len = size("max_seq_len");
    cfg.n_experts = size("n_experts");
    cfg.top_k = size("top_k");
    if (!c.contains("lb_alpha") || !c.at("lb_alpha").is_number()) throw ParseError("config.lb_alpha", "must be a number");
    cfg.lb_alpha = c.at("lb_alpha").get<double>();
    try {
        cfg.validate();
    } catch (const Error& e) {
        throw ParseError("config", e.what());
    }
    return cfg;
}

// Validates the tensor table against the payload size and element width.
inline std::vector<Entry> parse_tensor_table(const Json& m, const char* dtype, std::size_t width,
                                             std::uint64_t payload_size) {
    if (!m.contains("tensors") || !m.at("tensors").is_array()) throw ParseError("tensors", "missing or not an array");
    std::vector<Entry> entries;
    std::set<std::string> seen;
    const auto& arr = m.at("tensors");
    for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto& e = arr.at(i);
        const std::string field = "tensors[" + std::to_string(i) + "]";
        if (!e.is_object()) throw ParseError(field, "not an object");
        Entry en;
        en.name = require_string(e, "name", field + ".name");
        if (en.name.empty() || !seen.insert(en.name).second) throw ParseError(field + ".name", "empty or duplicate name");
        if (require_string(e, "dtype", field + ".dtype") != dtype) {
            throw ParseError(field + ".dtype", std::string("expected ") + dtype);
        }
        if (!e.contains("shape") || !e.at("shape").is_array()) throw ParseError(field + ".shape", "missing or not an array");
        const auto& sh = e.at("shape");
        if (sh.empty() || sh.size() > 3) throw ParseError(field + ".shape", "rank must be 1..3");
        std::uint64_t numel = 1;
        for (const auto& d : sh) {
            if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0 || d.get<std::uint64_t>() > (1ULL << 31)) {
                throw ParseError(field + ".shape", "dimensions must be positive integers");
            }
            numel *= d.get<std::uint64_t>();
            if (numel > payload_size) throw ParseError(field + ".shape", "larger than the payload");
            en.shape.push_back(static_cast<std::size_t>(d.get<std::uint64_t>()));
        }
        en.offset = require_uint(e, "byte_offset", field + ".byte_offset");
        en.length = require_uint(e, "byte_length", field + ".byte_length");
        if (en.length != width * numel) {
            throw ParseError(field + ".byte_length", std::to_string(en.length) + " != " + std::to_string(width) +
                                                         " * product(shape)");
        }
        entries.push_back(std::move(en));
    }
    std::uint64_t cursor = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (e.offset < cursor) {
            throw ParseError("tensors[" + std::to_string(i) + "].byte_offset",
                             "tensors '" + entries[i - 1].name + "' and '" + e.name + "' overlap");
        }
        if (e.offset > cursor) {
            throw ParseError("tensors[" + std::to_string(i) + "].byte_offset",
                             "gap before tensor '" + e.name + "'");
        }
        if (e.length > payload_size - cursor) {
            throw ParseError("payload", "truncated: tensor '" + e.name + "' runs past the end of the file");
        }
        cursor += e.length;
    }
    if (cursor != payload_size) {
        throw ParseError("payload", std::to_string(payload_size - cursor) + " trailing bytes not covered by tensors");
    }
    return entries;
}

struct Container {
    Json manifest;
    std::vector<unsigned char> bytes;
    std::size_t payload_start = 0;

    std::uint64_t payload_size() const { return bytes.size() - payload_start; }
    const unsigned char* payload() const { return bytes.data() + payload_start; }
};

inline Container parse_container(std::vector<unsigned char> bytes) {
    Container c;
    if (bytes.size() < 8) throw ParseError("manifest_length", "file shorter than the 8-byte header");
    const std::uint64_t len = get_u64(bytes.data());
    if (len > bytes.size() - 8) throw ParseError("manifest_length", "manifest extends past the end of the file");
    try {
        c.manifest = Json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest", std::string("invalid JSON: ") + e.what());
    }
    if (!c.manifest.is_object()) throw ParseError("manifest", "not a JSON object");
    if (!c.manifest.contains("format_version") || !c.manifest.at("format_version").is_number_integer()) {
        throw ParseError("format_version", "missing or not an integer");
    }
    if (c.manifest.at("format_version").get<std::int64_t>() != kFormatVersion) {
        throw ParseError("format_version", "unsupported version " + c.manifest.at("format_version").dump());
    }
    c.payload_start = 8 + static_cast<std::size_t>(len);
    c.bytes = std::move(bytes);
    return c;
}

template <typename S>
ParamStore<S> read_tensors(const Container& c, const std::vector<Entry>& entries) {
    ParamStore<S> store;
    for (const auto& e : entries) {
        std::vector<S> data(e.length / sizeof(S));
        const unsigned char* p = c.payload() + e.offset;
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = get_le<S>(p + i * sizeof(S));
        store.insert(e.name, Tensor<S>(e.shape, std::move(data)));
    }
    return store;
}

}  // namespace ckpt_detail

struct SerializedModel {
    std::vector<unsigned char> bytes;
    std::string hash;
};

inline SerializedModel serialize(const Model<float>& model, const Provenance& prov = {}) {
    using ckpt_detail::Json;
    std::vector<unsigned char> payload;
    Json m;
    m["format_version"] = kFormatVersion;
    m["model_kind"] = kind_name(model.kind);
    m["config"] = to_json(model.config);
    m["tensors"] = ckpt_detail::tensor_table(model.params, "f32", payload);
    Json frozen = Json::array();
    for (const auto& n : model.params.names()) {
        if (model.is_frozen(n)) frozen.push_back(n);
    }
    m["frozen"] = std::move(frozen);
    m["provenance"] = {{"stage", prov.stage}, {"parent", prov.parent}, {"seed", prov.seed}};
    SerializedModel out;
    out.hash = ckpt_detail::content_hash(m, payload);
    out.bytes = ckpt_detail::assemble(m, payload);
    return out;
}

// Stable digest of a model's manifest (minus provenance) and payload.
inline std::string content_hash(const Model<float>& model) { return serialize(model).hash; }

// Writes via temp file + rename; returns the content hash.
inline std::string save(const Model<float>& model, const std::string& path, const Provenance& prov = {}) {
    auto s = serialize(model, prov);
    ckpt_detail::write_atomic(path, s.bytes);
    return s.hash;
}

struct LoadedModel {
    Model<float> model;
    Provenance provenance;
    std::string hash;
};

// Parses and validates every manifest invariant before reading the payload.
inline LoadedModel load_bytes(std::vector<unsigned char> bytes) {
    auto c = ckpt_detail::parse_container(std::move(bytes));
    const auto& m = c.manifest;
    LoadedModel out;
    const std::string kind = ckpt_detail::require_string(m, "model_kind", "model_kind");
    if (kind != "dense" && kind != "moe") throw ParseError("model_kind", "must be 'dense' or 'moe', got '" + kind + "'");
    out.model.kind = kind == "dense" ? ModelKind::dense : ModelKind::moe;
    out.model.config = ckpt_detail::parse_config(m);
    auto entries = ckpt_detail::parse_tensor_table(m, "f32", 4, c.payload_size());

    const auto layout = canonical_layout(out.model.kind, out.model.config);
    if (layout.size() != entries.size()) {
        throw ParseError("tensors", std::to_string(entries.size()) + " tensors, layout expects " +
                                        std::to_string(layout.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (entries[i].name != layout[i].first || entries[i].shape != layout[i].second) {
            throw ParseError("tensors[" + std::to_string(i) + "]",
                             "'" + entries[i].name + "' " + shape_str(entries[i].shape) + " does not match expected '" +
                                 layout[i].first + "' " + shape_str(layout[i].second));
        }
    }
    if (!m.contains("frozen") || !m.at("frozen").is_array()) throw ParseError("frozen", "missing or not an array");
    std::set<std::string> names;
    for (const auto& e : entries) names.insert(e.name);
    for (const auto& f : m.at("frozen")) {
        if (!f.is_string() || !names.count(f.get<std::string>())) throw ParseError("frozen", "entry is not a tensor name");
        out.model.frozen.insert(f.get<std::string>());
    }
    if (!m.contains("provenance") || !m.at("provenance").is_object()) throw ParseError("provenance", "missing");
    const auto& p = m.at("provenance");
    out.provenance.stage = ckpt_detail::require_string(p, "stage", "provenance.stage");
    out.provenance.parent = ckpt_detail::require_string(p, "parent", "provenance.parent");
    out.provenance.seed = ckpt_detail::require_uint(p, "seed", "provenance.seed");

    out.model.params = ckpt_detail::read_tensors<float>(c, entries);
    out.hash = ckpt_detail::content_hash(c.manifest, std::vector<unsigned char>(c.payload(), c.payload() + c.payload_size()));
    return out;
}

inline LoadedModel load(const std::string& path) { return load_bytes(ckpt_detail::read_file(path)); }

// ---- delta files -------------------------------------------------------------

inline std::string save_delta(const Delta& d, const std::string& path) {
    using ckpt_detail::Json;
    std::vector<unsigned char> payload;
    Json m;
    m["format_version"] = kFormatVersion;
    m["model_kind"] = "delta";
    m["config"] = to_json(d.config);
    m["tensors"] = ckpt_detail::tensor_table(d.tensors, "f64", payload);
    m["delta_source"] = {{"base", d.base_id}, {"post", d.post_id}};
    ckpt_detail::write_atomic(path, ckpt_detail::assemble(m, payload));
    return ckpt_detail::content_hash(m, payload);
}

inline Delta load_delta(const std::string& path) {
    auto c = ckpt_detail::parse_container(ckpt_detail::read_file(path));
    const auto& m = c.manifest;
    if (ckpt_detail::require_string(m, "model_kind", "model_kind") != "delta") {
        throw ParseError("model_kind", "not a delta file");
    }
    Delta d;
    d.config = ckpt_detail::parse_config(m);
    auto entries = ckpt_detail::parse_tensor_table(m, "f64", 8, c.payload_size());
    const auto layout = canonical_layout(ModelKind::dense, d.config);
    if (layout.size() != entries.size()) throw ParseError("tensors", "delta does not match the dense layout");
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (entries[i].name != layout[i].first || entries[i].shape != layout[i].second) {
            throw ParseError("tensors[" + std::to_string(i) + "]", "does not match the dense layout");
        }
    }
    if (!m.contains("delta_source") || !m.at("delta_source").is_object()) throw ParseError("delta_source", "missing");
    d.base_id = ckpt_detail::require_string(m.at("delta_source"), "base", "delta_source.base");
    d.post_id = ckpt_detail::require_string(m.at("delta_source"), "post", "delta_source.post");
    d.tensors = ckpt_detail::read_tensors<double>(c, entries);
    return d;
}

// ---- diff --------------------------------------------------------------------

struct TensorChange {
    std::string name;
    double max_abs = 0;
    double l2 = 0;
};

struct DiffReport {
    std::string a_hash, b_hash;
    std::vector<TensorChange> changes;
    std::vector<std::string> only_in_a, only_in_b;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["a"] = a_hash;
        j["b"] = b_hash;
        auto arr = nlohmann::ordered_json::array();
        for (const auto& c : changes) arr.push_back({{"name", c.name}, {"max_abs", c.max_abs}, {"l2", c.l2}});
        j["tensors"] = std::move(arr);
        j["only_in_a"] = only_in_a;
        j["only_in_b"] = only_in_b;
        return j;
    }
};

struct DiffResult {
    Delta delta;
    DiffReport report;
};

inline DiffResult diff_models(const LoadedModel& a, const LoadedModel& b) {
    DiffResult out;
    out.report.a_hash = a.hash;
    out.report.b_hash = b.hash;
    std::set<std::string> an(a.model.params.names().begin(), a.model.params.names().end());
    std::set<std::string> bn(b.model.params.names().begin(), b.model.params.names().end());
    std::set_difference(an.begin(), an.end(), bn.begin(), bn.end(), std::back_inserter(out.report.only_in_a));
    std::set_difference(bn.begin(), bn.end(), an.begin(), an.end(), std::back_inserter(out.report.only_in_b));
    if (!out.report.only_in_a.empty() || !out.report.only_in_b.empty() ||
        !architecture_compatible(a.model.config, b.model.config)) {
        std::vector<std::string> sym = out.report.only_in_a;
        sym.insert(sym.end(), out.report.only_in_b.begin(), out.report.only_in_b.end());
        throw IncompatibleError("diff: checkpoints are not architecture-compatible; name-set difference: " +
                                detail::join_names(sym));
    }
    out.delta = compute_delta(a.model, b.model, a.hash, b.hash);
    for (const auto& name : out.delta.names()) {
        const auto& t = out.delta.tensors.at(name);
        TensorChange c{name, 0, 0};
        for (double v : t.data()) {
            c.max_abs = std::max(c.max_abs, std::abs(v));
            c.l2 += v * v;
        }
        c.l2 = std::sqrt(c.l2);
        out.report.changes.push_back(c);
    }
    return out;
}

inline DiffResult diff(const std::string& path_a, const std::string& path_b) {
    return diff_models(load(path_a), load(path_b));
}

}  // namespace deltamoe
