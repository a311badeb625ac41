// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Byte-level tokenizer, synthetic Markov "languages", corpora, and
// deterministic batch streams.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "deltamoe/batch.hpp"
#include "deltamoe/error.hpp"
#include "deltamoe/rng.hpp"

namespace deltamoe {

namespace tokens {
inline constexpr TokenId kEos = 256;
inline constexpr TokenId kPad = 257;
inline constexpr TokenId kQuestion = 258;
inline constexpr TokenId kAnswer = 259;
inline constexpr TokenId kFirstReserved = 260;
inline constexpr std::size_t kVocabSize = 272;
}  // namespace tokens

inline std::vector<TokenId> tokenize(std::string_view text) {
    std::vector<TokenId> out(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
    return out;
}

inline std::string detokenize(std::span<const TokenId> ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id >= 0 && id < 256) {
            out.push_back(static_cast<char>(id));
        } else if (id == tokens::kEos) {
            out += "<eos>";
        } else if (id == tokens::kPad) {
            out += "<pad>";
        } else if (id == tokens::kQuestion) {
            out += "Q: ";
        } else if (id == tokens::kAnswer) {
            out += " A: ";
        } else {
            out += "\xEF\xBF\xBD";  // U+FFFD
        }
    }
    return out;
}

struct Corpus {
    std::string tag;
    std::vector<std::vector<TokenId>> documents;
    std::string provenance;

    std::size_t num_tokens() const {
        std::size_t n = 0;
        for (const auto& d : documents) n += d.size();
        return n;
    }

    void validate(std::size_t vocab = tokens::kVocabSize) const {
        if (documents.empty()) throw ArgumentError("corpus '" + tag + "' has no documents");
        for (const auto& d : documents) {
            if (d.empty()) throw ArgumentError("corpus '" + tag + "' has an empty document");
            for (auto id : d) {
                if (id < 0 || static_cast<std::size_t>(id) >= vocab) throw IndexError("corpus token out of vocabulary");
            }
        }
    }
};

// Order-2 Markov byte language over [alpha_lo, alpha_hi] plus shared bytes,
// with occasional verbatim repeats of earlier spans.
struct LanguageSpec {
    std::string tag = "orig_A";
    std::uint64_t seed = 1;
    std::size_t n_tokens = 2'000'000;
    unsigned alpha_lo = 'a';
    unsigned alpha_hi = 'z';
    double temperature = 0.5;
    // Weight of a per-previous-byte logit table added to the per-context one.
    double bigram_weight = 1.0;
    // Per-token chance of starting a verbatim copy of an earlier span of the
    // same document (lengths repeat_min..repeat_max).
    double repeat_prob = 0.02;
    std::size_t repeat_min = 3;
    std::size_t repeat_max = 12;
    // Selects an independent sample from the same chain (held-out splits).
    std::uint64_t sample_stream = 0;
    std::string shared = " .";
    double shared_logit_offset = -1.0;
    std::size_t min_doc = 64;
    std::size_t max_doc = 512;

    std::vector<unsigned> alphabet() const {
        std::vector<unsigned> a;
        for (unsigned c = alpha_lo; c <= alpha_hi; ++c) a.push_back(c);
        for (char c : shared) {
            const unsigned u = static_cast<unsigned char>(c);
            if (std::find(a.begin(), a.end(), u) == a.end()) a.push_back(u);
        }
        return a;
    }
};

// Distinct languages may only overlap on their shared bytes.
inline void check_disjoint_alphabets(std::span<const LanguageSpec> specs) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
        for (std::size_t j = i + 1; j < specs.size(); ++j) {
            const auto& a = specs[i];
            const auto& b = specs[j];
            if (a.tag == b.tag) continue;
            if (a.alpha_lo <= b.alpha_hi && b.alpha_lo <= a.alpha_hi) {
                throw ArgumentError("languages '" + a.tag + "' and '" + b.tag + "' have overlapping core alphabets");
            }
        }
    }
}

inline Corpus gen_language(const LanguageSpec& spec) {
    if (spec.n_tokens < 1000) throw ArgumentError("gen_language: n_tokens must be >= 1000");
    if (spec.alpha_lo > spec.alpha_hi || spec.alpha_hi > 255) throw ArgumentError("gen_language: bad alphabet range");
    if (!(spec.temperature > 0.0)) throw ArgumentError("gen_language: temperature must be positive");
    if (spec.min_doc < 1 || spec.min_doc > spec.max_doc) throw ArgumentError("gen_language: bad document length range");
    if (!(spec.repeat_prob >= 0.0 && spec.repeat_prob <= 1.0)) throw ArgumentError("gen_language: repeat_prob must be in [0,1]");
    if (spec.repeat_min < 1 || spec.repeat_min > spec.repeat_max) throw ArgumentError("gen_language: bad repeat length range");
    const auto alpha = spec.alphabet();
    const std::size_t A = alpha.size();
    std::set<unsigned> shared;
    for (char c : spec.shared) shared.insert(static_cast<unsigned char>(c));

    // Cumulative transition table for each (prev2, prev1) context.
    std::mt19937_64 chain(rng::mix(spec.seed, 0));
    std::vector<double> bigram(A * A);
    for (auto& b : bigram) b = spec.bigram_weight * rng::normal(chain);
    std::vector<double> cdf(A * A * A);
    std::vector<double> w(A);
    for (std::size_t ctx = 0; ctx < A * A; ++ctx) {
        double mx = -1e300;
        for (std::size_t s = 0; s < A; ++s) {
            w[s] = (rng::normal(chain) + bigram[(ctx % A) * A + s]) / spec.temperature +
                   (shared.count(alpha[s]) ? spec.shared_logit_offset : 0.0);
            mx = std::max(mx, w[s]);
        }
        double z = 0;
        for (std::size_t s = 0; s < A; ++s) z += (w[s] = std::exp(w[s] - mx));
        double acc = 0;
        for (std::size_t s = 0; s < A; ++s) cdf[ctx * A + s] = (acc += w[s] / z);
        cdf[ctx * A + A - 1] = 1.0;
    }

    std::mt19937_64 g(rng::mix(spec.seed, 1 + spec.sample_stream));
    Corpus c;
    c.tag = spec.tag;
    c.provenance = "gen_language(seed=" + std::to_string(spec.seed) + ",stream=" + std::to_string(spec.sample_stream) + ")";
    std::size_t total = 0;
    std::size_t p2 = rng::below(g, A), p1 = rng::below(g, A);
    while (total < spec.n_tokens) {
        const std::size_t len = spec.min_doc + rng::below(g, spec.max_doc - spec.min_doc + 1);
        std::vector<TokenId> doc(len);
        std::vector<std::size_t> syms(len);
        std::size_t copy_from = 0, copy_left = 0;
        for (std::size_t i = 0; i < len; ++i) {
            if (copy_left == 0 && spec.repeat_prob > 0 && i >= 2 * spec.repeat_max &&
                rng::uniform(g) < spec.repeat_prob) {
                copy_left = spec.repeat_min + rng::below(g, spec.repeat_max - spec.repeat_min + 1);
                copy_from = rng::below(g, i - copy_left + 1);
            }
            std::size_t sym;
            if (copy_left > 0) {
                sym = syms[copy_from++];
                --copy_left;
            } else {
                const double* row = cdf.data() + (p2 * A + p1) * A;
                const double u = rng::uniform(g);
                const std::size_t s = static_cast<std::size_t>(std::upper_bound(row, row + A, u) - row);
                sym = std::min(s, A - 1);
            }
            syms[i] = sym;
            doc[i] = static_cast<TokenId>(alpha[sym]);
            p2 = p1;
            p1 = sym;
        }
        total += len;
        c.documents.push_back(std::move(doc));
    }
    return c;
}

// One document per non-empty line of a UTF-8 text file.
inline Corpus ingest_text_file(const std::string& path, const std::string& tag) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file: " + path);
    Corpus c;
    c.tag = tag;
    c.provenance = path;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        c.documents.push_back(tokenize(line));
    }
    if (c.documents.empty()) throw ArgumentError("corpus file has no non-empty lines: " + path);
    return c;
}

namespace detail {

inline void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace detail

// Token cache: u64 LE id count, then u32 LE ids; every document is followed by eos.
inline void save_token_cache(const Corpus& c, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write token cache: " + path);
    std::uint64_t count = c.num_tokens() + c.documents.size();
    for (int i = 0; i < 8; ++i) out.put(static_cast<char>((count >> (8 * i)) & 0xFF));
    for (const auto& d : c.documents) {
        for (auto id : d) detail::put_u32(out, static_cast<std::uint32_t>(id));
        detail::put_u32(out, static_cast<std::uint32_t>(tokens::kEos));
    }
    if (!out) throw IoError("short write on token cache: " + path);
}

inline Corpus load_token_cache(const std::string& path, const std::string& tag) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open token cache: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8) throw ParseError("count", "token cache shorter than its header");
    std::uint64_t count = 0;
    for (int i = 0; i < 8; ++i) count |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    if ((bytes.size() - 8) % 4 != 0 || (bytes.size() - 8) / 4 != count) {
        throw ParseError("count", "header says " + std::to_string(count) + " ids, payload holds " +
                                      std::to_string((bytes.size() - 8) / 4));
    }
    Corpus c;
    c.tag = tag;
    c.provenance = path;
    std::vector<TokenId> doc;
    for (std::uint64_t i = 0; i < count; ++i) {
        const unsigned char* p = bytes.data() + 8 + 4 * i;
        const auto id = static_cast<TokenId>(p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24));
        if (id < 0 || static_cast<std::size_t>(id) >= tokens::kVocabSize) throw ParseError("ids", "token id out of range");
        if (id == tokens::kEos) {
            if (!doc.empty()) c.documents.push_back(std::move(doc));
            doc.clear();
        } else {
            doc.push_back(id);
        }
    }
    if (!doc.empty()) c.documents.push_back(std::move(doc));
    c.validate();
    return c;
}

class BatchStream {
public:
    virtual ~BatchStream() = default;
    virtual Batch next() = 0;
    virtual std::size_t batches_per_epoch() const = 0;
};

namespace detail {

struct Row {
    std::size_t source = 0;
    std::vector<TokenId> tokens;  // exactly seq long, pad-filled
    std::vector<std::uint8_t> mask;
};

// Concatenates documents (each followed by eos) and cuts rows of `seq`.
inline void pack_rows(const Corpus& c, std::span<const std::size_t> order, std::size_t source, std::size_t seq,
                      std::vector<Row>& rows) {
    Row cur{source, {}, {}};
    auto push = [&](TokenId id) {
        cur.tokens.push_back(id);
        cur.mask.push_back(1);
        if (cur.tokens.size() == seq) {
            rows.push_back(std::move(cur));
            cur = Row{source, {}, {}};
        }
    };
    for (auto d : order) {
        for (auto id : c.documents[d]) push(id);
        push(tokens::kEos);
    }
    if (!cur.tokens.empty()) {
        cur.tokens.resize(seq, tokens::kPad);
        cur.mask.resize(seq, 0);
        rows.push_back(std::move(cur));
    }
}

inline Batch make_batch(std::span<const Row> rows, std::size_t seq, std::span<const std::string> tags) {
    Batch b;
    b.rows = rows.size();
    b.seq = seq;
    for (const auto& r : rows) {
        b.tokens.insert(b.tokens.end(), r.tokens.begin(), r.tokens.end());
        b.mask.insert(b.mask.end(), r.mask.begin(), r.mask.end());
        b.tags.push_back(tags[r.source]);
    }
    return b;
}

}  // namespace detail

// Shuffled document packing over tagged corpora. Rows never mix languages; one
// epoch visits every document once; the last batch of an epoch may be short.
class PackedStream final : public BatchStream {
public:
    PackedStream(std::vector<Corpus> corpora, std::size_t batch, std::size_t seq, std::uint64_t seed)
        : corpora_(std::move(corpora)), batch_(batch), seq_(seq), seed_(seed) {
        if (batch_ == 0 || seq_ == 0) throw ArgumentError("batch_stream: batch and seq must be positive");
        if (corpora_.empty()) throw ArgumentError("batch_stream: no corpora");
        for (const auto& c : corpora_) {
            c.validate();
            tags_.push_back(c.tag);
        }
        build_epoch();
    }

    Batch next() override {
        if (cursor_ >= rows_.size()) {
            ++epoch_;
            build_epoch();
        }
        const std::size_t n = std::min(batch_, rows_.size() - cursor_);
        Batch b = detail::make_batch(std::span<const detail::Row>(rows_.data() + cursor_, n), seq_, tags_);
        cursor_ += n;
        return b;
    }

    std::size_t batches_per_epoch() const override { return (rows_.size() + batch_ - 1) / batch_; }
    std::size_t rows_per_epoch() const { return rows_.size(); }
    std::size_t epoch() const { return epoch_; }

private:
    void build_epoch() {
        std::mt19937_64 g(rng::mix(seed_, epoch_));
        rows_.clear();
        cursor_ = 0;
        for (std::size_t s = 0; s < corpora_.size(); ++s) {
            std::vector<std::size_t> order(corpora_[s].documents.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng::shuffle(order, g);
            detail::pack_rows(corpora_[s], order, s, seq_, rows_);
        }
        rng::shuffle(rows_, g);
    }

    std::vector<Corpus> corpora_;
    std::vector<std::string> tags_;
    std::size_t batch_, seq_;
    std::uint64_t seed_;
    std::size_t epoch_ = 0;
    std::vector<detail::Row> rows_;
    std::size_t cursor_ = 0;
};

inline std::unique_ptr<BatchStream> batch_stream(std::vector<Corpus> corpora, std::size_t batch, std::size_t seq,
                                                 std::uint64_t seed) {
    return std::make_unique<PackedStream>(std::move(corpora), batch, seq, seed);
}

struct ReplayRatio {
    std::size_t original = 1;
    std::size_t expansion = 2;
};

// Interleaves whole batches: `original` batches from the first source, then
// `expansion` from the second, repeating.
class ReplayStream final : public BatchStream {
public:
    ReplayStream(std::unique_ptr<BatchStream> original, std::unique_ptr<BatchStream> expansion, ReplayRatio ratio)
        : orig_(std::move(original)), exp_(std::move(expansion)), ratio_(ratio) {
        if (ratio_.original + ratio_.expansion == 0) throw ArgumentError("replay ratio must have a positive part");
    }

    Batch next() override {
        const std::size_t period = ratio_.original + ratio_.expansion;
        const std::size_t slot = i_++ % period;
        return slot < ratio_.original ? orig_->next() : exp_->next();
    }

    std::size_t batches_per_epoch() const override {
        return (ratio_.original ? orig_->batches_per_epoch() : 0) + (ratio_.expansion ? exp_->batches_per_epoch() : 0);
    }

private:
    std::unique_ptr<BatchStream> orig_, exp_;
    ReplayRatio ratio_;
    std::size_t i_ = 0;
};

inline std::unique_ptr<BatchStream> make_replay_stream(const Corpus& original, const Corpus& expansion,
                                                       ReplayRatio ratio, std::size_t batch, std::size_t seq,
                                                       std::uint64_t seed) {
    if (original.documents.empty() || expansion.documents.empty()) {
        throw ArgumentError("make_replay_stream: both corpora must be non-empty");
    }
    return std::make_unique<ReplayStream>(std::make_unique<PackedStream>(std::vector<Corpus>{original}, batch, seq,
                                                                         rng::mix(seed, 11)),
                                          std::make_unique<PackedStream>(std::vector<Corpus>{expansion}, batch, seq,
                                                                         rng::mix(seed, 12)),
                                          ratio);
}

// ---- echo task ---------------------------------------------------------------

// [Q] payload [A] payload [eos]
inline std::vector<TokenId> make_echo_sequence(std::span<const TokenId> payload) {
    std::vector<TokenId> s;
    s.push_back(tokens::kQuestion);
    s.insert(s.end(), payload.begin(), payload.end());
    s.push_back(tokens::kAnswer);
    s.insert(s.end(), payload.begin(), payload.end());
    s.push_back(tokens::kEos);
    return s;
}

inline std::vector<TokenId> make_echo_prompt(std::span<const TokenId> payload) {
    std::vector<TokenId> s;
    s.push_back(tokens::kQuestion);
    s.insert(s.end(), payload.begin(), payload.end());
    s.push_back(tokens::kAnswer);
    return s;
}

struct EchoParts {
    std::vector<TokenId> prompt;  // payload between the markers
    std::vector<TokenId> answer;  // tokens after [A], before eos
};

inline std::optional<EchoParts> parse_echo_sequence(std::span<const TokenId> seq) {
    if (seq.size() < 3 || seq.front() != tokens::kQuestion) return std::nullopt;
    auto a = std::find(seq.begin(), seq.end(), tokens::kAnswer);
    if (a == seq.end()) return std::nullopt;
    auto e = std::find(a + 1, seq.end(), tokens::kEos);
    if (e == seq.end()) return std::nullopt;
    return EchoParts{std::vector<TokenId>(seq.begin() + 1, a), std::vector<TokenId>(a + 1, e)};
}

inline std::vector<TokenId> sample_payload(const Corpus& c, std::mt19937_64& g, std::size_t max_len) {
    const std::size_t len = 1 + rng::below(g, max_len);
    for (;;) {
        const auto& doc = c.documents[rng::below(g, c.documents.size())];
        if (doc.size() < len) continue;
        const std::size_t start = rng::below(g, doc.size() - len + 1);
        return std::vector<TokenId>(doc.begin() + static_cast<std::ptrdiff_t>(start),
                                    doc.begin() + static_cast<std::ptrdiff_t>(start + len));
    }
}

inline std::vector<std::vector<TokenId>> sample_payloads(const Corpus& c, std::size_t n, std::uint64_t seed,
                                                         std::size_t max_len = 8) {
    c.validate();
    std::mt19937_64 g(rng::mix(seed, 99));
    std::vector<std::vector<TokenId>> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(sample_payload(c, g, max_len));
    return out;
}

// Supervised echo sequences packed left to right into rows. Loss mask covers
// the answer payload and eos only.
class EchoStream final : public BatchStream {
public:
    EchoStream(Corpus corpus, std::uint64_t seed, std::size_t batch, std::size_t seq, std::size_t max_payload = 8)
        : corpus_(std::move(corpus)), g_(rng::mix(seed, 7)), batch_(batch), seq_(seq), max_payload_(max_payload) {
        corpus_.validate();
        if (batch_ == 0 || seq_ < 2 * max_payload_ + 3) throw ArgumentError("echo stream: seq too short for payloads");
    }

    Batch next() override {
        Batch b;
        b.rows = batch_;
        b.seq = seq_;
        for (std::size_t r = 0; r < batch_; ++r) {
            std::vector<TokenId> row;
            std::vector<std::uint8_t> mask;
            for (;;) {
                if (pending_.empty()) pending_ = sample_payload(corpus_, g_, max_payload_);
                if (row.size() + 2 * pending_.size() + 3 > seq_) break;
                const auto s = make_echo_sequence(pending_);
                const std::size_t answer_start = pending_.size() + 2;
                for (std::size_t i = 0; i < s.size(); ++i) {
                    row.push_back(s[i]);
                    mask.push_back(i >= answer_start ? 1 : 0);
                }
                pending_.clear();
            }
            row.resize(seq_, tokens::kPad);
            mask.resize(seq_, 0);
            b.tokens.insert(b.tokens.end(), row.begin(), row.end());
            b.mask.insert(b.mask.end(), mask.begin(), mask.end());
            b.tags.push_back(corpus_.tag);
        }
        return b;
    }

    std::size_t batches_per_epoch() const override {
        return std::max<std::size_t>(1, corpus_.num_tokens() / (batch_ * seq_));
    }

private:
    Corpus corpus_;
    std::mt19937_64 g_;
    std::size_t batch_, seq_, max_payload_;
    std::vector<TokenId> pending_;
};

inline std::unique_ptr<BatchStream> synth_posttrain_task(const Corpus& corpus, std::uint64_t seed, std::size_t batch,
                                                         std::size_t seq, std::size_t max_payload = 8) {
    return std::make_unique<EchoStream>(corpus, seed, batch, seq, max_payload);
}

// Per-document evaluation rows: each document (plus eos) is cut into windows
// of at most `seq` tokens that do not cross document boundaries.
inline std::vector<Batch> document_batches(const Corpus& c, std::size_t batch, std::size_t seq) {
    c.validate();
    std::vector<detail::Row> rows;
    for (const auto& doc : c.documents) {
        std::vector<TokenId> s(doc);
        s.push_back(tokens::kEos);
        for (std::size_t start = 0; start < s.size(); start += seq) {
            const std::size_t n = std::min(seq, s.size() - start);
            detail::Row r{0, std::vector<TokenId>(s.begin() + static_cast<std::ptrdiff_t>(start),
                                                  s.begin() + static_cast<std::ptrdiff_t>(start + n)),
                          std::vector<std::uint8_t>(n, 1)};
            r.tokens.resize(seq, tokens::kPad);
            r.mask.resize(seq, 0);
            rows.push_back(std::move(r));
        }
    }
    std::vector<std::string> tags{c.tag};
    std::vector<Batch> out;
    for (std::size_t i = 0; i < rows.size(); i += batch) {
        const std::size_t n = std::min(batch, rows.size() - i);
        out.push_back(detail::make_batch(std::span<const detail::Row>(rows.data() + i, n), seq, tags));
    }
    return out;
}

}  // namespace deltamoe
