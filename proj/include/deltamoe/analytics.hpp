// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "deltamoe/data.hpp"
#include "deltamoe/model.hpp"

namespace deltamoe {

// ---- perplexity --------------------------------------------------------------

struct TokenLoss {
    double sum = 0;  // summed negative log-likelihood
    std::size_t count = 0;
};

namespace analytics_detail {

// Per-row NLL sums for a batch, in binary64 from binary32 logits.
template <typename T>
std::vector<TokenLoss> row_losses(const Model<T>& model, const Batch& b) {
    const auto z = logits(model, std::span<const TokenId>(b.tokens), b.rows, b.seq);
    const std::size_t v = z.cols();
    std::vector<TokenLoss> out(b.rows);
    for (std::size_t r = 0; r < b.rows; ++r) {
        for (std::size_t t = 1; t < b.seq; ++t) {
            if (!b.target(r, t)) continue;
            const T* row = z.ptr() + (r * b.seq + t - 1) * v;
            double m = row[0];
            for (std::size_t j = 1; j < v; ++j) m = std::max(m, static_cast<double>(row[j]));
            double s = 0;
            for (std::size_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(row[j]) - m);
            out[r].sum += m + std::log(s) - static_cast<double>(row[b.token(r, t)]);
            ++out[r].count;
        }
    }
    return out;
}

}  // namespace analytics_detail

// Total teacher-forced NLL over per-document windows. Row sums are added in
// sorted order so the result does not depend on document order.
template <typename T>
TokenLoss corpus_loss(const Model<T>& model, const Corpus& corpus, std::size_t batch = 32) {
    if (corpus.documents.empty()) throw ArgumentError("perplexity: corpus is empty");
    std::vector<double> sums;
    std::size_t count = 0;
    for (const auto& b : document_batches(corpus, batch, model.config.max_seq_len)) {
        for (const auto& r : analytics_detail::row_losses(model, b)) {
            if (!r.count) continue;
            sums.push_back(r.sum);
            count += r.count;
        }
    }
    if (count == 0) throw ArgumentError("perplexity: corpus has no predictable tokens");
    std::sort(sums.begin(), sums.end());
    TokenLoss out{0, count};
    for (double s : sums) out.sum += s;
    return out;
}

// exp(mean per-token NLL) over the corpus.
template <typename T>
double perplexity(const Model<T>& model, const Corpus& corpus, std::size_t batch = 32) {
    const auto l = corpus_loss(model, corpus, batch);
    return std::exp(l.sum / static_cast<double>(l.count));
}

// ---- echo exact-match --------------------------------------------------------

// Greedy continuation of "Q: payload A:" for every payload. The answer is the
// generated text before eos; at most len(payload) + 1 tokens are generated.
template <typename T>
std::vector<std::vector<TokenId>> echo_answers(const Model<T>& model, const std::vector<std::vector<TokenId>>& payloads,
                                               std::size_t batch = 64) {
    const std::size_t seq = model.config.max_seq_len;
    std::vector<std::vector<TokenId>> answers(payloads.size());
    for (std::size_t start = 0; start < payloads.size(); start += batch) {
        const std::size_t n = std::min(batch, payloads.size() - start);
        std::vector<std::vector<TokenId>> rows(n);
        std::vector<bool> done(n, false);
        std::size_t width = 0, max_new = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& p = payloads[start + i];
            if (2 * p.size() + 3 > seq) throw ArgumentError("echo_accuracy: payload too long for the context");
            rows[i] = make_echo_prompt(p);
            width = std::max(width, rows[i].size() + p.size() + 1);
            max_new = std::max(max_new, p.size() + 1);
        }
        for (std::size_t step = 0; step < max_new; ++step) {
            std::size_t cur = 0;
            for (std::size_t i = 0; i < n; ++i) cur = std::max(cur, rows[i].size());
            const std::size_t w = std::min(width, cur);
            std::vector<TokenId> mat(n * w, tokens::kPad);
            for (std::size_t i = 0; i < n; ++i) std::copy(rows[i].begin(), rows[i].end(), mat.begin() + i * w);
            const auto z = logits(model, std::span<const TokenId>(mat), n, w);
            const std::size_t v = z.cols();
            bool any = false;
            for (std::size_t i = 0; i < n; ++i) {
                const auto& p = payloads[start + i];
                if (done[i]) continue;
                const T* row = z.ptr() + (i * w + rows[i].size() - 1) * v;
                const auto next = static_cast<TokenId>(std::max_element(row, row + v) - row);
                if (next == tokens::kEos) {
                    done[i] = true;
                    continue;
                }
                answers[start + i].push_back(next);
                rows[i].push_back(next);
                if (answers[start + i].size() > p.size()) done[i] = true;
                any = any || !done[i];
            }
            if (!any) break;
        }
    }
    return answers;
}

template <typename T>
double echo_accuracy(const Model<T>& model, const std::vector<std::vector<TokenId>>& payloads) {
    if (payloads.empty()) return 0.0;
    const auto answers = echo_answers(model, payloads);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < payloads.size(); ++i) hits += answers[i] == payloads[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(payloads.size());
}

// ---- routing statistics ------------------------------------------------------

// counts[layer][expert][language] of top-k memberships over non-pad tokens.
struct RouterStats {
    std::size_t n_layers = 0, n_experts = 0, top_k = 0;
    std::vector<std::string> languages;
    std::vector<std::vector<std::vector<std::uint64_t>>> counts;
    std::vector<std::vector<std::uint64_t>> tokens;  // [layer][language]

    RouterStats() = default;
    RouterStats(std::size_t layers, std::size_t experts, std::size_t k, std::vector<std::string> langs)
        : n_layers(layers), n_experts(experts), top_k(k), languages(std::move(langs)),
          counts(layers, std::vector<std::vector<std::uint64_t>>(experts, std::vector<std::uint64_t>(languages.size()))),
          tokens(layers, std::vector<std::uint64_t>(languages.size())) {}

    std::size_t language_index(const std::string& tag) const {
        const auto it = std::find(languages.begin(), languages.end(), tag);
        if (it == languages.end()) throw ArgumentError("router stats: unknown language '" + tag + "'");
        return static_cast<std::size_t>(it - languages.begin());
    }

    double frequency(std::size_t l, std::size_t e, std::size_t lang) const {
        const auto n = tokens[l][lang];
        return n ? static_cast<double>(counts[l][e][lang]) / static_cast<double>(top_k * n) : 0.0;
    }

    // Sum over experts equals k times tokens seen, for every (layer, language).
    bool conserved() const {
        for (std::size_t l = 0; l < n_layers; ++l) {
            for (std::size_t g = 0; g < languages.size(); ++g) {
                std::uint64_t s = 0;
                for (std::size_t e = 0; e < n_experts; ++e) s += counts[l][e][g];
                if (s != top_k * tokens[l][g]) return false;
            }
        }
        return true;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "layer,expert,language,count,frequency\n";
        for (std::size_t l = 0; l < n_layers; ++l) {
            for (std::size_t e = 0; e < n_experts; ++e) {
                for (std::size_t g = 0; g < languages.size(); ++g) {
                    os << l << ',' << e << ',' << languages[g] << ',' << counts[l][e][g] << ',' << frequency(l, e, g)
                       << '\n';
                }
            }
        }
        return os.str();
    }
};

// Adds the top-k memberships of one forward pass over `b` into `stats`.
inline void accumulate_routes(RouterStats& stats, const Batch& b, const std::vector<Selection>& sel) {
    for (std::size_t l = 0; l < stats.n_layers; ++l) {
        for (std::size_t r = 0; r < b.rows; ++r) {
            const std::size_t g = stats.language_index(b.tags[r]);
            for (std::size_t t = 0; t < b.seq; ++t) {
                if (b.token(r, t) == tokens::kPad) continue;
                for (auto e : sel[l].row(r * b.seq + t)) ++stats.counts[l][e][g];
                ++stats.tokens[l][g];
            }
        }
    }
}

// `max_tokens` caps the leading documents evaluated per corpus (0: all).
template <typename T>
RouterStats route_frequencies(const Model<T>& model, const std::vector<Corpus>& corpora, std::size_t max_tokens = 0,
                              std::size_t batch = 32) {
    if (!model.is_moe()) throw ArgumentError("route_frequencies: model is not an MoE model");
    std::vector<std::string> tags;
    for (const auto& c : corpora) {
        if (std::find(tags.begin(), tags.end(), c.tag) == tags.end()) tags.push_back(c.tag);
    }
    RouterStats stats(model.config.n_layers, model.config.n_experts, model.config.top_k, tags);
    for (const auto& c : corpora) {
        Corpus part{c.tag, {}, c.provenance};
        std::size_t n = 0;
        for (const auto& d : c.documents) {
            if (max_tokens && n >= max_tokens) break;
            part.documents.push_back(d);
            n += d.size();
        }
        for (const auto& b : document_batches(part, batch, model.config.max_seq_len)) {
            std::vector<Selection> sel;
            logits(model, std::span<const TokenId>(b.tokens), b.rows, b.seq, &sel);
            accumulate_routes(stats, b, sel);
        }
    }
    return stats;
}

// ---- trade-off report --------------------------------------------------------

struct EvalSet {
    Corpus original;
    Corpus expanded;
    std::vector<std::vector<TokenId>> original_payloads;
    std::vector<std::vector<TokenId>> expanded_payloads;
};

struct TradeoffRow {
    std::string model_id;
    std::string hash;
    double ppl_expanded = 0;
    double ppl_original = 0;
    double echo_original = 0;
    double echo_expanded = 0;
};

struct TradeoffReport {
    std::vector<TradeoffRow> rows;

    const TradeoffRow& at(const std::string& id) const {
        for (const auto& r : rows) {
            if (r.model_id == id) return r;
        }
        throw IndexError("tradeoff report: no row '" + id + "'");
    }

    nlohmann::ordered_json to_json() const {
        auto arr = nlohmann::ordered_json::array();
        for (const auto& r : rows) {
            arr.push_back({{"model_id", r.model_id},
                           {"hash", r.hash},
                           {"ppl_expanded", r.ppl_expanded},
                           {"ppl_original", r.ppl_original},
                           {"echo_original", r.echo_original},
                           {"echo_expanded", r.echo_expanded}});
        }
        return arr;
    }

    std::string to_csv() const {
        std::ostringstream os;
        os.precision(17);
        os << "model_id,hash,ppl_expanded,ppl_original,echo_original,echo_expanded\n";
        for (const auto& r : rows) {
            os << r.model_id << ',' << r.hash << ',' << r.ppl_expanded << ',' << r.ppl_original << ','
               << r.echo_original << ',' << r.echo_expanded << '\n';
        }
        return os.str();
    }
};

template <typename T>
TradeoffRow evaluate_model(const std::string& id, const std::string& hash, const Model<T>& model, const EvalSet& eval) {
    if (hash.empty()) throw ArgumentError("tradeoff report: row '" + id + "' has no checkpoint hash");
    TradeoffRow r{id, hash};
    r.ppl_expanded = perplexity(model, eval.expanded);
    r.ppl_original = perplexity(model, eval.original);
    r.echo_original = echo_accuracy(model, eval.original_payloads);
    r.echo_expanded = echo_accuracy(model, eval.expanded_payloads);
    return r;
}

}  // namespace deltamoe
