// Copyright 2026 The DeltaMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>

#include "deltamoe/data.hpp"
#include "test_util.hpp"

namespace deltamoe {
namespace {

LanguageSpec small_lang(std::string tag, std::uint64_t seed, unsigned lo, unsigned hi, std::size_t n = 20000) {
    LanguageSpec s;
    s.tag = std::move(tag);
    s.seed = seed;
    s.alpha_lo = lo;
    s.alpha_hi = hi;
    s.n_tokens = n;
    return s;
}

std::map<TokenId, double> unigram(const Corpus& c) {
    std::map<TokenId, double> p;
    for (const auto& d : c.documents) {
        for (auto t : d) p[t] += 1.0;
    }
    for (auto& [t, v] : p) v /= static_cast<double>(c.num_tokens());
    return p;
}

// Add-one bigram model over the full vocabulary, with eos between documents.
struct BigramModel {
    std::vector<double> counts = std::vector<double>(tokens::kVocabSize * tokens::kVocabSize, 1.0);
    std::vector<double> totals = std::vector<double>(tokens::kVocabSize, static_cast<double>(tokens::kVocabSize));

    explicit BigramModel(const Corpus& c) {
        for (const auto& d : c.documents) {
            TokenId prev = tokens::kEos;
            for (auto t : d) {
                counts[prev * tokens::kVocabSize + t] += 1;
                totals[prev] += 1;
                prev = t;
            }
        }
    }

    double perplexity(const Corpus& c) const {
        double nll = 0;
        std::size_t n = 0;
        for (const auto& d : c.documents) {
            TokenId prev = tokens::kEos;
            for (auto t : d) {
                nll -= std::log(counts[prev * tokens::kVocabSize + t] / totals[prev]);
                prev = t;
                ++n;
            }
        }
        return std::exp(nll / static_cast<double>(n));
    }
};

TEST(Tokenizer, EmptyAndBytes) {
    EXPECT_TRUE(tokenize("").empty());
    EXPECT_EQ(detokenize(std::vector<TokenId>{}), "");
    EXPECT_EQ(tokenize("AB"), (std::vector<TokenId>{65, 66}));
    EXPECT_EQ(tokenize(std::string_view("\xff\0z", 3)), (std::vector<TokenId>{255, 0, 122}));
}

TEST(Tokenizer, RandomByteStringsRoundTrip) {
    std::mt19937_64 g(1);
    for (int i = 0; i < 1000; ++i) {
        std::string s(g() % 200, '\0');
        for (auto& ch : s) ch = static_cast<char>(g() % 256);
        const auto ids = tokenize(s);
        ASSERT_EQ(ids.size(), s.size());
        for (std::size_t k = 0; k < s.size(); ++k) ASSERT_EQ(ids[k], static_cast<unsigned char>(s[k]));
        ASSERT_EQ(detokenize(ids), s);
    }
}

TEST(Tokenizer, SpecialsNeverCrash) {
    std::vector<TokenId> ids;
    for (TokenId t = 256; t < 272; ++t) ids.push_back(t);
    const auto s = detokenize(ids);
    EXPECT_EQ(s.rfind("<eos><pad>Q:  A: ", 0), 0u);
    EXPECT_NE(s.find("\xEF\xBF\xBD"), std::string::npos);
    EXPECT_NO_THROW(detokenize(std::vector<TokenId>{-3, 9999}));
}

TEST(Generator, SameSpecIsBitIdentical) {
    const auto s = small_lang("orig_A", 3, 'a', 'z');
    const auto a = gen_language(s), b = gen_language(s);
    EXPECT_EQ(a.documents, b.documents);
    auto other = s;
    other.sample_stream = 1;
    EXPECT_NE(gen_language(other).documents, a.documents);
}

TEST(Generator, InvariantsHold) {
    const auto s = small_lang("orig_A", 3, 'a', 'z');
    const auto c = gen_language(s);
    EXPECT_NO_THROW(c.validate());
    EXPECT_GE(c.num_tokens(), s.n_tokens);
    EXPECT_EQ(c.tag, "orig_A");
    EXPECT_FALSE(c.provenance.empty());
    const auto alpha = s.alphabet();
    for (const auto& d : c.documents) {
        EXPECT_GE(d.size(), 64u);
        EXPECT_LE(d.size(), 512u);
        for (auto t : d) ASSERT_NE(std::find(alpha.begin(), alpha.end(), static_cast<unsigned>(t)), alpha.end());
    }
}

TEST(Generator, ArgumentErrors) {
    auto s = small_lang("x", 1, 'a', 'z', 999);
    EXPECT_THROW(gen_language(s), ArgumentError);
    s.n_tokens = 1000;
    EXPECT_NO_THROW(gen_language(s));
    s.temperature = 0;
    EXPECT_THROW(gen_language(s), ArgumentError);
    s.temperature = 0.5;
    s.alpha_lo = 'z';
    s.alpha_hi = 'a';
    EXPECT_THROW(gen_language(s), ArgumentError);
    std::vector<LanguageSpec> overlap{small_lang("a", 1, 'a', 'm'), small_lang("b", 2, 'k', 'z')};
    EXPECT_THROW(check_disjoint_alphabets(overlap), ArgumentError);
    std::vector<LanguageSpec> ok{small_lang("a", 1, 'a', 'z'), small_lang("b", 2, 'A', 'Z')};
    EXPECT_NO_THROW(check_disjoint_alphabets(ok));
}

TEST(Generator, DisjointLanguagesShareLittleUnigramMass) {
    const auto a = unigram(gen_language(small_lang("orig_A", 1, 'a', 'z')));
    const auto b = unigram(gen_language(small_lang("exp_X", 2, 'A', 'Z')));
    double shared = 0;
    for (const auto& [t, p] : a) {
        if (b.count(t)) shared += std::min(p, b.at(t));
    }
    EXPECT_LT(shared, 0.05);
}

TEST(Generator, BigramFitSeparatesLanguages) {
    std::vector<LanguageSpec> specs{small_lang("orig_A", 1, 'a', 'z', 50000), small_lang("exp_X", 2, 'A', 'Z', 50000),
                                    small_lang("exp_Y", 5, '0', '9', 50000)};
    for (const auto& sa : specs) {
        const BigramModel fit(gen_language(sa));
        auto held = sa;
        held.sample_stream = 1;
        held.n_tokens = 10000;
        const double own = fit.perplexity(gen_language(held));
        for (const auto& sb : specs) {
            if (sb.tag == sa.tag) continue;
            EXPECT_GT(fit.perplexity(gen_language(sb)), own) << sa.tag << " vs " << sb.tag;
        }
    }
}

TEST(Generator, RepeatsCopyEarlierSpans) {
    auto s = small_lang("orig_A", 4, 'a', 'z');
    s.repeat_prob = 0;
    const auto plain = gen_language(s);
    s.repeat_prob = 0.05;
    const auto rep = gen_language(s);
    // fraction of positions whose preceding 6-gram occurred earlier in the document
    auto repeated = [](const Corpus& c) {
        std::size_t hit = 0, n = 0;
        for (const auto& d : c.documents) {
            std::set<std::vector<TokenId>> seen;
            for (std::size_t i = 6; i <= d.size(); ++i) {
                std::vector<TokenId> k(d.begin() + static_cast<std::ptrdiff_t>(i - 6), d.begin() + static_cast<std::ptrdiff_t>(i));
                hit += !seen.insert(k).second;
                ++n;
            }
        }
        return static_cast<double>(hit) / static_cast<double>(n);
    };
    EXPECT_GT(repeated(rep), repeated(plain) + 0.05);
    s.repeat_prob = 1.5;
    EXPECT_THROW(gen_language(s), ArgumentError);
}

TEST(Ingest, LinesBecomeDocuments) {
    const auto dir = testing::temp_dir("ingest");
    const auto path = (dir / "t.txt").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "hello world\r\n\n\xc3\xa9t\xc3\xa9\nlast";
    }
    const auto c = ingest_text_file(path, "file_A");
    ASSERT_EQ(c.documents.size(), 3u);
    EXPECT_EQ(detokenize(c.documents[0]), "hello world");
    EXPECT_EQ(c.documents[1].size(), 5u);
    EXPECT_EQ(detokenize(c.documents[2]), "last");
    EXPECT_EQ(c.provenance, path);
    EXPECT_NO_THROW(c.validate());
    EXPECT_THROW(ingest_text_file((dir / "missing.txt").string(), "x"), IoError);
    {
        std::ofstream out((dir / "blank.txt").string());
        out << "\n\n";
    }
    EXPECT_THROW(ingest_text_file((dir / "blank.txt").string(), "x"), ArgumentError);
}

TEST(TokenCache, RoundTripAndCorruption) {
    const auto c = gen_language(small_lang("orig_A", 3, 'a', 'z', 5000));
    const auto dir = testing::temp_dir("cache");
    const auto path = (dir / "a.tok").string();
    save_token_cache(c, path);
    EXPECT_EQ(load_token_cache(path, "orig_A").documents, c.documents);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 2);
    try {
        load_token_cache(path, "orig_A");
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.field(), "count");
    }
    EXPECT_THROW(load_token_cache((dir / "none.tok").string(), "x"), IoError);
}

TEST(PackedStream, EpochConservesTokens) {
    const auto a = gen_language(small_lang("orig_A", 1, 'a', 'z', 8000));
    const auto b = gen_language(small_lang("exp_X", 2, 'A', 'Z', 5000));
    PackedStream s({a, b}, 8, 64, 3);
    std::map<std::string, std::size_t> text, eos, rows;
    std::size_t pad = 0;
    for (std::size_t i = 0; i < s.batches_per_epoch(); ++i) {
        const auto bt = s.next();
        for (std::size_t r = 0; r < bt.rows; ++r) {
            ++rows[bt.tags[r]];
            for (std::size_t t = 0; t < bt.seq; ++t) {
                const auto id = bt.token(r, t);
                EXPECT_EQ(bt.target(r, t), id != tokens::kPad);
                if (id == tokens::kPad) {
                    ++pad;
                } else if (id == tokens::kEos) {
                    ++eos[bt.tags[r]];
                } else {
                    ++text[bt.tags[r]];
                }
            }
        }
    }
    EXPECT_EQ(s.epoch(), 0u);
    for (const auto* c : {&a, &b}) {
        EXPECT_EQ(text[c->tag], c->num_tokens());
        EXPECT_EQ(eos[c->tag], c->documents.size());
        const std::size_t n = c->num_tokens() + c->documents.size();
        EXPECT_EQ(rows[c->tag], (n + 63) / 64);
    }
    EXPECT_LT(pad, 2u * 64);
    s.next();
    EXPECT_EQ(s.epoch(), 1u);
}

TEST(PackedStream, SameSeedSameOrder) {
    const auto a = gen_language(small_lang("orig_A", 1, 'a', 'z', 5000));
    PackedStream s1({a}, 4, 32, 9), s2({a}, 4, 32, 9), s3({a}, 4, 32, 10);
    bool differs = false;
    for (int i = 0; i < 60; ++i) {
        const auto x = s1.next(), y = s2.next(), z = s3.next();
        EXPECT_EQ(x.tokens, y.tokens);
        differs |= x.tokens != z.tokens;
    }
    EXPECT_TRUE(differs);
}

TEST(PackedStream, RowsNeverMixLanguages) {
    Corpus a{"a", {{'a', 'b'}, {'c'}}, ""};
    Corpus b{"b", {{'X', 'Y', 'Z'}}, ""};
    PackedStream s({a, b}, 4, 4, 1);
    const auto bt = s.next();
    ASSERT_EQ(bt.rows, 3u);
    for (std::size_t r = 0; r < bt.rows; ++r) {
        for (std::size_t t = 0; t < bt.seq; ++t) {
            const auto id = bt.token(r, t);
            if (id >= 'a' && id <= 'c') {
                EXPECT_EQ(bt.tags[r], "a");
            }
            if (id >= 'X' && id <= 'Z') {
                EXPECT_EQ(bt.tags[r], "b");
            }
        }
    }
    EXPECT_THROW(PackedStream({a}, 0, 4, 1), ArgumentError);
    EXPECT_THROW(PackedStream({}, 1, 4, 1), ArgumentError);
    EXPECT_THROW(PackedStream({Corpus{"e", {{}}, ""}}, 1, 4, 1), ArgumentError);
}

TEST(Echo, SequenceFormatAndParse) {
    const std::vector<TokenId> p{'h', 'i'};
    const auto s = make_echo_sequence(p);
    EXPECT_EQ(s, (std::vector<TokenId>{tokens::kQuestion, 'h', 'i', tokens::kAnswer, 'h', 'i', tokens::kEos}));
    EXPECT_EQ(detokenize(s), "Q: hi A: hi<eos>");
    const auto parts = parse_echo_sequence(s);
    ASSERT_TRUE(parts);
    EXPECT_EQ(parts->prompt, p);
    EXPECT_EQ(parts->answer, p);
    const auto prompt = make_echo_prompt(p);
    EXPECT_EQ(prompt.size(), 4u);
    EXPECT_FALSE(parse_echo_sequence(prompt));
    EXPECT_FALSE(parse_echo_sequence(std::vector<TokenId>{'a', tokens::kAnswer, tokens::kEos}));
}

TEST(Echo, PayloadsComeFromTheCorpus) {
    const auto c = gen_language(small_lang("orig_A", 1, 'a', 'z', 5000));
    const auto ps = sample_payloads(c, 200, 4, 8);
    EXPECT_EQ(ps, sample_payloads(c, 200, 4, 8));
    std::set<std::size_t> lengths;
    for (const auto& p : ps) {
        ASSERT_GE(p.size(), 1u);
        ASSERT_LE(p.size(), 8u);
        lengths.insert(p.size());
        bool found = false;
        for (const auto& d : c.documents) {
            found |= std::search(d.begin(), d.end(), p.begin(), p.end()) != d.end();
        }
        EXPECT_TRUE(found);
    }
    EXPECT_EQ(lengths.size(), 8u);
}

TEST(DocumentBatches, WindowsStayInsideDocuments) {
    Corpus c{"a", {std::vector<TokenId>(10, 'a'), std::vector<TokenId>(3, 'b')}, ""};
    const auto bs = document_batches(c, 2, 4);
    std::size_t rows = 0, targets = 0;
    for (const auto& b : bs) {
        rows += b.rows;
        for (auto m : b.mask) targets += m;
        for (std::size_t r = 0; r < b.rows; ++r) {
            std::set<TokenId> letters;
            for (std::size_t t = 0; t < b.seq; ++t) {
                const auto id = b.token(r, t);
                if (id < 256) letters.insert(id);
            }
            EXPECT_LE(letters.size(), 1u);
        }
    }
    EXPECT_EQ(rows, 3u + 1u);
    EXPECT_EQ(targets, 11u + 4u);
}

}  // namespace
}  // namespace deltamoe
