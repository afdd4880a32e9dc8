#include <gtest/gtest.h>

#include "json.hpp"

#include "allomlm/corpus.hpp"
#include "allomlm/io.hpp"
#include "allomlm/rng.hpp"

using namespace allomlm;

namespace {

Corpus fixture_corpus() { return parse_corpus(io::read_file(ALLOMLM_FIXTURES "/corpus.jsonl")); }

Inscription make(std::string id, std::string_view text) {
    Inscription ins;
    ins.id = std::move(id);
    ins.tokens = tokenize(text);
    return ins;
}

Corpus random_corpus(std::uint64_t seed) {
    Rng rng(seed);
    const char* glyphs[] = {"王", "公", "君", "伯", "尹", "子", "孫", "永", "寶", "用"};
    Corpus c;
    const auto n = 1 + rng.below(25);
    for (std::size_t i = 0; i < n; ++i) {
        std::string text;
        const auto len = 1 + rng.below(6);
        for (std::size_t k = 0; k < len; ++k) {
            const auto r = rng.below(12);
            if (r == 10) {
                text += "□";
            } else if (r == 11) {
                text += "{UNK:" + std::to_string(rng.below(3)) + "}";
            } else {
                text += glyphs[r % 4];  // small alphabet so duplicates occur
            }
        }
        c.inscriptions.push_back(make("R" + std::to_string(rng.below(1000)) + "." + std::to_string(i), text));
    }
    return c;
}

} // namespace

TEST(Tokenize, TwoTokenClasses) {
    auto toks = tokenize("□王");
    ASSERT_EQ(toks.size(), 2u);
    EXPECT_EQ(toks[0], Token::unreadable());
    EXPECT_EQ(toks[1], Token::identifiable("王"));
}

TEST(Tokenize, PlaceholdersEscapesAndMarks) {
    auto toks = tokenize("{UNK:3}王́ {G:ab}");
    ASSERT_EQ(toks.size(), 3u);
    EXPECT_EQ(toks[0], Token::undeciphered(3));
    EXPECT_EQ(toks[1], Token::identifiable("王́"));
    EXPECT_EQ(toks[2], Token::identifiable("ab"));
    EXPECT_THROW(tokenize("{UNK:x}"), DataError);
    EXPECT_THROW(tokenize("王}"), DataError);
    EXPECT_THROW(tokenize("{FOO:1}"), DataError);
}

TEST(Tokenize, AuxiliaryTextIsAllIdentifiable) {
    auto toks = tokenize("□王", CorpusKind::DaptAuxiliary);
    EXPECT_EQ(toks[0], Token::identifiable("□"));
    EXPECT_THROW(tokenize("{UNK:1}", CorpusKind::DaptAuxiliary), DataError);
}

TEST(ParseCorpus, RecordWithDynasty) {
    auto c = parse_corpus(R"({"id":"A1","text":"□王","dynasty":"WesternZhou"})");
    ASSERT_EQ(c.inscriptions.size(), 1u);
    const auto& ins = c.inscriptions[0];
    EXPECT_EQ(ins.tokens.size(), 2u);
    EXPECT_EQ(ins.dynasty, Dynasty::WesternZhou);
    EXPECT_FALSE(ins.period);
}

TEST(ParseCorpus, Errors) {
    EXPECT_THROW(parse_corpus(R"({"id":"A","text":""})"), DataError);
    try {
        parse_corpus("{\"id\":\"A\",\"text\":\"王\"}\n{\"id\":\"B\",\"text\":\"\"}\n");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("empty inscription"), std::string::npos);
    }
    EXPECT_THROW(parse_corpus("{\"id\":\"A\",\"text\":\"王\"}\n{\"id\":\"A\",\"text\":\"公\"}"), DataError);
    EXPECT_THROW(parse_corpus(R"({"id":"A","text":"王","period":"Late"})"), DataError);
    EXPECT_THROW(parse_corpus(R"({"id":"A","text":"王","color":"red"})"), DataError);
    EXPECT_THROW(parse_corpus(R"({"id":"A","text":"王)"), DataError);
    EXPECT_THROW(parse_corpus(R"({"id":"A","text":"王","dynasty":"Qin"})"), DataError);
    EXPECT_THROW(parse_corpus(R"(["A","王"])"), DataError);
}

TEST(ParseCorpus, RoundTripIsBitExact) {
    const auto raw = io::read_file(ALLOMLM_FIXTURES "/corpus.jsonl");
    auto c = parse_corpus(raw);
    auto text = serialize_corpus(c);
    auto again = parse_corpus(text);
    EXPECT_EQ(again, c);
    EXPECT_EQ(serialize_corpus(again), text);

    // a payload that needs the escape form
    Corpus odd;
    odd.inscriptions.push_back({"X", {Token::identifiable("□"), Token::identifiable("ab"), Token::undeciphered(7)}, {},
                                {}, ""});
    EXPECT_EQ(parse_corpus(serialize_corpus(odd)), odd);
}

TEST(FilterShort, Definition) {
    Corpus c;
    c.inscriptions = {make("a", "王"), make("b", "王公"), make("c", "王公君伯尹")};
    auto f = filter_short(c, 2);
    ASSERT_EQ(f.inscriptions.size(), 2u);
    EXPECT_EQ(f.inscriptions[0].tokens.size(), 2u);
    EXPECT_EQ(f.inscriptions[1].tokens.size(), 5u);
    EXPECT_EQ(filter_short(c, 0), c);
}

TEST(Deduplicate, TenCopiesCollapse) {
    Corpus c;
    for (int i = 9; i >= 0; --i) {
        c.inscriptions.push_back(make("C." + std::to_string(i), "伯先父鬲"));
    }
    auto r = deduplicate(c);
    ASSERT_EQ(r.corpus.inscriptions.size(), 1u);
    EXPECT_EQ(r.corpus.inscriptions[0].id, "C.0");
    ASSERT_EQ(r.log.size(), 1u);
    EXPECT_EQ(r.log[0].members.size(), 10u);
    EXPECT_EQ(r.log[0].representative, "C.0");
}

TEST(Deduplicate, DistinctAndIdentity) {
    Corpus c;
    c.inscriptions = {make("a", "王公"), make("b", "王君")};
    auto r = deduplicate(c);
    EXPECT_EQ(r.corpus, c);
    EXPECT_TRUE(r.log.empty());
}

TEST(Deduplicate, CommutesWithFilter) {
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
        auto c = random_corpus(seed);
        for (std::size_t k = 0; k <= 3; ++k) {
            auto a = deduplicate(filter_short(c, k)).corpus;
            auto b = filter_short(deduplicate(c).corpus, k);
            EXPECT_EQ(a, b) << "seed " << seed << " k " << k;
        }
    }
}

TEST(Vocab, SortedDeterministicShared) {
    Corpus a;
    a.inscriptions = {make("1", "王公{UNK:2}□")};
    Corpus b;
    b.inscriptions = {make("2", "公伯{UNK:0}")};
    std::vector<Corpus> both{a, b};
    auto v = build_vocab(both);
    EXPECT_EQ(v.size(), 5u + 2u + 3u);
    EXPECT_EQ(v.at(Token::undeciphered(0)), 5);
    EXPECT_EQ(v.at(Token::undeciphered(2)), 6);
    // code point order: 伯 U+4F2F < 公 U+516C < 王 U+738B
    EXPECT_EQ(v.at(Token::identifiable("伯")), 7);
    EXPECT_EQ(v.at(Token::identifiable("公")), 8);
    EXPECT_EQ(v.at(Token::identifiable("王")), 9);
    EXPECT_EQ(v.at(Token::unreadable()), Vocabulary::kUnreadable);
    EXPECT_NE(v.at(Token::undeciphered(0)), Vocabulary::kUnreadable);
    EXPECT_EQ(build_vocab(both), v);
    EXPECT_EQ(build_vocab(both).hash(), v.hash());
    EXPECT_THROW(v.at(Token::identifiable("尹")), DataError);
    for (std::int32_t i = Vocabulary::kUnreadable; i < static_cast<std::int32_t>(v.size()); ++i) {
        EXPECT_EQ(v.at(v.token(i)), i);
    }
}

TEST(Vocab, EveryFixturePlaceholderHasDistinctEntry) {
    auto c = fixture_corpus();
    std::vector<Corpus> cs{c};
    auto v = build_vocab(cs);
    for (const auto& ins : c.inscriptions) {
        for (const auto& t : ins.tokens) {
            auto idx = v.find(t);
            ASSERT_TRUE(idx.has_value());
            if (t.kind == TokenKind::Undeciphered) {
                EXPECT_NE(*idx, Vocabulary::kUnreadable);
                EXPECT_NE(*idx, Vocabulary::kMask);
            }
        }
    }
}

TEST(Audit, MatchesGoldenFile) {
    const auto golden = nlohmann::json::parse(io::read_file(ALLOMLM_FIXTURES "/corpus.audit.json"));
    auto c = fixture_corpus();
    auto r = audit(c);
    const auto& raw = golden["raw"];
    EXPECT_EQ(r.inscriptions, raw["inscriptions"].get<std::size_t>());
    EXPECT_EQ(r.tokens, raw["tokens"].get<std::size_t>());
    EXPECT_EQ(r.identifiable, raw["identifiable"].get<std::size_t>());
    EXPECT_EQ(r.unreadable, raw["unreadable"].get<std::size_t>());
    EXPECT_EQ(r.undeciphered, raw["undeciphered"].get<std::size_t>());

    auto prepared = deduplicate(filter_short(c, 2));
    auto p = audit(prepared.corpus);
    const auto& gp = golden["prepared_min_len_2"];
    EXPECT_EQ(p.inscriptions, gp["inscriptions"].get<std::size_t>());
    EXPECT_EQ(p.identifiable, gp["identifiable"].get<std::size_t>());
    EXPECT_EQ(p.unreadable, gp["unreadable"].get<std::size_t>());
    EXPECT_EQ(p.undeciphered, gp["undeciphered"].get<std::size_t>());
    EXPECT_EQ(prepared.log.size(), gp["duplicate_groups"].get<std::size_t>());
}

TEST(Audit, EmptyKindsAndProportions) {
    Corpus c;
    c.inscriptions = {make("a", "王公")};
    auto r = audit(c);
    EXPECT_EQ(r.unreadable, 0u);
    EXPECT_EQ(r.undeciphered, 0u);
    EXPECT_DOUBLE_EQ(r.proportion(TokenKind::Identifiable), 1.0);

    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        auto rc = audit(random_corpus(seed));
        const double sum = rc.proportion(TokenKind::Identifiable) + rc.proportion(TokenKind::Unreadable) +
                           rc.proportion(TokenKind::Undeciphered);
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(Audit, TableRendersCountsAtTwoDecimals) {
    TokenTypeReport r{17547, 39857, 39565, 236, 56};
    const auto table = render_table(r);
    EXPECT_NE(table.find("39,565"), std::string::npos);
    EXPECT_NE(table.find("99.27%"), std::string::npos);
    EXPECT_NE(table.find("0.59%"), std::string::npos);
    EXPECT_NE(table.find("0.14%"), std::string::npos);
}

TEST(Patch, AppliesAndChecksOldValue) {
    auto c = fixture_corpus();
    auto patches = parse_patches(io::read_file(ALLOMLM_FIXTURES "/corpus.patch.jsonl"));
    auto patched = apply_patches(c, patches);
    EXPECT_EQ(patched.inscriptions[0].provenance, "revised catalogue entry");
    // re-applying fails: old value no longer matches
    EXPECT_THROW(apply_patches(patched, patches), DataError);

    Corpus small;
    small.inscriptions = {make("a", "王公")};
    std::vector<Patch> text_fix{{"a", "text", "王公", "王□", "cite"}};
    auto fixed = apply_patches(small, text_fix);
    EXPECT_EQ(fixed.inscriptions[0].tokens[1], Token::unreadable());
    std::vector<Patch> bad_period{{"a", "period", "", "Late", "cite"}};
    EXPECT_THROW(apply_patches(small, bad_period), DataError);
    EXPECT_THROW(parse_patches(R"({"id":"a","field":"colour","old":"","new":"x"})"), DataError);
}
