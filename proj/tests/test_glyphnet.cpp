#include <gtest/gtest.h>

#include <map>
#include <queue>
#include <set>

#include "allomlm/corpus.hpp"
#include "allomlm/glyphnet.hpp"
#include "allomlm/io.hpp"
#include "allomlm/rng.hpp"
#include "oracles.hpp"

using namespace allomlm;
using oracles::bfs_components;

namespace {

Vocabulary vocab_of(std::initializer_list<const char*> glyphs) {
    std::vector<std::string> g(glyphs.begin(), glyphs.end());
    return Vocabulary({}, g);
}

AllographPair pair(const char* a, const char* b) { return {Token::identifiable(a), Token::identifiable(b), {}, ""}; }

struct FixtureNet {
    PairFile file;
    Vocabulary vocab;
    GlyphNet net;
    std::vector<std::pair<std::int32_t, std::int32_t>> edges;
};

FixtureNet fixture_net() {
    FixtureNet f;
    f.file = parse_pairs(io::read_file(ALLOMLM_FIXTURES "/pairs.tsv"));
    auto corpus = parse_corpus(io::read_file(ALLOMLM_FIXTURES "/corpus.jsonl"));
    std::vector<Corpus> cs{corpus};
    auto extra = pair_tokens(f.file.pairs);
    auto loans = pair_tokens(f.file.loans);
    extra.insert(extra.end(), loans.begin(), loans.end());
    f.vocab = build_vocab(cs, extra);
    f.net = build_families(f.file.pairs, f.vocab);
    for (const auto& p : f.file.pairs) {
        f.edges.emplace_back(f.vocab.at(p.a), f.vocab.at(p.b));
    }
    return f;
}

} // namespace

TEST(BuildFamilies, ChainClosure) {
    auto v = vocab_of({"A", "B", "C", "D"});
    std::vector<AllographPair> pairs{pair("A", "B"), pair("B", "C")};
    auto net = build_families(pairs, v);
    const auto a = v.at(Token::identifiable("A"));
    const auto c = v.at(Token::identifiable("C"));
    const auto d = v.at(Token::identifiable("D"));
    EXPECT_EQ(net.family_of(a), net.family_of(c));
    EXPECT_EQ(net.members(net.family_of(a)).size(), 3u);
    EXPECT_EQ(net.family_of(a), a);  // smallest member is canonical
    EXPECT_EQ(net.family_of(d), d);
    EXPECT_TRUE(net.is_glyph_token(c));
    EXPECT_FALSE(net.is_glyph_token(d));
}

TEST(BuildFamilies, EmptyPairsGiveSingletons) {
    auto v = vocab_of({"A", "B", "C"});
    auto net = build_families({}, v);
    EXPECT_EQ(net.families().size(), v.size());
    EXPECT_EQ(net.glyph_token_count(), 0u);
}

TEST(BuildFamilies, UnknownEndpointIsAnError) {
    auto v = vocab_of({"A"});
    std::vector<AllographPair> pairs{pair("A", "Z")};
    EXPECT_THROW(build_families(pairs, v), DataError);
    EXPECT_THROW(GlyphNet::from_index_pairs(std::vector<std::pair<std::int32_t, std::int32_t>>{{0, 9}}, 3), DataError);
}

TEST(BuildFamilies, FixtureMatchesBruteForceComponents) {
    auto f = fixture_net();
    ASSERT_GE(f.file.pairs.size(), 200u);
    auto oracle = bfs_components(f.edges, f.vocab.size());
    EXPECT_EQ(f.net.assignment(), oracle);

    // histogram of family sizes agrees too
    std::map<std::int32_t, std::size_t> size_of;
    for (auto l : oracle) {
        ++size_of[l];
    }
    for (auto [fam, size] : size_of) {
        EXPECT_EQ(f.net.members(fam).size(), size);
    }
}

TEST(BuildFamilies, FixtureHasLongChains) {
    auto f = fixture_net();
    std::size_t largest = 0;
    for (auto fam : f.net.multi_member_families()) {
        largest = std::max(largest, f.net.members(fam).size());
    }
    EXPECT_GE(largest, 5u);
}

TEST(BuildFamilies, LoansAreNotMerged) {
    auto f = fixture_net();
    ASSERT_EQ(f.file.loans.size(), 2u);
    for (const auto& p : f.file.loans) {
        EXPECT_NE(f.net.family_of(f.vocab.at(p.a)), f.net.family_of(f.vocab.at(p.b)));
    }
}

TEST(FamilyOf, EveryInputPairShareAFamily) {
    auto f = fixture_net();
    for (auto [a, b] : f.edges) {
        EXPECT_EQ(f.net.family_of(a), f.net.family_of(b));
    }
    EXPECT_THROW(f.net.family_of(static_cast<std::int32_t>(f.vocab.size())), DataError);
}

TEST(IsGlyphToken, CountEqualsMultiMemberFamilySizes) {
    auto f = fixture_net();
    std::size_t recount = 0;
    for (auto fam : f.net.families()) {
        const auto n = f.net.members(fam).size();
        if (n >= 2) {
            recount += n;
        }
    }
    EXPECT_EQ(f.net.glyph_token_count(), recount);
    for (std::int32_t t = 0; t < static_cast<std::int32_t>(f.vocab.size()); ++t) {
        EXPECT_EQ(f.net.is_glyph_token(t), f.net.members(f.net.family_of(t)).size() >= 2);
    }
}

TEST(GlyphNetProperties, IdempotentAndOrderInvariant) {
    auto f = fixture_net();
    auto again = GlyphNet::from_index_pairs(f.net.implied_pairs(), f.vocab.size());
    EXPECT_EQ(again, f.net);

    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        auto shuffled = f.file.pairs;
        rng.shuffle(shuffled.begin(), shuffled.end());
        for (auto& p : shuffled) {
            if (rng.bernoulli(0.5)) {
                std::swap(p.a, p.b);
            }
        }
        EXPECT_EQ(build_families(shuffled, f.vocab), f.net);
    }
}

TEST(ParsePairs, FormatAndErrors) {
    auto pf = parse_pairs("# comment\n王\t玊\tWesternZhou\tsrc\n\n公\t厶\n");
    ASSERT_EQ(pf.pairs.size(), 2u);
    EXPECT_EQ(pf.pairs[0].era, Era::WesternZhou);
    EXPECT_EQ(pf.pairs[0].source, "src");
    EXPECT_FALSE(pf.pairs[1].era);
    EXPECT_THROW(parse_pairs("王\t王\n"), DataError);
    EXPECT_THROW(parse_pairs("王\n"), DataError);
    EXPECT_THROW(parse_pairs("王\t玊\tMing\n"), DataError);
}

TEST(Centroids, SingletonsExcludedAndMeans) {
    auto v = vocab_of({"A", "B", "C"});
    std::vector<AllographPair> pairs{pair("A", "B")};
    auto net = build_families(pairs, v);
    Matrix<double> emb(v.size(), 2);
    const auto a = static_cast<std::size_t>(v.at(Token::identifiable("A")));
    const auto b = static_cast<std::size_t>(v.at(Token::identifiable("B")));
    emb(a, 0) = 1.5;
    emb(a, 1) = -2.0;
    emb(b, 0) = 1.5;
    emb(b, 1) = -2.0;
    auto cents = compute_centroids(net, emb);
    ASSERT_EQ(cents.size(), 1u);
    EXPECT_EQ(cents[0].members, 2u);
    EXPECT_EQ(cents[0].centroid, (std::vector<double>{1.5, -2.0}));
}

TEST(Centroids, RandomFamilyMatchesIndependentMean) {
    std::vector<std::pair<std::int32_t, std::int32_t>> links{{1, 2}, {2, 3}, {3, 4}, {4, 5}};
    auto net = GlyphNet::from_index_pairs(links, 8);
    Rng rng(3);
    Matrix<double> emb(8, 6);
    for (auto& x : emb.data) {
        x = rng.normal();
    }
    auto cents = compute_centroids(net, emb);
    ASSERT_EQ(cents.size(), 1u);
    for (std::size_t d = 0; d < 6; ++d) {
        const double mean = (emb(1, d) + emb(2, d) + emb(3, d) + emb(4, d) + emb(5, d)) / 5.0;
        EXPECT_NEAR(cents[0].centroid[d], mean, 1e-12);
    }
}

TEST(Align, ExactOrthogonalAndBruteForce) {
    std::vector<FamilyCentroid> cents{{10, {1.0, 0.0, 0.0}, 2}, {20, {0.0, 1.0, 0.0}, 3}};
    std::vector<double> same{1.0, 0.0, 0.0};
    EXPECT_EQ(align_new_glyph(cents, same, 0.9), 10);
    std::vector<double> ortho{0.0, 0.0, 1.0};
    EXPECT_FALSE(align_new_glyph(cents, ortho, 0.5));
    EXPECT_TRUE(align_new_glyph(cents, ortho, -1.0).has_value());
    std::vector<double> wrong_dim{1.0};
    EXPECT_THROW(align_new_glyph(cents, wrong_dim, 0.0), UsageError);

    Rng rng(11);
    std::vector<FamilyCentroid> four;
    for (int f = 0; f < 4; ++f) {
        FamilyCentroid c{f * 3, std::vector<double>(5), 2};
        for (auto& x : c.centroid) {
            x = rng.normal();
        }
        four.push_back(c);
    }
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> vec(5);
        for (auto& x : vec) {
            x = rng.normal();
        }
        // exhaustive scan
        double best = -2.0;
        FamilyId arg = -1;
        for (const auto& c : four) {
            double dot = 0, na = 0, nb = 0;
            for (std::size_t i = 0; i < 5; ++i) {
                dot += c.centroid[i] * vec[i];
                na += c.centroid[i] * c.centroid[i];
                nb += vec[i] * vec[i];
            }
            const double cs = dot / std::sqrt(na * nb);
            if (cs > best) {
                best = cs;
                arg = c.family;
            }
        }
        auto got = align_new_glyph(four, vec, -1.0);
        ASSERT_TRUE(got);
        EXPECT_EQ(*got, arg);
        EXPECT_EQ(align_new_glyph(four, vec, best + 1e-9), std::nullopt);
    }
}

TEST(Align, TiesGoToSmallestFamily) {
    std::vector<FamilyCentroid> cents{{7, {1.0, 0.0}, 2}, {3, {2.0, 0.0}, 2}};
    std::vector<double> v{1.0, 0.0};
    EXPECT_EQ(align_new_glyph(cents, v, 0.0), 3);
}
