#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "allomlm/masking.hpp"

using namespace allomlm;

namespace {

std::vector<Token> glyph_run(std::size_t n) {
    std::vector<Token> t;
    for (std::size_t i = 0; i < n; ++i) {
        t.push_back(Token::identifiable("g" + std::to_string(i)));
    }
    return t;
}

/// 100 glyph vocabulary entries; the first 30 are paired into families.
struct Pool {
    Vocabulary vocab;
    GlyphNet net;
    std::vector<std::int32_t> ids;

    Pool() {
        std::vector<std::string> glyphs;
        for (int i = 0; i < 100; ++i) {
            glyphs.push_back(std::string(1, static_cast<char>('A' + i / 26)) + std::string(1, static_cast<char>('a' + i % 26)));
        }
        vocab = Vocabulary({}, glyphs);
        std::vector<std::pair<std::int32_t, std::int32_t>> links;
        for (std::int32_t i = 0; i < 30; i += 2) {
            links.emplace_back(vocab.first_glyph() + i, vocab.first_glyph() + i + 1);
        }
        net = GlyphNet::from_index_pairs(links, vocab.size());
        for (std::int32_t i = 0; i < 100; ++i) {
            ids.push_back(vocab.first_glyph() + i);
        }
    }
};

} // namespace

TEST(StrideCandidates, ShortSequenceKeepsOneCandidate) {
    EXPECT_EQ(stride_candidates(glyph_run(3), 10).size(), 1u);
    EXPECT_EQ(stride_candidates(glyph_run(20), 10), (std::vector<std::size_t>{0, 10}));
    std::vector<Token> damaged(5, Token::unreadable());
    damaged.push_back(Token::undeciphered(1));
    EXPECT_TRUE(stride_candidates(damaged, 1).empty());
    EXPECT_THROW(stride_candidates(glyph_run(3), 0), UsageError);
}

TEST(StrideCandidates, AtMostOneForAnyOffsetWhenShort) {
    Pool pool;
    for (std::size_t len = 1; len <= 10; ++len) {
        std::span<const std::int32_t> ids(pool.ids.data(), len);
        for (std::size_t off = 0; off < len; ++off) {
            EXPECT_LE(stride_candidates(ids, pool.vocab, 10, off).size(), 1u);
        }
    }
}

TEST(GlyphBias, ClosedForm) {
    Pool pool;
    // candidate 0 is a glyph-family token, candidate 40 is not
    std::vector<std::size_t> cands{0, 40};
    auto p = glyph_bias_weights(pool.ids, cands, pool.net, 3.0);
    EXPECT_DOUBLE_EQ(p[0], 0.75);
    EXPECT_DOUBLE_EQ(p[1], 0.25);
    auto u = glyph_bias_weights(pool.ids, cands, pool.net, 1.0);
    EXPECT_DOUBLE_EQ(u[0], 0.5);
    EXPECT_DOUBLE_EQ(u[1], 0.5);
    EXPECT_THROW(glyph_bias_weights(pool.ids, {}, pool.net, 2.0), UsageError);
}

TEST(GlyphBias, MonteCarloAgreesWithClosedForm) {
    Pool pool;
    MaskConfig cfg;
    cfg.stride = 1;
    cfg.mlm_prob = 0.001;  // one position per plan
    cfg.mode = MaskMode::GlyphBiased;
    cfg.bias = 2.0;
    const std::size_t draws = 1'000'000;
    std::vector<std::size_t> hits(100, 0);
    for (std::size_t i = 0; i < draws; ++i) {
        auto plan = sample_mask_plan(pool.ids, pool.vocab, cfg, pool.net, derive_seed(99, {i}));
        ASSERT_EQ(plan.positions.size(), 1u);
        ++hits[plan.positions[0]];
    }
    const double z = 30 * 2.0 + 70;
    for (std::size_t i = 0; i < 100; ++i) {
        const double p = (i < 30 ? 2.0 : 1.0) / z;
        const double sigma = std::sqrt(static_cast<double>(draws) * p * (1 - p));
        EXPECT_LE(std::abs(static_cast<double>(hits[i]) - static_cast<double>(draws) * p), 3.0 * sigma) << i;
    }
}

TEST(SampleMaskPlan, CountsAndDeterminism) {
    Pool pool;
    MaskConfig cfg;
    cfg.stride = 1;
    cfg.mlm_prob = 0.2;
    std::span<const std::int32_t> ten(pool.ids.data() + 40, 10);
    auto plan = sample_mask_plan(ten, pool.vocab, cfg, pool.net, 5);
    EXPECT_EQ(plan.positions.size(), 2u);
    auto again = sample_mask_plan(ten, pool.vocab, cfg, pool.net, 5);
    EXPECT_EQ(plan.positions, again.positions);
    EXPECT_EQ(plan.gold, again.gold);

    std::span<const std::int32_t> one(pool.ids.data(), 1);
    cfg.mode = MaskMode::GlyphBiased;
    auto single = sample_mask_plan(one, pool.vocab, cfg, pool.net, 1);
    EXPECT_EQ(single.positions, std::vector<std::size_t>{0});
    EXPECT_EQ(single.gold[0], pool.ids[0]);

    std::vector<std::int32_t> damaged{Vocabulary::kUnreadable, Vocabulary::kUnreadable};
    EXPECT_THROW(sample_mask_plan(damaged, pool.vocab, cfg, pool.net, 1), UsageError);
}

TEST(SampleMaskPlan, Invariants) {
    Pool pool;
    MaskConfig cfg;
    cfg.stride = 3;
    cfg.mlm_prob = 0.5;
    cfg.mode = MaskMode::GlyphBiased;
    cfg.bias = 4.0;
    Rng rng(1);
    for (std::uint64_t seed = 0; seed < 500; ++seed) {
        const auto len = 1 + rng.below(40);
        std::vector<std::int32_t> ids;
        for (std::size_t i = 0; i < len; ++i) {
            ids.push_back(pool.ids[rng.below(100)]);
        }
        auto plan = sample_mask_plan(ids, pool.vocab, cfg, pool.net, seed);
        std::set<std::size_t> distinct(plan.positions.begin(), plan.positions.end());
        EXPECT_EQ(distinct.size(), plan.positions.size());
        EXPECT_TRUE(std::is_sorted(plan.positions.begin(), plan.positions.end()));
        if (len <= cfg.stride) {
            EXPECT_LE(plan.positions.size(), 1u);
        }
        for (std::size_t k = 0; k < plan.positions.size(); ++k) {
            EXPECT_EQ(plan.gold[k], ids[plan.positions[k]]);
            EXPECT_NE(plan.gold[k], Vocabulary::kMask);
        }
        double sum = 0;
        for (double p : plan.probabilities) {
            sum += p;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
    }
}

TEST(SampleMaskPlan, UnitBiasEqualsUniform) {
    Pool pool;
    MaskConfig uni;
    uni.stride = 2;
    uni.mlm_prob = 0.3;
    MaskConfig biased = uni;
    biased.mode = MaskMode::GlyphBiased;
    biased.bias = 1.0;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        auto a = sample_mask_plan(pool.ids, pool.vocab, uni, pool.net, seed);
        auto b = sample_mask_plan(pool.ids, pool.vocab, biased, pool.net, seed);
        EXPECT_EQ(a.positions, b.positions);
        EXPECT_EQ(a.probabilities, b.probabilities);
    }
}

TEST(SampleMaskPlan, InvariantUnderRelabelingNonGlyphTokens) {
    Pool pool;
    MaskConfig cfg;
    cfg.stride = 1;
    cfg.mlm_prob = 0.25;
    cfg.mode = MaskMode::GlyphBiased;
    cfg.bias = 3.0;
    auto relabeled = pool.ids;
    for (std::size_t i = 30; i < 100; ++i) {
        relabeled[i] = pool.ids[30 + (i - 30 + 17) % 70];  // permute the non-glyph tokens
    }
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto a = sample_mask_plan(pool.ids, pool.vocab, cfg, pool.net, seed);
        auto b = sample_mask_plan(relabeled, pool.vocab, cfg, pool.net, seed);
        EXPECT_EQ(a.positions, b.positions);
    }
}

TEST(MaskConfig, Validation) {
    MaskConfig c;
    c.bias = 0.5;
    EXPECT_THROW(c.validate(), UsageError);
    c = MaskConfig{};
    c.mlm_prob = 0.0;
    EXPECT_THROW(c.validate(), UsageError);
    c = MaskConfig{};
    c.stride = 0;
    EXPECT_THROW(c.validate(), UsageError);
}
