#include <gtest/gtest.h>

#include <cmath>

#include "allomlm/encoder.hpp"
#include "gradcheck.hpp"

using namespace allomlm;

namespace {

EncoderConfig tiny_config() {
    EncoderConfig c;
    c.layers = 1;
    c.heads = 2;
    c.dim = 8;
    c.ff_dim = 16;
    c.max_seq_len = 6;
    return c;
}

Batch random_batch(std::size_t rows, std::size_t vocab, std::size_t max_len, Rng& rng) {
    std::vector<std::vector<std::int32_t>> seqs;
    for (std::size_t r = 0; r < rows; ++r) {
        const auto len = 3 + rng.below(max_len - 2);
        std::vector<std::int32_t> s{Vocabulary::kBos};
        for (std::size_t i = 0; i + 2 < len; ++i) {
            s.push_back(static_cast<std::int32_t>(5 + rng.below(vocab - 5)));
        }
        s.push_back(Vocabulary::kEos);
        seqs.push_back(s);
    }
    auto b = make_batch(seqs);
    for (std::size_t r = 0; r < rows; ++r) {
        const auto pos = 1 + rng.below(b.lengths[r] - 2);
        b.masked.push_back({r, pos});
        b.gold.push_back(b.tokens(r, pos));
        b.tokens(r, pos) = Vocabulary::kMask;
    }
    return b;
}

} // namespace

class GradientCheck : public ::testing::TestWithParam<std::tuple<gradcheck::Loss, bool>> {};

TEST_P(GradientCheck, AnalyticMatchesCentralDifferences) {
    const auto [loss, train] = GetParam();
    auto p = gradcheck::make_problem(3, train);
    const auto rep = gradcheck::check(p, loss);
    EXPECT_GT(rep.checked, 500u);
    EXPECT_GT(rep.max_abs_gradient, 1e-2);
    RecordProperty("max_rel_error", std::to_string(rep.max_rel_error));
    EXPECT_LE(rep.max_rel_error, 1e-4) << gradcheck::name(loss) << ": " << rep.worst;
}

INSTANTIATE_TEST_SUITE_P(AllLosses, GradientCheck,
                         ::testing::Combine(::testing::Values(gradcheck::Loss::Mlm, gradcheck::Loss::Gn,
                                                              gradcheck::Loss::Combined, gradcheck::Loss::Dynasty,
                                                              gradcheck::Loss::Period),
                                            ::testing::Bool()));

TEST(GradientCheck, MeanPoolingClassifier) {
    auto p = gradcheck::make_problem(8, false);
    auto cfg = p.model.config();
    cfg.pooling = Pooling::Mean;
    EncoderModel<double> mean_model(cfg, p.model.vocab_size());
    for (std::size_t i = 0; i < p.model.params().size(); ++i) {
        mean_model.set_values(i, p.model.params()[i].value);
    }
    p.model = mean_model;
    EXPECT_LE(gradcheck::check(p, gradcheck::Loss::Dynasty).max_rel_error, 1e-4);
}

TEST(EncoderModel, ParameterCountByHand) {
    EncoderModel<double> m(tiny_config(), 10);
    // tok 10*8, pos 6*8, block 2*8 + 4*(64+8) + 2*8 + (8*16+16) + (16*8+8),
    // top 2*8 + 10 + (8*4+4) + (8*3+3)
    const std::size_t block = 16 + 4 * 72 + 16 + 144 + 136;
    const std::size_t top = 16 + 10 + 36 + 27;
    EXPECT_EQ(m.parameter_count(), 80 + 48 + block + top);
}

TEST(EncoderModel, InitIsDeterministicPerSeed) {
    auto c = tiny_config();
    EncoderModel<double> a(c, 12), b(c, 12);
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        EXPECT_EQ(a.params()[i].value, b.params()[i].value);
    }
    c.seed = 43;
    EncoderModel<double> other(c, 12);
    EXPECT_NE(a.params()[0].value, other.params()[0].value);
}

TEST(EncoderModel, ConfigValidation) {
    auto c = tiny_config();
    c.heads = 3;
    EXPECT_THROW(EncoderModel<double>(c, 10), UsageError);
    c = tiny_config();
    c.hidden_dropout = 1.0;
    EXPECT_THROW(EncoderModel<double>(c, 10), UsageError);
    EXPECT_THROW(EncoderModel<double>(tiny_config(), 0), UsageError);
}

TEST(Forward, LogProbsNormalize) {
    Rng rng(21);
    auto c = tiny_config();
    c.init_std = 0.5;
    EncoderModel<double> m(c, 17);
    for (int trial = 0; trial < 100; ++trial) {
        auto b = random_batch(1 + rng.below(4), 17, 6, rng);
        auto out = forward_mlm(m, b, {true, static_cast<std::uint64_t>(trial)});
        ASSERT_EQ(out.log_probs.rows, b.masked.size());
        for (std::size_t r = 0; r < out.log_probs.rows; ++r) {
            double z = 0;
            for (auto v : out.log_probs.row(r)) {
                EXPECT_TRUE(std::isfinite(v));
                z += std::exp(v);
            }
            EXPECT_NEAR(z, 1.0, 1e-12);
        }
    }
}

TEST(Forward, SingleTokenVocabulary) {
    EncoderModel<double> m(tiny_config(), 1);
    std::vector<std::vector<std::int32_t>> seqs{{0, 0, 0}};
    auto b = make_batch(seqs);
    b.masked.push_back({0, 1});
    b.gold.push_back(0);
    auto out = forward_mlm(m, b);
    EXPECT_NEAR(out.log_probs(0, 0), 0.0, 1e-12);
}

TEST(Forward, FreshModelLossNearLogV) {
    Rng rng(4);
    auto c = tiny_config();
    c.dim = 16;
    c.heads = 4;
    c.ff_dim = 32;
    c.max_seq_len = 12;
    const std::size_t V = 60;
    EncoderModel<double> m(c, V);
    auto b = random_batch(16, V, 12, rng);
    auto out = forward_mlm(m, b);
    const double loss = mlm_loss(out.log_probs, b.gold);
    EXPECT_NEAR(loss, std::log(static_cast<double>(V)), 0.1 * std::log(static_cast<double>(V)));
}

TEST(Forward, PaddingAndBatchmatesDoNotLeak) {
    Rng rng(6);
    auto c = tiny_config();
    c.init_std = 0.4;
    EncoderModel<double> m(c, 15);
    std::vector<std::vector<std::int32_t>> seqs{{2, 7, 1, 3}, {2, 9, 10, 11, 1, 3}};
    auto b = make_batch(seqs);
    b.masked = {{0, 2}, {1, 4}};
    b.gold = {8, 12};
    auto base = forward_mlm(m, b);
    // garbage in the padded cells of row 0
    auto dirty = b;
    dirty.tokens(0, 4) = 13;
    dirty.tokens(0, 5) = 14;
    auto out = forward_mlm(m, dirty);
    EXPECT_EQ(out.log_probs.data, base.log_probs.data);
    // row 0 alone gives the same distribution
    std::vector<std::vector<std::int32_t>> only{seqs[0]};
    auto single = make_batch(only);
    single.masked = {{0, 2}};
    single.gold = {8};
    auto alone = forward_mlm(m, single);
    for (std::size_t c2 = 0; c2 < 15; ++c2) {
        EXPECT_NEAR(alone.log_probs(0, c2), base.log_probs(0, c2), 1e-14);
    }
    auto cls = forward_classify(m, dirty, Head::Dynasty);
    auto cls_base = forward_classify(m, b, Head::Dynasty);
    EXPECT_EQ(cls.log_probs.data, cls_base.log_probs.data);
}

TEST(Forward, EvalIsDeterministicAndTrainUsesDropout) {
    Rng rng(2);
    auto c = tiny_config();
    c.hidden_dropout = 0.3;
    EncoderModel<double> m(c, 15);
    auto b = random_batch(3, 15, 6, rng);
    EXPECT_EQ(forward_mlm(m, b).log_probs.data, forward_mlm(m, b).log_probs.data);
    const auto t1 = forward_mlm(m, b, {true, 1}).log_probs.data;
    EXPECT_EQ(t1, forward_mlm(m, b, {true, 1}).log_probs.data);
    EXPECT_NE(t1, forward_mlm(m, b, {true, 2}).log_probs.data);
    EXPECT_NE(t1, forward_mlm(m, b).log_probs.data);
}

TEST(Forward, HeadSizesAndLengthLimit) {
    Rng rng(1);
    EncoderModel<double> m(tiny_config(), 12);
    auto b = random_batch(2, 12, 6, rng);
    EXPECT_EQ(forward_classify(m, b, Head::Dynasty).log_probs.cols, 4u);
    EXPECT_EQ(forward_classify(m, b, Head::Period).log_probs.cols, 3u);
    std::vector<std::vector<std::int32_t>> long_seq{std::vector<std::int32_t>(7, 5)};
    auto lb = make_batch(long_seq);
    EXPECT_THROW(forward_mlm(m, lb), DataError);
    std::vector<std::vector<std::int32_t>> bad_id{{2, 99, 3}};
    EXPECT_THROW(forward_mlm(m, make_batch(bad_id)), DataError);
}

TEST(Backward, WithoutForwardThrows) {
    EncoderModel<double> m(tiny_config(), 10);
    Tape<double> empty;
    EXPECT_THROW(backward(m, empty, Matrix<double>(1, 10)), UsageError);
}

TEST(Backward, ZeroLossGradientGivesZeroGradients) {
    Rng rng(3);
    EncoderModel<double> m(tiny_config(), 12);
    auto b = random_batch(2, 12, 6, rng);
    auto out = forward_mlm(m, b);
    auto g = backward(m, out.tape, Matrix<double>(out.log_probs.rows, out.log_probs.cols));
    for (const auto& s : g.slots) {
        for (auto v : s) {
            EXPECT_EQ(v, 0.0);
        }
    }
}

TEST(Freezing, FrozenGroupsGetNoGradientOrUpdate) {
    auto p = gradcheck::make_problem(5, true);
    auto cfg = p.model.config();
    cfg.layers = 2;
    EncoderModel<double> m(cfg, 14);
    p.model = m;
    EXPECT_THROW(p.model.freeze_layers(3), UsageError);

    p.model.freeze_layers(0);
    Gradients<double> all;
    gradcheck::loss_value(p, gradcheck::Loss::Combined, &all);
    for (std::size_t i = 0; i < all.slots.size(); ++i) {
        EXPECT_TRUE(p.model.is_trainable(i));
    }

    p.model.freeze_layers(2);
    Gradients<double> g;
    gradcheck::loss_value(p, gradcheck::Loss::Combined, &g);
    const auto before = p.model.params();
    AdamW<double> opt;
    opt.step(p.model, g, 0.1, 0.01);
    for (std::size_t i = 0; i < before.size(); ++i) {
        const bool top = before[i].group == cfg.layers + 1;
        EXPECT_EQ(p.model.is_trainable(i), top) << before[i].name;
        if (!top) {
            for (auto v : g.slots[i]) {
                ASSERT_EQ(v, 0.0) << before[i].name;
            }
            EXPECT_EQ(p.model.params()[i].value, before[i].value) << before[i].name;
        }
    }
    // the MLM bias still learns
    EXPECT_NE(p.model.top(EncoderModel<double>::MlmBias).value, before[p.model.top_index(EncoderModel<double>::MlmBias)].value);

    // freezing only the lower layer leaves its gradient zero and the upper one live
    p.model.freeze_layers(1);
    Gradients<double> g1;
    gradcheck::loss_value(p, gradcheck::Loss::Mlm, &g1);
    double lower = 0, upper = 0;
    for (std::size_t i = 0; i < before.size(); ++i) {
        for (auto v : g1.slots[i]) {
            (before[i].group <= 1 ? lower : upper) += std::abs(v);
        }
    }
    EXPECT_EQ(lower, 0.0);
    EXPECT_GT(upper, 0.0);
}

TEST(AdamW, ZeroLearningRateIsIdentity) {
    auto p = gradcheck::make_problem(1, false);
    Gradients<double> g;
    gradcheck::loss_value(p, gradcheck::Loss::Mlm, &g);
    const auto before = p.model.params();
    AdamW<double> opt;
    opt.step(p.model, g, 0.0, 0.1);
    for (std::size_t i = 0; i < before.size(); ++i) {
        EXPECT_EQ(p.model.params()[i].value, before[i].value);
    }
}

TEST(AdamW, HandComputedSteps) {
    EncoderModel<double> m(tiny_config(), 10);
    const auto idx = m.top_index(EncoderModel<double>::MlmBias);
    std::vector<double> theta(10, 1.0);
    m.set_values(idx, theta);
    AdamW<double> opt;
    // quadratic 0.5*theta^2: gradient equals theta
    auto g = m.zero_gradients();
    g.slots[idx].assign(10, 1.0);
    opt.step(m, g, 0.1, 0.01);
    const double first = 1.0 - 0.1 * 0.01 * 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    EXPECT_NEAR(m.params()[idx].value[0], first, 1e-15);

    g.slots[idx].assign(10, first);
    opt.step(m, g, 0.1, 0.01);
    const double mm = 0.9 * 0.1 * 1.0 + 0.1 * first;
    const double vv = 0.999 * 0.001 * 1.0 + 0.001 * first * first;
    const double mhat = mm / (1 - 0.81);
    const double vhat = vv / (1 - 0.999 * 0.999);
    const double second = first - 0.1 * 0.01 * first - 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    EXPECT_NEAR(m.params()[idx].value[0], second, 1e-14);
    EXPECT_EQ(opt.steps(), 2u);
}

TEST(AdamW, DecayOnlyShrinksNorms) {
    EncoderModel<double> m(tiny_config(), 10);
    auto norm = [&](std::size_t i) {
        double s = 0;
        for (auto v : m.params()[i].value) {
            s += v * v;
        }
        return std::sqrt(s);
    };
    const double before = norm(0);
    AdamW<double> opt;
    opt.step(m, m.zero_gradients(), 0.1, 0.5);
    EXPECT_NEAR(norm(0), before * 0.95, 1e-12);
}

TEST(Float, SinglePrecisionForwardAgrees) {
    Rng rng(30);
    auto c = tiny_config();
    EncoderModel<double> md(c, 12);
    EncoderModel<float> mf(c, 12);
    for (std::size_t i = 0; i < md.params().size(); ++i) {
        std::vector<float> v(md.params()[i].value.begin(), md.params()[i].value.end());
        mf.set_values(i, v);
    }
    auto b = random_batch(3, 12, 6, rng);
    auto od = forward_mlm(md, b);
    auto of = forward_mlm(mf, b);
    for (std::size_t k = 0; k < od.log_probs.data.size(); ++k) {
        EXPECT_NEAR(of.log_probs.data[k], od.log_probs.data[k], 1e-4);
    }
}
