#include "dirmag/errors.hpp"
#include "dirmag/intervention.hpp"
#include "dirmag/metrics.hpp"
#include "dirmag/toy.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace dirmag;

namespace {

Tensor random_logits(std::size_t seq, std::size_t vocab, std::mt19937_64& rng, double scale = 3.0) {
    std::normal_distribution<double> n(0.0, scale);
    Tensor t({seq, vocab});
    for (float& v : t.data()) v = static_cast<float>(n(rng));
    return t;
}

std::vector<int> random_tokens(std::size_t seq, std::size_t vocab, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> u(0, static_cast<int>(vocab) - 1);
    std::vector<int> t(seq);
    for (int& x : t) x = u(rng);
    return t;
}

// [1 x seq x seq] with row t uniform over 0..t.
Tensor causal_uniform(std::size_t seq) {
    Tensor p({1, seq, seq});
    for (std::size_t q = 0; q < seq; ++q) {
        for (std::size_t k = 0; k <= q; ++k) p[q * seq + k] = 1.0f / static_cast<float>(q + 1);
    }
    return p;
}

} // namespace

TEST(Loss, UniformLogitsGiveLogVocab) {
    const Tensor logits = Tensor::zeros({5, 8});
    EXPECT_NEAR(next_token_loss(logits, std::vector<int>{0, 1, 2, 3, 4}), std::log(8.0), 1e-9);
}

TEST(Loss, PerfectPredictionIsNearZero) {
    const std::vector<int> tokens = {2, 0, 3, 1};
    Tensor logits = Tensor::zeros({4, 4});
    for (std::size_t t = 1; t < tokens.size(); ++t) logits(t - 1, static_cast<std::size_t>(tokens[t])) = 50.0f;
    EXPECT_LT(next_token_loss(logits, tokens), 1e-12);
}

TEST(Loss, MatchesDirectSummation) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor logits = random_logits(9, 13, rng);
        const auto tokens = random_tokens(9, 13, rng);
        long double total = 0.0L;
        for (std::size_t t = 1; t < tokens.size(); ++t) {
            long double z = 0.0L;
            for (std::size_t v = 0; v < 13; ++v) z += std::exp(static_cast<long double>(logits(t - 1, v)));
            total += std::log(z) - static_cast<long double>(logits(t - 1, static_cast<std::size_t>(tokens[t])));
        }
        EXPECT_NEAR(next_token_loss(logits, tokens), static_cast<double>(total / 8.0L), 1e-6);
    }
}

TEST(Loss, InvariantToPerRowShift) {
    // Logits on a 2^-10 grid and integer shifts keep the shifted float32
    // inputs exact, so any difference comes from the loss itself.
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> shift(-100, 100);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor logits = random_logits(7, 10, rng);
        for (float& v : logits.data()) v = std::round(v * 1024.0f) / 1024.0f;
        const auto tokens = random_tokens(7, 10, rng);
        const double base = next_token_loss(logits, tokens);
        for (std::size_t r = 0; r < logits.rows(); ++r) {
            const float c = static_cast<float>(shift(rng));
            for (float& v : logits.row(r)) v += c;
        }
        EXPECT_NEAR(next_token_loss(logits, tokens), base, 1e-6);
    }
}

TEST(Loss, ErrorsOnShortOrMismatchedInput) {
    EXPECT_THROW(next_token_loss(Tensor::zeros({1, 4}), std::vector<int>{1}), InputError);
    EXPECT_THROW(next_token_loss(Tensor::zeros({3, 4}), std::vector<int>{1, 2}), DimensionError);
    EXPECT_THROW(next_token_loss(Tensor::zeros({2, 4}), std::vector<int>{1, 9}), InputError);
}

TEST(Loss, SequenceLogprobModes) {
    std::mt19937_64 rng(5);
    const Tensor logits = random_logits(6, 7, rng);
    const auto tokens = random_tokens(6, 7, rng);
    const auto lp = token_logprobs(logits, tokens);
    ASSERT_EQ(lp.size(), 5u);
    double s = 0.0;
    for (double x : lp) s += x;
    EXPECT_NEAR(sequence_logprob(logits, tokens, ScoreMode::sum), s, 1e-12);
    EXPECT_NEAR(sequence_logprob(logits, tokens, ScoreMode::mean), s / 5.0, 1e-12);
    EXPECT_NEAR(next_token_loss(logits, tokens), -s / 5.0, 1e-12);
}

TEST(Entropy, OneHotRowsAreZero) {
    Tensor p({2, 4, 4});
    for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t q = 0; q < 4; ++q) p[h * 16 + q * 4 + (q + h) / 2] = 1.0f;
    }
    EXPECT_EQ(attention_entropy(p), 0.0);
}

// Row n-1 uniform over n keys, earlier rows one-hot: mean entropy is ln(n) / n.
static Tensor last_row_uniform(std::size_t n) {
    Tensor p({1, n, n});
    for (std::size_t q = 0; q + 1 < n; ++q) p[q * n] = 1.0f;
    for (std::size_t k = 0; k < n; ++k) p[(n - 1) * n + k] = 1.0f / static_cast<float>(n);
    return p;
}

TEST(Entropy, UniformOverNIsLogN) {
    // Powers of two keep 1/n exact in float32.
    for (std::size_t n : {2u, 4u, 8u, 16u}) {
        EXPECT_NEAR(attention_entropy(last_row_uniform(n)) * static_cast<double>(n),
                    std::log(static_cast<double>(n)), 1e-9) << n;
    }
    for (std::size_t n : {3u, 5u, 7u}) {
        EXPECT_NEAR(attention_entropy(last_row_uniform(n)) * static_cast<double>(n),
                    std::log(static_cast<double>(n)), 1e-6) << n;
    }
}

TEST(Entropy, CausalUniformAveragesLogOfSupport) {
    double expected = 0.0;
    for (int q = 1; q <= 4; ++q) expected += std::log(static_cast<double>(q));
    EXPECT_NEAR(attention_entropy(causal_uniform(4)), expected / 4.0, 1e-6);
    EXPECT_THROW(attention_entropy(Tensor({1, 1, 4})), DimensionError);
}

TEST(Entropy, TwoWaySplitIsLog2) {
    const Tensor p({1, 2, 2}, {1.0f, 0.0f, 0.5f, 0.5f});
    EXPECT_NEAR(attention_entropy(p) * 2.0, std::log(2.0), 1e-9);
}

TEST(Entropy, BoundedByLogSeqOnModelAttention) {
    std::mt19937_64 rng(6);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Model m = testutil::tiny_random_model(seed, NormType::layernorm, ResidualTopology::parallel);
        const auto tokens = random_tokens(9, m.config.vocab_size, rng);
        const auto fr = forward(m, tokens, {}, {Site::attn_probs});
        for (std::size_t l = 0; l < m.config.n_layers; ++l) {
            const double h = attention_entropy(fr.trace.at(l, Site::attn_probs));
            EXPECT_GE(h, 0.0);
            EXPECT_LE(h, std::log(9.0));
        }
    }
}

TEST(Entropy, RowsNotSummingToOneAreRejected) {
    const Tensor p({1, 2, 2}, {1.0f, 0.0f, 0.5f, 0.4f});
    EXPECT_THROW(attention_entropy(p), InputError);
}

TEST(Pairs, OneWinEachIsHalf) {
    const std::vector<PairScore> s = {{-10.0, -12.0}, {-8.0, -7.0}};
    EXPECT_EQ(pair_accuracy(s), 0.5);
}

TEST(Pairs, TiesLose) {
    const std::vector<PairScore> s = {{-3.0, -3.0}};
    EXPECT_EQ(pair_accuracy(s), 0.0);
    const Model m = testutil::tiny_random_model(1, NormType::layernorm, ResidualTopology::parallel);
    const std::vector<MinimalPair> same = {{{1, 2, 3}, {1, 2, 3}}};
    EXPECT_EQ(minimal_pair_accuracy(m, same, nullptr, 0), 0.0);
}

TEST(Pairs, EmptyInputIsError) {
    EXPECT_THROW(pair_accuracy(std::vector<PairScore>{}), InputError);
    const Model m = testutil::tiny_random_model(1, NormType::layernorm, ResidualTopology::parallel);
    EXPECT_THROW(minimal_pair_accuracy(m, std::vector<MinimalPair>{}, nullptr, 0), InputError);
}

TEST(Pairs, AgreementToyOrdersEveryPair) {
    const AgreementToy toy = agreement_toy();
    ASSERT_FALSE(toy.pairs.empty());
    EXPECT_EQ(minimal_pair_accuracy(toy.model, toy.pairs, nullptr, 0, ScoreMode::sum), 1.0);
    EXPECT_EQ(minimal_pair_accuracy(toy.model, toy.pairs, nullptr, 0, ScoreMode::mean), 1.0);
    for (const auto& s : score_pairs(toy.model, toy.pairs, nullptr, 0)) EXPECT_GT(s.good, s.bad);
}

TEST(Pairs, SampledPairsStartAtFullAccuracy) {
    const Model m = random_toy_model(desk_config(), 7);
    const auto pairs = minimal_pairs(sample_pairs(m, 10, 6, 3));
    EXPECT_EQ(minimal_pair_accuracy(m, pairs, nullptr, 0), 1.0);
}

TEST(Pairs, UnperturbedAccuracyIsDeterministic) {
    const Model m = random_toy_model(desk_config(), 7);
    const auto pairs = minimal_pairs(toy_pairs(12, 6, 64, 9));
    const auto a = score_pairs(m, pairs, nullptr, 0);
    const auto b = score_pairs(m, pairs, nullptr, 0);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].good, b[i].good);
        EXPECT_EQ(a[i].bad, b[i].bad);
    }
    EXPECT_EQ(minimal_pair_accuracy(m, pairs, nullptr, 0), minimal_pair_accuracy(m, pairs, nullptr, 0));
}

TEST(Pairs, PerturbedScoringIsSeedDeterministic) {
    const Model m = random_toy_model(desk_config(), 7);
    const auto pairs = minimal_pairs(sample_pairs(m, 8, 6, 4));
    InterventionPlan plan;
    plan.perturb.kind = PerturbationKind::angular;
    plan.perturb.delta = 20.0;
    plan.perturb_layers = {0, 1};
    const auto a = score_pairs(m, pairs, &plan, 5);
    const auto b = score_pairs(m, pairs, &plan, 5);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].good, b[i].good);
}

TEST(Pairs, NonPairRecordIsError) {
    TokenizedDataset ds;
    DatasetRecord r;
    r.id = "x";
    r.tokens = {1, 2};
    ds.records.push_back(r);
    EXPECT_THROW(minimal_pairs(ds), InputError);
}

TEST(Propagation, IdenticalTracesGiveZeros) {
    const Model m = testutil::tiny_random_model(2, NormType::layernorm, ResidualTopology::parallel);
    const auto fr = forward(m, std::vector<int>{1, 2, 3, 4}, {}, {Site::resid_post});
    const auto prof = propagation_profile(fr.trace, fr.trace);
    ASSERT_EQ(prof.size(), m.config.n_layers);
    for (const auto& [l, v] : prof) EXPECT_EQ(v, 0.0);
}

TEST(Propagation, FirstInterventionLayerShowsDelta) {
    const Model m = random_toy_model(desk_config(), 7);
    const std::vector<int> tokens = sample_corpus(m, 1, 12, 12, 2, false).records[0].tokens;
    for (auto kind : {PerturbationKind::angular, PerturbationKind::magnitude}) {
        InterventionPlan plan;
        plan.perturb.kind = kind;
        plan.perturb.delta = 5.0;
        plan.perturb_layers = {0};
        const auto clean = forward(m, tokens, {}, {Site::resid_pre, Site::resid_post});
        const auto pert = forward_with_plan(m, tokens, &plan, 3, {Site::resid_pre, Site::resid_post});
        const auto at_pre = propagation_profile(clean.trace, pert.trace, Site::resid_pre);
        EXPECT_NEAR(at_pre.at(0), 5.0, 0.01);
        const auto at_post = propagation_profile(clean.trace, pert.trace);
        for (const auto& [l, v] : at_post) EXPECT_GT(v, 0.0) << l;
    }
}

TEST(Propagation, ShapeMismatchIsError) {
    const Model m = testutil::tiny_random_model(2, NormType::layernorm, ResidualTopology::parallel);
    const auto a = forward(m, std::vector<int>{1, 2, 3}, {}, {Site::resid_post});
    const auto b = forward(m, std::vector<int>{1, 2, 3, 4}, {}, {Site::resid_post});
    EXPECT_THROW(propagation_profile(a.trace, b.trace), InputError);
    ForwardTrace shallow = a.trace;
    shallow.layers.pop_back();
    EXPECT_THROW(propagation_profile(a.trace, shallow), InputError);
}

TEST(Pearson, PerfectLinearAndAntiLinear) {
    const std::vector<double> x = {1, 2, 3, 4, 5, 6};
    std::vector<double> up, down;
    for (double v : x) {
        up.push_back(2.0 * v);
        down.push_back(-v);
    }
    EXPECT_NEAR(pearson_r(x, up).r, 1.0, 1e-12);
    EXPECT_NEAR(pearson_r(x, down).r, -1.0, 1e-12);
    EXPECT_NEAR(pearson_r(x, up).p, 0.0, 1e-12);
}

TEST(Pearson, HandComputedHalf) {
    const Correlation c = pearson_r(std::vector<double>{1, 2, 3}, std::vector<double>{1, 3, 2});
    EXPECT_NEAR(c.r, 0.5, 1e-12);
    EXPECT_EQ(c.n, 3u);
    // t = r sqrt(1) / sqrt(0.75); two-sided p with 1 df is 1 - 2 atan(t) / pi.
    const double t = 0.5 / std::sqrt(0.75);
    EXPECT_NEAR(c.p, 1.0 - 2.0 * std::atan(t) / M_PI, 1e-9);
}

TEST(Pearson, InvariantToPositiveAffineMaps) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> a(0.1, 10.0), b(-50.0, 50.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> x(20), y(20);
        for (std::size_t i = 0; i < 20; ++i) {
            x[i] = n(rng);
            y[i] = 0.3 * x[i] + n(rng);
        }
        const double r = pearson_r(x, y).r;
        const double sa = a(rng), sb = b(rng);
        std::vector<double> x2(x), y2(y);
        for (double& v : x2) v = sa * v + sb;
        for (double& v : y2) v = 0.5 * sa * v - sb;
        EXPECT_NEAR(pearson_r(x2, y).r, r, 1e-9);
        EXPECT_NEAR(pearson_r(x, y2).r, r, 1e-9);
    }
}

TEST(Pearson, DegenerateInputsAreErrors) {
    EXPECT_THROW(pearson_r(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), DegenerateInputError);
    EXPECT_THROW(pearson_r(std::vector<double>{1, 2}, std::vector<double>{1, 2}), InputError);
    EXPECT_THROW(pearson_r(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}), InputError);
}
