#include "dirmag/errors.hpp"
#include "dirmag/metrics.hpp"
#include "dirmag/model.hpp"
#include "dirmag/toy.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace dirmag;

namespace {

const CaptureSet kAllSites = {Site::resid_pre, Site::attn_probs, Site::attn_out,
                              Site::norm1_out, Site::norm2_out, Site::resid_post};

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> u(0, static_cast<int>(vocab) - 1);
    std::vector<int> t(n);
    for (int& x : t) x = u(rng);
    return t;
}

} // namespace

TEST(ModelConfig, RejectsHeadsNotDividingWidth) {
    ModelConfig c;
    c.d_model = 6;
    c.n_heads = 4;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, RejectsOddRotaryDims) {
    ModelConfig c;
    c.d_model = 8;
    c.n_heads = 1;
    c.rotary_fraction = 0.125;  // 1 of 8 dims
    EXPECT_THROW(c.validate(), ConfigError);
    c.rotary_fraction = 0.25;
    EXPECT_NO_THROW(c.validate());
}

TEST(ModelWeights, MissingOrMisshapenTensorRejected) {
    const Model good = zero_toy_model(desk_config());
    ModelWeights missing = good.weights;
    std::map<std::string, Tensor> t = missing.tensors();
    t.erase(param::unembed);
    EXPECT_THROW(Model(good.config, ModelWeights(t)), InputError);

    ModelWeights wrong = good.weights;
    wrong.set(param::unembed, Tensor({3, 3}));
    EXPECT_THROW(Model(good.config, wrong), DimensionError);
}

TEST(ForwardOracle, LogitsMatchIndependentComputation) {
    const Model m = testutil::oracle_model();
    const auto r = forward(m, testutil::oracle_tokens());
    const auto& expect = testutil::oracle_logits();
    ASSERT_EQ(r.logits.rows(), expect.size());
    for (std::size_t t = 0; t < expect.size(); ++t) {
        for (std::size_t v = 0; v < expect[t].size(); ++v) EXPECT_NEAR(r.logits(t, v), expect[t][v], 1e-4);
    }
}

TEST(ForwardOracle, AttentionProbabilitiesMatchHandSoftmax) {
    const Model m = testutil::oracle_model();
    const auto r = forward(m, testutil::oracle_tokens(), {}, {Site::attn_probs});
    const Tensor& p = r.trace.at(0, Site::attn_probs);
    const auto& expect = testutil::oracle_probs();
    for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(p[t * 3 + j], expect[t][j], 1e-6);
    }
}

TEST(Forward, ZeroWeightsGiveUniformLogits) {
    const Model m = zero_toy_model(desk_config());
    const std::vector<int> tokens = {1, 5, 9, 2, 40};
    const auto r = forward(m, tokens);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        for (float v : r.logits.row(t)) EXPECT_EQ(v, r.logits(t, 0));
    }
    EXPECT_NEAR(next_token_loss(r.logits, tokens), std::log(64.0), 1e-6);
}

TEST(Forward, RejectsUnknownTokenAndOverlongInput) {
    const Model m = testutil::tiny_random_model(1);
    EXPECT_THROW(forward(m, std::vector<int>{0, 11}), InputError);
    EXPECT_THROW(forward(m, std::vector<int>{-1}), InputError);
    EXPECT_THROW(forward(m, std::vector<int>(17, 0)), InputError);
    EXPECT_THROW(forward(m, std::vector<int>{}), InputError);
}

TEST(Forward, HookReturningWrongShapeThrows) {
    const Model m = testutil::tiny_random_model(2);
    HookSet hooks = {{0, Site::resid_pre, [](Tensor, const HookContext&) { return Tensor({1, 1}); }}};
    EXPECT_THROW(forward(m, std::vector<int>{1, 2}, hooks), InterventionError);
    HookSet out_of_range = {{5, Site::resid_pre, [](Tensor t, const HookContext&) { return t; }}};
    EXPECT_THROW(forward(m, std::vector<int>{1, 2}, out_of_range), InterventionError);
}

TEST(Forward, IdentityHooksAreBitIdentical) {
    const Model m = testutil::tiny_random_model(3);
    const std::vector<int> tokens = {4, 1, 7, 7, 0, 10};
    const auto plain = forward(m, tokens);
    HookSet hooks;
    for (std::size_t l = 0; l < m.config.n_layers; ++l) {
        for (Site s : kAllSites) hooks.push_back({l, s, [](Tensor t, const HookContext&) { return t; }});
    }
    hooks.push_back({0, Site::final_logits, [](Tensor t, const HookContext&) { return t; }});
    const auto hooked = forward(m, tokens, hooks);
    EXPECT_EQ(plain.logits, hooked.logits);
}

TEST(Forward, HookContextReportsSiteAndTokens) {
    const Model m = testutil::tiny_random_model(4);
    std::vector<HookContext> seen;
    HookSet hooks = {{1, Site::attn_probs,
                      [&](Tensor t, const HookContext& c) {
                          seen.push_back(c);
                          return t;
                      }},
                     {0, Site::norm2_out, [&](Tensor t, const HookContext& c) {
                          seen.push_back(c);
                          return t;
                      }}};
    forward(m, std::vector<int>{1, 2, 3}, hooks);
    ASSERT_EQ(seen.size(), 2u);
    EXPECT_EQ(seen[0].layer, 0u);
    EXPECT_EQ(seen[0].site, Site::norm2_out);
    EXPECT_EQ(seen[1].layer, 1u);
    EXPECT_EQ(seen[1].site, Site::attn_probs);
    EXPECT_EQ(seen[1].n_tokens, 3u);
}

TEST(Forward, HooksAtSameSiteComposeInOrderAndCaptureSeesResult) {
    const Model m = testutil::tiny_random_model(5);
    const std::vector<int> tokens = {2, 3};
    HookSet hooks = {{0, Site::resid_pre,
                      [](Tensor t, const HookContext&) {
                          for (float& v : t.data()) v = 1.0f;
                          return t;
                      }},
                     {0, Site::resid_pre, [](Tensor t, const HookContext&) {
                          for (float& v : t.data()) v *= 3.0f;
                          return t;
                      }}};
    const auto r = forward(m, tokens, hooks, {Site::resid_pre});
    for (float v : r.trace.at(0, Site::resid_pre).data()) EXPECT_EQ(v, 3.0f);
}

TEST(Forward, TraceHoldsExactlyRequestedCaptures) {
    const Model m = testutil::tiny_random_model(6);
    const auto r = forward(m, std::vector<int>{1, 2, 3, 4}, {}, {Site::attn_out});
    EXPECT_TRUE(r.trace.has(Site::attn_out));
    EXPECT_FALSE(r.trace.has(Site::resid_pre));
    EXPECT_THROW(r.trace.at(0, Site::resid_pre), InputError);
    EXPECT_TRUE(r.trace.layers[0].resid_pre.empty());
    EXPECT_EQ(r.trace.at(1, Site::attn_out).shape(), (std::vector<std::size_t>{4, 8}));
}

TEST(Forward, CapturedShapesAndProbabilityRows) {
    for (auto topo : {ResidualTopology::parallel, ResidualTopology::sequential}) {
        for (auto norm : {NormType::layernorm, NormType::rmsnorm}) {
            const Model m = testutil::tiny_random_model(7, norm, topo);
            const auto r = forward(m, std::vector<int>{1, 9, 3, 3, 5}, {}, kAllSites);
            for (std::size_t l = 0; l < 2; ++l) {
                const Tensor& p = r.trace.at(l, Site::attn_probs);
                ASSERT_EQ(p.shape(), (std::vector<std::size_t>{2, 5, 5}));
                for (std::size_t h = 0; h < 2; ++h) {
                    for (std::size_t t = 0; t < 5; ++t) {
                        double sum = 0.0;
                        for (std::size_t j = 0; j < 5; ++j) {
                            const float v = p[(h * 5 + t) * 5 + j];
                            if (j > t) {
                                EXPECT_EQ(v, 0.0f);
                            }
                            sum += v;
                        }
                        EXPECT_NEAR(sum, 1.0, 1e-5);
                    }
                }
                for (Site s : {Site::resid_pre, Site::attn_out, Site::norm1_out, Site::norm2_out, Site::resid_post}) {
                    EXPECT_EQ(r.trace.at(l, s).shape(), (std::vector<std::size_t>{5, 8}));
                }
            }
        }
    }
}

TEST(Forward, ResidualTopologyChangesOutput) {
    const Model par = testutil::tiny_random_model(8, NormType::layernorm, ResidualTopology::parallel);
    Model seq = par;
    seq.config.topology = ResidualTopology::sequential;
    const std::vector<int> tokens = {1, 2, 3};
    EXPECT_GT(testutil::max_abs_diff(forward(par, tokens).logits, forward(seq, tokens).logits), 1e-4);
}

TEST(Forward, SequentialNorm2ReadsStreamAfterAttention) {
    const Model m = testutil::tiny_random_model(9, NormType::layernorm, ResidualTopology::sequential);
    const auto r = forward(m, std::vector<int>{4, 6, 8}, {}, kAllSites);
    const Tensor mid = add(r.trace.at(0, Site::resid_pre), r.trace.at(0, Site::attn_out));
    const Tensor n2 = normalize_rows(mid, m.weights.get(param::layer(0, "norm2.weight")),
                                     &m.weights.get(param::layer(0, "norm2.bias")), m.config);
    EXPECT_EQ(n2, r.trace.at(0, Site::norm2_out));
}

TEST(Forward, CausalityOnRandomModels) {
    std::mt19937_64 rng(2024);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const Model m = testutil::tiny_random_model(seed, seed % 2 ? NormType::rmsnorm : NormType::layernorm,
                                                    seed % 3 ? ResidualTopology::parallel
                                                             : ResidualTopology::sequential);
        std::vector<int> tokens = random_tokens(8, m.config.vocab_size, rng);
        const auto base = forward(m, tokens);
        const std::size_t t = 1 + seed % 7;
        tokens[t] = (tokens[t] + 1 + static_cast<int>(seed % 5)) % static_cast<int>(m.config.vocab_size);
        const auto changed = forward(m, tokens);
        for (std::size_t p = 0; p < t; ++p) {
            for (std::size_t v = 0; v < m.config.vocab_size; ++v) {
                ASSERT_EQ(base.logits(p, v), changed.logits(p, v)) << "seed " << seed << " pos " << p;
            }
        }
        EXPECT_GT(testutil::max_abs_diff(base.logits, changed.logits), 0.0);
    }
}

TEST(Forward, DeterminismOnRandomModels) {
    std::mt19937_64 rng(77);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const Model m = testutil::tiny_random_model(1000 + seed);
        const std::vector<int> tokens = random_tokens(6, m.config.vocab_size, rng);
        EXPECT_EQ(forward(m, tokens).logits, forward(m, tokens).logits);
    }
}

TEST(Attention, SingleTokenProbabilityIsOne) {
    const Model m = testutil::tiny_random_model(10);
    const auto r = forward(m, std::vector<int>{3}, {}, {Site::attn_probs});
    for (std::size_t l = 0; l < 2; ++l) {
        for (float v : r.trace.at(l, Site::attn_probs).data()) EXPECT_EQ(v, 1.0f);
    }
}

TEST(Attention, ZeroQueryKeyGivesUniformOverPrefix) {
    Model m = testutil::tiny_random_model(11);
    Tensor& qkv = m.weights.get_mut(param::layer(0, "attn.qkv.weight"));
    Tensor& qkv_b = m.weights.get_mut(param::layer(0, "attn.qkv.bias"));
    for (std::size_t r = 0; r < qkv.rows(); ++r) {
        for (std::size_t c = 0; c < 16; ++c) qkv(r, c) = 0.0f;
    }
    for (std::size_t c = 0; c < 16; ++c) qkv_b[c] = 0.0f;
    const auto res = forward(m, std::vector<int>{1, 2, 3, 4}, {}, {Site::attn_probs});
    const Tensor& p = res.trace.at(0, Site::attn_probs);
    for (std::size_t h = 0; h < 2; ++h) {
        for (std::size_t t = 0; t < 4; ++t) {
            for (std::size_t j = 0; j <= t; ++j) EXPECT_NEAR(p[(h * 4 + t) * 4 + j], 1.0 / (t + 1), 1e-7);
        }
    }
}

TEST(Attention, ProbabilityHookFeedsValueMixing) {
    const Model m = testutil::tiny_random_model(12);
    const std::vector<int> tokens = {5, 6, 7};
    HookSet hooks = {{0, Site::attn_probs, [](Tensor t, const HookContext&) {
                          // Attend only to position 0.
                          const std::size_t seq = t.dim(1);
                          for (std::size_t i = 0; i < t.size(); ++i) t[i] = (i % seq == 0) ? 1.0f : 0.0f;
                          return t;
                      }}};
    const auto r = forward(m, tokens, hooks, {Site::attn_out});
    const Tensor& out = r.trace.at(0, Site::attn_out);
    for (std::size_t t = 1; t < 3; ++t) {
        for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out(t, c), out(0, c), 1e-6);
    }
}

TEST(Rotary, PositionZeroIsIdentity) {
    const auto r = rotary_apply({0.3, -1.7}, 0, 3, 8, 10000.0);
    EXPECT_EQ(r.first, 0.3);
    EXPECT_EQ(r.second, -1.7);
}

TEST(Rotary, QuarterTurn) {
    // Position 1 at dim 1 of 4 rotates by base^(-1/2), which this base makes pi/2.
    const double base = 1.0 / ((std::numbers::pi / 2) * (std::numbers::pi / 2));
    const auto r = rotary_apply({1.0, 0.0}, 1, 1, 4, base);
    EXPECT_NEAR(r.first, 0.0, 1e-6);
    EXPECT_NEAR(r.second, 1.0, 1e-6);
}

TEST(Rotary, PreservesPairNorm) {
    std::mt19937_64 rng(13);
    std::normal_distribution<double> n(0.0, 2.0);
    for (int i = 0; i < 1000; ++i) {
        const double a = n(rng), b = n(rng);
        const auto r = rotary_apply({a, b}, static_cast<std::size_t>(i % 64), static_cast<std::size_t>(i % 4), 8,
                                    10000.0);
        EXPECT_NEAR(std::hypot(r.first, r.second), std::hypot(a, b), 1e-6);
    }
}

TEST(Rotary, ConfigOverloadChecksRange) {
    ModelConfig c;
    c.d_model = 8;
    c.n_heads = 1;
    c.rotary_fraction = 0.5;  // 4 rotated dims, pairs 0..1
    EXPECT_NO_THROW(rotary_apply({1.0, 0.0}, 3, 1, c));
    EXPECT_THROW(rotary_apply({1.0, 0.0}, 3, 2, c), DimensionError);
}

TEST(NormType, LayerNormIsShiftInvariantRmsNormIsNot) {
    for (auto norm : {NormType::layernorm, NormType::rmsnorm}) {
        const Model m = testutil::tiny_random_model(14, norm);
        const std::vector<int> tokens = {1, 2, 3, 4};
        const auto clean = forward(m, tokens, {}, {Site::norm1_out});
        HookSet shift = {{0, Site::resid_pre, [](Tensor t, const HookContext&) {
                              for (float& v : t.data()) v += 2.5f;
                              return t;
                          }}};
        const auto shifted = forward(m, tokens, shift, {Site::norm1_out});
        const double diff =
            testutil::max_abs_diff(clean.trace.at(0, Site::norm1_out), shifted.trace.at(0, Site::norm1_out));
        if (norm == NormType::layernorm) {
            EXPECT_LE(diff, 1e-5);
        } else {
            EXPECT_GT(diff, 1e-3);
        }
    }
}

TEST(NormType, LayerNormLogitsIgnoreAllOnesEmbeddingShift) {
    // Every sublayer and the final norm see LN(h + c1) = LN(h), so the shift
    // rides the residual stream without reaching the logits.
    for (auto topology : {ResidualTopology::parallel, ResidualTopology::sequential}) {
        for (auto norm : {NormType::layernorm, NormType::rmsnorm}) {
            const Model m = testutil::tiny_random_model(15, norm, topology);
            Model shifted = m;
            for (float& v : shifted.weights.get_mut(param::embed).data()) v += 2.5f;
            const std::vector<int> tokens = {1, 4, 2, 8, 5};
            const double diff = testutil::max_abs_diff(forward(m, tokens).logits, forward(shifted, tokens).logits);
            if (norm == NormType::layernorm) {
                EXPECT_LE(diff, 1e-5);
            } else {
                EXPECT_GT(diff, 1e-3);
            }
        }
    }
}
