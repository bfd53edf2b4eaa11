#include <gtest/gtest.h>

#include <numeric>

#include "cstf/attention.hpp"
#include "oracles.hpp"

using cstf::FusionMode;
using cstf::StageAttentionParams;
using cstf::Tensor;

namespace {

// Step-by-step reference: explicit matmul, stabilized softmax, matmul.
std::vector<double> attention_oracle(const Tensor<double>& q, const Tensor<double>& k,
                                     const Tensor<double>& v) {
    const std::size_t p = q.shape()[0], a = q.shape()[1], pv = v.shape()[0], c = v.shape()[1];
    std::vector<double> kt(a * pv);
    for (std::size_t i = 0; i < pv; ++i)
        for (std::size_t j = 0; j < a; ++j) kt[j * pv + i] = k.at(i, j);
    auto scores = oracle::naive_matmul(q.values(), kt, p, a, pv);
    for (auto& s : scores) s /= std::sqrt(static_cast<double>(a));
    auto weights = oracle::naive_row_softmax(scores, p, pv);
    return oracle::naive_matmul(weights, v.values(), p, pv, c);
}

StageAttentionParams<double> zero_branch_params(std::size_t channels, std::size_t attn_dim,
                                                cstf::Rng& rng) {
    auto p = cstf::init_stage_attention_params<double>(channels, attn_dim, rng);
    p.wv = Tensor<double>::zeros(p.wv.shape());
    p.wv2 = Tensor<double>::zeros(p.wv2.shape());
    p.cat_proj = Tensor<double>::zeros(p.cat_proj.shape());
    return p;
}

}  // namespace

TEST(ScaledAttention, SaturationSelectsRows) {
    const std::size_t p = 3;
    auto q = cstf::scale(oracle::identity_matrix<double>(p), 50.0);
    auto k = q.clone();
    cstf::Rng rng(3);
    auto v = oracle::rand_tensor<double>({p, 4}, rng);
    auto out = cstf::scaled_attention(q, k, v);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.at(i, j), v.at(i, j), 1e-9);
}

TEST(ScaledAttention, ZeroQueriesAverageValues) {
    cstf::Rng rng(7);
    auto q = Tensor<double>::zeros({4, 3});
    auto k = oracle::rand_tensor<double>({4, 3}, rng);
    auto v = oracle::rand_tensor<double>({4, 5}, rng);
    auto w = cstf::attention_weights(q, k);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(w.at(i, j), 0.25, 1e-12);

    auto out = cstf::scaled_attention(q, k, v);
    for (std::size_t j = 0; j < 5; ++j) {
        double mean = 0;
        for (std::size_t i = 0; i < 4; ++i) mean += v.at(i, j);
        mean /= 4;
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.at(i, j), mean, 1e-12);
    }
}

TEST(ScaledAttention, MatchesStepByStepOracle) {
    cstf::Rng rng(11);
    auto q = oracle::rand_tensor<double>({4, 3}, rng);
    auto k = oracle::rand_tensor<double>({4, 3}, rng);
    auto v = oracle::rand_tensor<double>({4, 3}, rng);
    auto out = cstf::scaled_attention(q, k, v);
    auto ref = attention_oracle(q, k, v);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.data()[i], ref[i], 1e-12);
}

TEST(ScaledAttention, EmptyTokenSetRejected) {
    Tensor<double> q({0, 3}), k({0, 3}), v({0, 3});
    EXPECT_THROW(cstf::scaled_attention(q, k, v), cstf::ShapeError);
}

TEST(ScaledAttention, PermutingTokensPermutesOutput) {
    cstf::Rng rng(13);
    const std::size_t p = 5;
    auto q = oracle::rand_tensor<double>({p, 3}, rng);
    auto k = oracle::rand_tensor<double>({p, 3}, rng);
    auto v = oracle::rand_tensor<double>({p, 4}, rng);
    auto base = cstf::scaled_attention(q, k, v);

    std::vector<std::size_t> perm(p);
    std::iota(perm.begin(), perm.end(), 0u);
    for (std::size_t i = p; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(i)]);

    auto permute_rows = [&](const Tensor<double>& m) {
        Tensor<double> out(m.shape());
        for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < m.shape()[1]; ++j) out.at(i, j) = m.at(perm[i], j);
        return out;
    };
    auto permuted = cstf::scaled_attention(permute_rows(q), permute_rows(k), permute_rows(v));
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(permuted.at(i, j), base.at(perm[i], j), 1e-12);
}

TEST(ChannelCrossAttention, SingleStageReducesToScaledAttention) {
    cstf::Rng rng(17);
    const std::size_t c = 4;
    auto params = cstf::init_stage_attention_params<double>(c, c, rng);
    params.ca_out = oracle::identity_matrix<double>(c);
    auto tokens = oracle::rand_tensor<double>({5, c}, rng);

    auto out = cstf::channel_cross_attention<double>({tokens}, {params});
    auto direct = cstf::scaled_attention(cstf::linear(tokens, params.wq),
                                         cstf::linear(tokens, params.wk),
                                         cstf::linear(tokens, params.wv));
    ASSERT_EQ(out.size(), 1u);
    for (std::size_t i = 0; i < direct.size(); ++i)
        EXPECT_NEAR(out[0].data()[i], direct.data()[i], 1e-12);
}

TEST(ChannelCrossAttention, ZeroValueProjectionsGiveZeroEnrichment) {
    cstf::Rng rng(19);
    std::vector<Tensor<double>> tokens{oracle::rand_tensor<double>({4, 3}, rng),
                                       oracle::rand_tensor<double>({4, 6}, rng)};
    cstf::AttentionParams<double> params;
    for (std::size_t c : {3u, 6u}) {
        auto p = cstf::init_stage_attention_params<double>(c, 4, rng);
        p.wv = Tensor<double>::zeros({4, c});
        params.push_back(p);
    }
    auto out = cstf::channel_cross_attention(tokens, params);
    for (const auto& t : out)
        for (std::size_t i = 0; i < t.size(); ++i) EXPECT_DOUBLE_EQ(t.data()[i], 0.0);
}

TEST(ChannelCrossAttention, TwoStageSumMatchesHandComputation) {
    cstf::Rng rng(23);
    const std::size_t p = 2, a = 3;
    std::vector<Tensor<double>> tokens{oracle::rand_tensor<double>({p, 2}, rng),
                                       oracle::rand_tensor<double>({p, 4}, rng)};
    cstf::AttentionParams<double> params;
    params.push_back(cstf::init_stage_attention_params<double>(2, a, rng));
    params.push_back(cstf::init_stage_attention_params<double>(4, a, rng));

    auto out = cstf::channel_cross_attention(tokens, params);

    // two-term sum of per-stage attention outputs, then the stage projections
    std::vector<double> summed(p * a, 0.0);
    for (std::size_t s = 0; s < 2; ++s) {
        auto q = cstf::linear(tokens[s], params[s].wq);
        auto k = cstf::linear(tokens[s], params[s].wk);
        auto v = cstf::linear(tokens[s], params[s].wv);
        auto attn = attention_oracle(q, k, v);
        for (std::size_t i = 0; i < summed.size(); ++i) summed[i] += attn[i];
    }
    for (std::size_t s = 0; s < 2; ++s) {
        const std::size_t c = tokens[s].shape()[1];
        std::vector<double> proj_t(a * c);
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < a; ++j) proj_t[j * c + i] = params[s].ca_out.at(i, j);
        auto ref = oracle::naive_matmul(summed, proj_t, p, a, c);
        for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[s].data()[i], ref[i], 1e-12);
    }
}

TEST(ChannelCrossAttention, UnequalTokenCountsRejected) {
    cstf::Rng rng(29);
    std::vector<Tensor<double>> tokens{oracle::rand_tensor<double>({4, 3}, rng),
                                       oracle::rand_tensor<double>({5, 3}, rng)};
    cstf::AttentionParams<double> params{cstf::init_stage_attention_params<double>(3, 2, rng),
                                         cstf::init_stage_attention_params<double>(3, 2, rng)};
    EXPECT_THROW(cstf::channel_cross_attention(tokens, params), cstf::ContractError);
}

TEST(SpatialCrossAttention, UniformWeightsBroadcastMeanToken) {
    cstf::Rng rng(31);
    const std::size_t c = 3;
    auto params = cstf::init_stage_attention_params<double>(c, c, rng);
    params.wq2 = Tensor<double>::zeros({c, c});  // uniform attention
    params.wv2 = oracle::identity_matrix<double>(c);
    params.w_up = oracle::identity_matrix<double>(c);

    auto tokens = oracle::rand_tensor<double>({4, c}, rng);
    auto out = cstf::spatial_cross_attention(tokens, params);
    for (std::size_t j = 0; j < c; ++j) {
        double mean = 0;
        for (std::size_t i = 0; i < 4; ++i) mean += tokens.at(i, j);
        mean /= 4;
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.at(i, j), mean, 1e-12);
    }
}

TEST(SpatialCrossAttention, SingleTokenIsUpProjectedValueRow) {
    cstf::Rng rng(37);
    auto params = cstf::init_stage_attention_params<double>(4, 3, rng);
    auto tokens = oracle::rand_tensor<double>({1, 4}, rng);
    auto out = cstf::spatial_cross_attention(tokens, params);

    auto vrow = cstf::linear(tokens, params.wv2);
    auto expect = cstf::linear(vrow, params.w_up);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.data()[i], expect.data()[i], 1e-12);
}

TEST(SpatialCrossAttention, MatchesThreeStepOracle) {
    cstf::Rng rng(41);
    auto params = cstf::init_stage_attention_params<double>(5, 3, rng);
    auto tokens = oracle::rand_tensor<double>({4, 5}, rng);
    auto out = cstf::spatial_cross_attention(tokens, params);

    auto q = cstf::linear(tokens, params.wq2);
    auto k = cstf::linear(tokens, params.wk2);
    auto v = cstf::linear(tokens, params.wv2);
    auto attn = attention_oracle(q, k, v);
    std::vector<double> upt(3 * 5);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) upt[j * 5 + i] = params.w_up.at(i, j);
    auto ref = oracle::naive_matmul(attn, upt, 4, 3, 5);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.data()[i], ref[i], 1e-12);
}

TEST(Fuse, ZeroBranchesPassThroughBitExactInEveryMode) {
    cstf::Rng rng(43);
    auto params = cstf::init_stage_attention_params<double>(3, 2, rng);
    params.cat_proj = Tensor<double>::zeros(params.cat_proj.shape());
    auto original = oracle::rand_tensor<double>({4, 3}, rng);
    auto zero = Tensor<double>::zeros({4, 3});

    for (auto mode : {FusionMode::ca_only, FusionMode::sca_only, FusionMode::sum,
                      FusionMode::concat, FusionMode::sequential}) {
        auto out = cstf::fuse(zero, zero, original, mode, params);
        for (std::size_t i = 0; i < out.size(); ++i)
            EXPECT_EQ(out.data()[i], original.data()[i]) << fusion_mode_name(mode);
    }
}

TEST(Fuse, SumWithZeroSpatialBranchEqualsChannelOnly) {
    cstf::Rng rng(47);
    auto params = cstf::init_stage_attention_params<double>(3, 2, rng);
    auto original = oracle::rand_tensor<double>({4, 3}, rng);
    auto ca = oracle::rand_tensor<double>({4, 3}, rng);
    auto zero = Tensor<double>::zeros({4, 3});

    auto sum_out = cstf::fuse(ca, zero, original, FusionMode::sum, params);
    auto ca_out = cstf::fuse(ca, Tensor<double>(), original, FusionMode::ca_only, params);
    for (std::size_t i = 0; i < sum_out.size(); ++i)
        EXPECT_DOUBLE_EQ(sum_out.data()[i], ca_out.data()[i]);
}

TEST(Fuse, ConcatMatchesExplicitProjectThenAdd) {
    cstf::Rng rng(53);
    auto params = cstf::init_stage_attention_params<double>(3, 2, rng);
    auto original = oracle::rand_tensor<double>({4, 3}, rng);
    auto ca = oracle::rand_tensor<double>({4, 3}, rng);
    auto sca = oracle::rand_tensor<double>({4, 3}, rng);

    auto out = cstf::fuse(ca, sca, original, FusionMode::concat, params);

    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double acc = original.at(i, j);
            for (std::size_t t = 0; t < 3; ++t) acc += params.cat_proj.at(j, t) * ca.at(i, t);
            for (std::size_t t = 0; t < 3; ++t) acc += params.cat_proj.at(j, 3 + t) * sca.at(i, t);
            EXPECT_NEAR(out.at(i, j), acc, 1e-12);
        }
}

TEST(CstfBlock, DeadBranchesReduceToGeluOfLayerNorm) {
    cstf::Rng rng(59);
    std::vector<std::size_t> channels{3, 5};
    std::vector<Tensor<double>> tokens;
    cstf::AttentionParams<double> params;
    for (auto c : channels) {
        tokens.push_back(oracle::rand_tensor<double>({4, c}, rng));
        params.push_back(zero_branch_params(c, 2, rng));
    }

    for (auto mode : {FusionMode::ca_only, FusionMode::sca_only, FusionMode::sum,
                      FusionMode::concat, FusionMode::sequential}) {
        auto out = cstf::cstf_block(tokens, params, mode);
        for (std::size_t s = 0; s < tokens.size(); ++s) {
            auto expect = cstf::gelu(cstf::layer_norm(tokens[s], params[s].ln_out_gain,
                                                      params[s].ln_out_bias, 1e-5));
            for (std::size_t i = 0; i < expect.size(); ++i)
                EXPECT_EQ(out[s].data()[i], expect.data()[i]) << fusion_mode_name(mode);
        }
    }
}

TEST(CstfBlock, ShapesPreserved) {
    cstf::Rng rng(61);
    std::vector<std::size_t> channels{8, 16, 32};
    std::vector<Tensor<double>> tokens;
    cstf::AttentionParams<double> params;
    for (auto c : channels) {
        tokens.push_back(oracle::rand_tensor<double>({16, c}, rng));
        params.push_back(cstf::init_stage_attention_params<double>(c, 8, rng));
    }
    for (auto mode : {FusionMode::ca_only, FusionMode::sca_only, FusionMode::sum,
                      FusionMode::concat, FusionMode::sequential}) {
        auto out = cstf::cstf_block(tokens, params, mode);
        ASSERT_EQ(out.size(), tokens.size());
        for (std::size_t s = 0; s < out.size(); ++s) {
            EXPECT_EQ(out[s].shape(), tokens[s].shape()) << fusion_mode_name(mode);
            EXPECT_TRUE(out[s].all_finite());
        }
    }
}

TEST(CstfBlock, AttentionRowsSumToOne) {
    cstf::Rng rng(67);
    for (int rep = 0; rep < 20; ++rep) {
        auto q = oracle::rand_tensor<double>({6, 4}, rng, -4, 4);
        auto k = oracle::rand_tensor<double>({6, 4}, rng, -4, 4);
        auto w = cstf::attention_weights(q, k);
        for (std::size_t i = 0; i < 6; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < 6; ++j) sum += w.at(i, j);
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
}

TEST(CstfBlock, GradientsMatchFiniteDifferences) {
    cstf::Rng rng(71);
    std::vector<std::size_t> channels{3, 4};
    std::vector<Tensor<double>> tokens;
    cstf::AttentionParams<double> params;
    for (auto c : channels) {
        tokens.push_back(oracle::rand_tensor<double>({3, c}, rng));
        params.push_back(cstf::init_stage_attention_params<double>(c, 3, rng));
    }
    // weight the outputs so the loss is not permutation-blind
    std::vector<Tensor<double>> weights;
    for (auto& t : tokens) weights.push_back(oracle::rand_tensor<double>(t.shape(), rng));

    auto loss_fn = [&](FusionMode mode) {
        auto out = cstf::cstf_block(tokens, params, mode);
        Tensor<double> loss;
        for (std::size_t s = 0; s < out.size(); ++s) {
            auto part = cstf::sum_all(cstf::mul(out[s], weights[s]));
            loss = (s == 0) ? part : cstf::add(loss, part);
        }
        return loss;
    };

    for (auto mode : {FusionMode::sum, FusionMode::concat, FusionMode::sequential}) {
        for (auto& p : params) {
            for (auto* t : {&p.wq, &p.wv, &p.ca_out, &p.wq2, &p.wv2, &p.w_up, &p.cat_proj,
                            &p.ln_in_gain, &p.ln_out_bias}) {
                t->set_requires_grad(true);
            }
        }
        cstf::backward(loss_fn(mode));

        for (auto& p : params) {
            for (auto* t : {&p.wq, &p.wv, &p.ca_out, &p.wq2, &p.wv2, &p.w_up, &p.cat_proj,
                            &p.ln_in_gain, &p.ln_out_bias}) {
                auto grads = t->grad();
                auto fd = cstf::finite_diff_grad(
                    [&](const Tensor<double>&) {
                        cstf::NoGradGuard off;
                        return loss_fn(mode).value();
                    },
                    *t, oracle::fd_step<double>());
                EXPECT_LT(oracle::max_grad_err(grads, fd), 1e-6) << fusion_mode_name(mode);
                t->set_requires_grad(false);
            }
        }
    }
}
