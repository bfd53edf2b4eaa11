#include <gtest/gtest.h>

#include <sstream>

#include "cstf/matching.hpp"
#include "oracles.hpp"

using cstf::MatchSet;
using cstf::ScoreMatrix;
using cstf::Tensor;

TEST(Similarity, OrthonormalRowsGiveIdentity) {
    auto eye = oracle::identity_matrix<double>(3);
    auto s = cstf::similarity_matrix(eye, eye, 1.0);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            EXPECT_DOUBLE_EQ(s.scores.at(i, j), i == j ? 1.0 : 0.0);
}

TEST(Similarity, ZeroDescriptorsAndBruteForce) {
    auto z = cstf::similarity_matrix(Tensor<double>({2, 4}), Tensor<double>({3, 4}), 0.5);
    for (std::size_t i = 0; i < z.scores.size(); ++i) EXPECT_DOUBLE_EQ(z.scores.data()[i], 0.0);

    cstf::Rng rng(3);
    auto a = oracle::rand_tensor<double>({3, 2}, rng);
    auto b = oracle::rand_tensor<double>({4, 2}, rng);
    const double tau = 0.25;
    auto s = cstf::similarity_matrix(a, b, tau);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < 2; ++c) dot += a.at(i, c) * b.at(j, c);
            EXPECT_NEAR(s.scores.at(i, j), dot / tau, 1e-12);
        }

    EXPECT_THROW(cstf::similarity_matrix(a, Tensor<double>({4, 3}), tau), cstf::ShapeError);
    EXPECT_THROW(cstf::similarity_matrix(a, b, 0.0), cstf::ConfigError);
}

TEST(DualSoftmax, SaturatedIdentityAndUniform) {
    auto big = cstf::scale(oracle::identity_matrix<double>(4), 100.0);
    auto p = cstf::dual_softmax(ScoreMatrix<double>{big, 1.0});
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            EXPECT_NEAR(p.at(i, j), i == j ? 1.0 : 0.0, 1e-12);

    auto constant = Tensor<double>::full({3, 5}, 2.7);
    auto u = cstf::dual_softmax(ScoreMatrix<double>{constant, 1.0});
    for (std::size_t i = 0; i < u.size(); ++i) EXPECT_NEAR(u.data()[i], 1.0 / 15.0, 1e-12);
}

TEST(DualSoftmax, MatchesProductOfIndependentSoftmaxes) {
    cstf::Rng rng(7);
    auto s = oracle::rand_tensor<double>({3, 3}, rng, -2, 2);
    auto p = cstf::dual_softmax(ScoreMatrix<double>{s, 1.0});

    auto rows = oracle::naive_row_softmax(s.values(), 3, 3);
    // column softmax via the transposed oracle
    std::vector<double> st(9);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) st[j * 3 + i] = s.at(i, j);
    auto cols_t = oracle::naive_row_softmax(st, 3, 3);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            EXPECT_NEAR(p.at(i, j), rows[i * 3 + j] * cols_t[j * 3 + i], 1e-12);
}

TEST(DualSoftmax, EntriesBoundedByEitherFactor) {
    cstf::Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
        auto s = oracle::rand_tensor<double>({4, 6}, rng, -5, 5);
        auto p = cstf::dual_softmax(ScoreMatrix<double>{s, 1.0});
        auto r = cstf::softmax(s, 1);
        auto c = cstf::softmax(s, 0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            EXPECT_GT(p.data()[i], 0.0);
            EXPECT_LE(p.data()[i], 1.0);
            EXPECT_LE(p.data()[i], std::min(r.data()[i], c.data()[i]) + 1e-15);
        }
    }
}

TEST(DualSoftmax, PowerOfTwoRescalingLeavesOutputUnchanged) {
    cstf::Rng rng(13);
    auto a = oracle::rand_tensor<double>({3, 4}, rng);
    auto b = oracle::rand_tensor<double>({5, 4}, rng);
    const double tau = 0.1;

    auto base = cstf::dual_softmax(cstf::similarity_matrix(a, b, tau));
    // scaling both descriptor sets by 2 scales dot products by 4; scaling tau
    // by 4 keeps the softmax arguments identical
    auto scaled = cstf::dual_softmax(
        cstf::similarity_matrix(cstf::scale(a, 2.0), cstf::scale(b, 2.0), tau * 4.0));
    for (std::size_t i = 0; i < base.size(); ++i)
        EXPECT_EQ(base.data()[i], scaled.data()[i]);
}

TEST(MatchingLoss, PerfectAndAnalyticCases) {
    Tensor<double> perfect({2, 2}, {1.0, 1e-9, 1e-9, 1.0});
    EXPECT_DOUBLE_EQ(cstf::matching_loss(perfect, {{0, 0}, {1, 1}}).value(), 0.0);

    Tensor<double> one({1, 1}, {std::exp(-1.0)});
    EXPECT_NEAR(cstf::matching_loss(one, {{0, 0}}).value(), 1.0, 1e-12);
}

TEST(MatchingLoss, ContractViolationsRejected) {
    Tensor<double> p = Tensor<double>::full({3, 3}, 0.1);
    EXPECT_THROW(cstf::matching_loss(p, {}), cstf::ContractError);
    EXPECT_THROW(cstf::matching_loss(p, {{0, 0}, {0, 1}}), cstf::ContractError);
    EXPECT_THROW(cstf::matching_loss(p, {{0, 0}, {1, 0}}), cstf::ContractError);
    EXPECT_THROW(cstf::matching_loss(p, {{3, 0}}), cstf::ContractError);
}

TEST(MatchingLoss, GradientThroughDescriptorsMatchesFiniteDifferences) {
    cstf::Rng rng(17);
    auto a = oracle::rand_tensor<double>({4, 3}, rng).set_requires_grad(true);
    auto b = oracle::rand_tensor<double>({4, 3}, rng);
    const std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 0}, {1, 1}, {2, 2}, {3, 3}};

    auto loss_fn = [&] {
        auto na = cstf::row_normalize(a);
        auto nb = cstf::row_normalize(b);
        return cstf::matching_loss(cstf::dual_softmax(cstf::similarity_matrix(na, nb, 0.1)), pairs);
    };
    cstf::backward(loss_fn());
    auto fd = cstf::finite_diff_grad(
        [&](const Tensor<double>&) {
            cstf::NoGradGuard off;
            return loss_fn().value();
        },
        a, oracle::fd_step<double>());
    EXPECT_LT(oracle::max_grad_err(a.grad(), fd), 1e-6);
}

TEST(MutualNN, IdentityAndUniformTieBreak) {
    auto eye = oracle::identity_matrix<double>(4);
    auto matches = cstf::mutual_nn(eye, 0.5);
    ASSERT_EQ(matches.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(matches[i].index_a, i);
        EXPECT_EQ(matches[i].index_b, i);
        EXPECT_DOUBLE_EQ(matches[i].confidence, 1.0);
    }

    // uniform matrix: lowest-index tie-break leaves only (0, 0) mutual
    auto uniform = Tensor<double>::full({3, 3}, 0.2);
    auto only = cstf::mutual_nn(uniform, 0.0);
    ASSERT_EQ(only.size(), 1u);
    EXPECT_EQ(only[0].index_a, 0u);
    EXPECT_EQ(only[0].index_b, 0u);
}

TEST(MutualNN, MatchesBruteForceDoubleArgmax) {
    cstf::Rng rng(19);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t rows = 2 + rng.uniform_int(4), cols = 2 + rng.uniform_int(4);
        auto p = oracle::rand_tensor<double>({rows, cols}, rng, 0, 1);
        const double theta = rng.uniform(0.0, 0.6);
        auto got = cstf::mutual_nn(p, theta);

        MatchSet expect;
        for (std::size_t a = 0; a < rows; ++a) {
            for (std::size_t b = 0; b < cols; ++b) {
                bool row_best = true, col_best = true;
                for (std::size_t bb = 0; bb < cols; ++bb)
                    if (p.at(a, bb) > p.at(a, b) || (p.at(a, bb) == p.at(a, b) && bb < b))
                        row_best = false;
                for (std::size_t aa = 0; aa < rows; ++aa)
                    if (p.at(aa, b) > p.at(a, b) || (p.at(aa, b) == p.at(a, b) && aa < a))
                        col_best = false;
                if (row_best && col_best && p.at(a, b) > theta) expect.push_back({a, b, p.at(a, b)});
            }
        }
        ASSERT_EQ(got.size(), expect.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_EQ(got[i].index_a, expect[i].index_a);
            EXPECT_EQ(got[i].index_b, expect[i].index_b);
        }

        // partial matching: injective on both sides
        std::vector<bool> ra(rows, false), rb(cols, false);
        for (const auto& m : got) {
            EXPECT_FALSE(ra[m.index_a]);
            EXPECT_FALSE(rb[m.index_b]);
            ra[m.index_a] = true;
            rb[m.index_b] = true;
        }
    }
}

TEST(MutualNN, ThresholdBoundsEnforced) {
    auto p = Tensor<double>::full({2, 2}, 0.3);
    EXPECT_THROW(cstf::mutual_nn(p, -0.1), cstf::ConfigError);
    EXPECT_THROW(cstf::mutual_nn(p, 1.0), cstf::ConfigError);
}

TEST(MatchExport, HeaderAndLineFormat) {
    MatchSet m{{0, 2, 0.75}, {1, 0, 0.5}};
    std::ostringstream out;
    cstf::write_matches(out, m, 3, 4, 0.2, 0.1);
    EXPECT_EQ(out.str(), "# A=3 B=4 theta=0.2 tau=0.1\n0,2,0.75\n1,0,0.5\n");
}
