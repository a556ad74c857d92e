#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace dualmil;

namespace {

Tensor features(std::uint64_t seed, std::size_t n, std::size_t d) {
    std::mt19937_64 gen(seed);
    return oracle::random_tensor(gen, {n, d}, -1, 1, false);
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
    std::vector<double> v;
    for (std::size_t r : perm)
        for (std::size_t c = 0; c < x.cols(); ++c) v.push_back(x.at(r, c));
    return Tensor::matrix(x.rows(), x.cols(), std::move(v));
}

void zero(Tensor t) {
    for (double& v : t.mutable_values()) v = 0.0;
}

}  // namespace

TEST(Aggregator, NamesRoundTrip) {
    for (auto a : {Aggregator::abmil, Aggregator::dsmil, Aggregator::clam_sb, Aggregator::clam_mb,
                   Aggregator::max_pool, Aggregator::mean_pool}) {
        EXPECT_EQ(parse_aggregator(to_string(a)), a);
    }
    EXPECT_FALSE(parse_aggregator("transmil").has_value());
}

TEST(Encoder, ZeroWeightsGiveZero) {
    ModelState s = init_params(1, {4, 6, 5, 3}, Aggregator::abmil);
    for (Tensor t : {s.encoder.w1, s.encoder.b1, s.encoder.w2, s.encoder.b2}) zero(t);
    Tensor h = encode(features(2, 3, 4), s.encoder);
    EXPECT_EQ(h.shape(), (Shape{3, 5}));
    for (double v : h.values()) EXPECT_EQ(v, 0.0);
}

TEST(Encoder, IdentityWeightsPassNonnegativeInput) {
    EncoderParams p;
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
    p.w1 = Tensor::matrix(4, 4, eye);
    p.w2 = Tensor::matrix(4, 4, eye);
    p.b1 = Tensor::zeros({4});
    p.b2 = Tensor::zeros({4});
    Tensor x = Tensor::matrix(2, 4, {0.1, 0.5, 0.0, 2.0, 3.0, 0.25, 1.0, 0.0});
    Tensor h = encode(x, p);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(h[i], x[i]);
}

TEST(Abmil, ZeroWGivesZeroScoresAndDuplicatesTie) {
    ModelState s = toy::random_state(3, Aggregator::abmil);
    Tensor H = features(4, 5, 16);
    std::vector<double> dup(H.values().begin(), H.values().end());
    std::copy(dup.begin(), dup.begin() + 16, dup.begin() + 32);  // row 2 := row 0
    Tensor Hd = Tensor::matrix(5, 16, dup);
    Tensor a = attn_abmil(Hd, s.abmil);
    EXPECT_EQ(a[0], a[2]);
    zero(s.abmil.w);
    const Tensor zero_scores = attn_abmil(H, s.abmil);
    for (double v : zero_scores.values()) EXPECT_EQ(v, 0.0);
}

TEST(Abmil, HandComputedTwoInstanceCase) {
    AbmilParams p;
    p.v = Tensor::matrix(2, 2, {0.5, -1.0, 2.0, 0.25});
    p.w = Tensor::matrix(1, 2, {1.5, -0.75});
    Tensor H = Tensor::matrix(2, 2, {0.2, 0.4, -1.0, 0.3});
    Tensor a = attn_abmil(H, p);
    for (int j = 0; j < 2; ++j) {
        const double h0 = H.at(j, 0), h1 = H.at(j, 1);
        const double expected = 1.5 * std::tanh(0.5 * h0 - 1.0 * h1) - 0.75 * std::tanh(2.0 * h0 + 0.25 * h1);
        EXPECT_NEAR(a[j], expected, 1e-15);
    }
}

TEST(Abmil, ScoresBoundedByWeightL1Norm) {
    ModelState s = toy::random_state(5, Aggregator::abmil);
    double l1 = 0.0;
    for (double w : s.abmil.w.values()) l1 += std::abs(w);
    Tensor a = attn_abmil(scale(features(6, 20, 16), 50.0), s.abmil);
    for (double v : a.values()) EXPECT_LE(std::abs(v), l1 + 1e-12);
}

TEST(Dsmil, SingleInstanceAndIdenticalInstances) {
    ModelState s = toy::random_state(7, Aggregator::dsmil);
    Tensor h1 = features(8, 1, 16);
    auto one = attn_dsmil(h1, s.dsmil, std::vector<double>{0.3});
    EXPECT_EQ(one.critical, 0u);
    EXPECT_GE(one.scores[0], 0.0);

    std::vector<double> rep;
    for (int i = 0; i < 3; ++i) rep.insert(rep.end(), h1.values().begin(), h1.values().end());
    auto same = attn_dsmil(Tensor::matrix(3, 16, rep), s.dsmil, std::vector<double>{0.1, 0.1, 0.1});
    EXPECT_EQ(same.scores[0], same.scores[1]);
    EXPECT_EQ(same.scores[1], same.scores[2]);
}

TEST(Dsmil, ThreeInstanceBruteForce) {
    DsmilParams p;
    p.w_q = Tensor::matrix(2, 3, {1.0, 0.5, -0.5, 0.0, 2.0, 1.0});
    Tensor H = Tensor::matrix(3, 3, {0.1, 0.2, 0.3, -0.4, 0.5, 0.6, 0.7, -0.8, 0.9});
    std::vector<double> crit{0.2, 1.7, -0.3};  // m = 1
    auto out = attn_dsmil(H, p, crit);
    ASSERT_EQ(out.critical, 1u);
    auto q = [&](int j) {
        return std::array<double, 2>{1.0 * H.at(j, 0) + 0.5 * H.at(j, 1) - 0.5 * H.at(j, 2),
                                     2.0 * H.at(j, 1) + 1.0 * H.at(j, 2)};
    };
    const auto qm = q(1);
    for (int j = 0; j < 3; ++j) {
        const auto qj = q(j);
        EXPECT_NEAR(out.scores[j], qj[0] * qm[0] + qj[1] * qm[1], 1e-15);
    }
}

TEST(Dsmil, CauchySchwarzBound) {
    ModelState s = toy::random_state(9, Aggregator::dsmil);
    Tensor H = features(10, 12, 16);
    Tensor logits = instance_head(H, s.heads);
    auto out = attn_dsmil(H, s.dsmil, logits.values());
    Tensor q = linear(H, s.dsmil.w_q);
    auto norm = [&](std::size_t j) {
        double t = 0;
        for (std::size_t c = 0; c < q.cols(); ++c) t += q.at(j, c) * q.at(j, c);
        return std::sqrt(t);
    };
    EXPECT_NEAR(out.scores[out.critical], norm(out.critical) * norm(out.critical), 1e-12);
    for (std::size_t j = 0; j < 12; ++j) {
        EXPECT_LE(std::abs(out.scores[j]), norm(j) * norm(out.critical) + 1e-12);
    }
}

TEST(Clam, ZeroBranchWeightsGiveUniformAttention) {
    ModelState s = toy::random_state(11, Aggregator::clam_mb);
    for (Tensor t : s.clam.w_c) zero(t);
    Tensor H = features(12, 4, 16);
    auto scores = attn_clam(H, s.clam);
    ASSERT_EQ(scores.size(), 2u);
    for (const auto& a : scores) {
        Tensor alpha = softmax(a);
        for (double v : alpha.values()) EXPECT_DOUBLE_EQ(v, 0.25);
        Tensor pooled = reshape(matmul(reshape(alpha, {1, 4}), H), {16});
        for (std::size_t c = 0; c < 16; ++c) {
            double mean = 0.0;
            for (std::size_t j = 0; j < 4; ++j) mean += H.at(j, c) / 4.0;
            EXPECT_NEAR(pooled[c], mean, 1e-15);
        }
    }
}

TEST(Clam, TwoClassThreeInstanceHandEvaluation) {
    ClamParams p;
    p.w_a = Tensor::matrix(2, 2, {0.3, -0.6, 1.1, 0.4});
    p.w_b = Tensor::matrix(2, 2, {-0.2, 0.9, 0.5, 0.5});
    p.w_c = {Tensor::matrix(1, 2, {1.0, -2.0}), Tensor::matrix(1, 2, {0.5, 0.25})};
    Tensor H = Tensor::matrix(3, 2, {0.1, 0.2, -0.3, 0.4, 0.5, -0.6});
    auto scores = attn_clam(H, p);
    auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    for (int j = 0; j < 3; ++j) {
        const double h0 = H.at(j, 0), h1 = H.at(j, 1);
        const double g0 = std::tanh(0.3 * h0 - 0.6 * h1) * sig(-0.2 * h0 + 0.9 * h1);
        const double g1 = std::tanh(1.1 * h0 + 0.4 * h1) * sig(0.5 * h0 + 0.5 * h1);
        EXPECT_NEAR(scores[0][j], 1.0 * g0 - 2.0 * g1, 1e-15);
        EXPECT_NEAR(scores[1][j], 0.5 * g0 + 0.25 * g1, 1e-15);
    }
}

TEST(Heads, ZeroWeightsAndEqualRows) {
    ModelState s = toy::random_state(13, Aggregator::abmil);
    zero(s.heads.bag_w);
    zero(s.heads.bag_b);
    Tensor p = softmax(bag_head(Tensor::vector(std::vector<double>(16, 0.7)), s.heads));
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);

    ModelState r = toy::random_state(14, Aggregator::abmil);
    Tensor bw = r.heads.bag_w;
    for (std::size_t c = 0; c < 16; ++c) bw.mutable_values()[16 + c] = bw[c];
    Tensor bb = r.heads.bag_b;
    bb.mutable_values()[1] = bb[0];
    Tensor logits = bag_head(reshape(features(15, 1, 16), {16}), r.heads);
    EXPECT_EQ(logits[0], logits[1]);

    zero(s.heads.inst_w);
    zero(s.heads.inst_b);
    Tensor z = instance_head(features(16, 3, 16), s.heads);
    for (double v : z.values()) {
        EXPECT_EQ(v, 0.0);
        EXPECT_EQ(sigmoid(v), 0.5);
    }
    ModelState t = toy::random_state(17, Aggregator::abmil);
    Tensor H = features(18, 1, 16);
    std::vector<double> two(H.values().begin(), H.values().end());
    two.insert(two.end(), H.values().begin(), H.values().end());
    Tensor zz = instance_head(Tensor::matrix(2, 16, two), t.heads);
    EXPECT_EQ(zz[0], zz[1]);
}

TEST(Init, DeterministicPerSeed) {
    for (auto agg : toy::attention_aggregators()) {
        ModelState a = init_params(21, toy::dims(), agg);
        ModelState b = init_params(21, toy::dims(), agg);
        ModelState c = init_params(22, toy::dims(), agg);
        auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
        ASSERT_EQ(pa.size(), pb.size());
        bool any_diff = false;
        for (std::size_t i = 0; i < pa.size(); ++i) {
            EXPECT_EQ(pa[i].name, pb[i].name);
            for (std::size_t k = 0; k < pa[i].tensor.size(); ++k) {
                EXPECT_EQ(pa[i].tensor[k], pb[i].tensor[k]);
                any_diff |= pa[i].tensor[k] != pc[i].tensor[k];
            }
        }
        EXPECT_TRUE(any_diff);
    }
}

TEST(Init, UniformFanInBoundsZeroBiasesAndMean) {
    ModelState s = init_params(23, {100, 100, 100, 100}, Aggregator::abmil);
    // W1 is [100 x 100]: 10^4 draws from U(-0.1, 0.1); sd of the mean = 0.1/sqrt(3)/100.
    double mean = 0.0;
    for (double v : s.encoder.w1.values()) {
        EXPECT_LE(std::abs(v), 0.1);
        mean += v;
    }
    mean /= 1e4;
    EXPECT_LE(std::abs(mean), 3.0 * 0.1 / std::sqrt(3.0) / 100.0);
    for (Tensor b : {s.encoder.b1, s.encoder.b2, s.heads.bag_b, s.heads.inst_b})
        for (double v : b.values()) EXPECT_EQ(v, 0.0);
}

TEST(Permutation, AbmilAndClamEquivariant) {
    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    Tensor H = features(30, 5, 16);
    Tensor P = permute_rows(H, perm);
    ModelState a = toy::random_state(31, Aggregator::abmil);
    Tensor s = attn_abmil(H, a.abmil), sp = attn_abmil(P, a.abmil);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(sp[j], s[perm[j]], 1e-15);
    ModelState c = toy::random_state(32, Aggregator::clam_mb);
    auto cs = attn_clam(H, c.clam), cps = attn_clam(P, c.clam);
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(cps[k][j], cs[k][perm[j]], 1e-15);
}

TEST(Permutation, DsmilCriticalIndexFollows) {
    std::vector<std::size_t> perm{2, 4, 0, 3, 1};
    Tensor H = features(33, 5, 16);
    Tensor P = permute_rows(H, perm);
    ModelState s = toy::random_state(34, Aggregator::dsmil);
    auto o = attn_dsmil(H, s.dsmil, instance_head(H, s.heads).values());
    auto op = attn_dsmil(P, s.dsmil, instance_head(P, s.heads).values());
    EXPECT_EQ(perm[op.critical], o.critical);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(op.scores[j], o.scores[perm[j]], 1e-14);
}

TEST(SingleInstance, EveryAggregatorPoolsToTheInstance) {
    for (auto agg : toy::attention_aggregators()) {
        ModelState s = toy::random_state(35, agg);
        Bag bag = toy::random_bag(36, 1, 8, 1);
        auto out = bag_forward(bag, s, {});
        EXPECT_EQ(out.alpha[0], 1.0);
        Tensor h = reshape(encode(bag.features, s.encoder), {16});
        Tensor H = aggregate(out.masked_alpha, out.features);
        for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(H[c], h[c]) << to_string(agg);
    }
}
