#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace dualmil;

TEST(Bce, Examples) {
    EXPECT_NEAR(bce(0.5, 0.5), std::log(2.0), 1e-12);
    EXPECT_LE(bce(1.0, 1.0), 2e-7);
    EXPECT_GE(bce(1.0, 1.0), 0.0);
    EXPECT_NEAR(bce(0.8, 0.3), -(0.3 * std::log(0.8) + 0.7 * std::log(0.2)), 1e-9);
    EXPECT_NEAR(bce(0.8, 0.3), 1.1935496040981333, 1e-9);
    EXPECT_TRUE(std::isfinite(bce(0.0, 1.0)));
    EXPECT_TRUE(std::isfinite(bce(1.0, 0.0)));
}

TEST(LossLabel, Examples) {
    EXPECT_LE(loss_label(1.0, 1.0, 1, 0.7, 0.3), 2e-7);
    EXPECT_NEAR(loss_label(0.9, 0.6, 1, 0.7, 0.0), -0.7 * std::log(0.9), 1e-12);
    const double expected = 0.7 * -std::log(0.9) + 0.3 * -std::log(0.6);
    EXPECT_NEAR(loss_label(0.9, 0.6, 1, 0.7, 0.3), expected, 1e-9);
    EXPECT_NEAR(loss_label(0.9, 0.6, 1, 0.7, 0.3), 0.22700, 1e-5);
}

TEST(LossLabel, LinearInWeights) {
    const double base = loss_label(0.35, 0.8, 0, 0.7, 0.3);
    EXPECT_NEAR(loss_label(0.35, 0.8, 0, 2.1, 0.9), 3.0 * base, 1e-12);
}

TEST(LossInst, Examples) {
    const double q = 0.63;
    EXPECT_NEAR(loss_inst(q, {0.1, q, 0.2}), -(q * std::log(q) + (1 - q) * std::log(1 - q)), 1e-12);
    EXPECT_LE(loss_inst(1.0, {1.0}), 2e-7);
    EXPECT_NEAR(loss_inst(0.7, {0.9}), -(0.9 * std::log(0.7) + 0.1 * std::log(0.3)), 1e-9);
    EXPECT_NEAR(loss_inst(0.7, {0.9}), 0.4414, 1e-4);
}

TEST(LossInst, TargetIsConstantByDefault) {
    Tensor bag = Tensor::scalar(0.4, true);
    Tensor inst = Tensor::vector({0.2, 0.8, 0.6}, true);
    backward(loss_inst(bag, inst, {0, 2}));
    EXPECT_NE(bag.grad()[0], 0.0);
    for (double g : inst.grad()) EXPECT_EQ(g, 0.0);

    bag.zero_grad();
    inst.zero_grad();
    backward(loss_inst(bag, inst, {0, 2}, true));
    EXPECT_EQ(inst.grad()[0], 0.0);
    EXPECT_EQ(inst.grad()[1], 0.0);  // masked out of the max
    EXPECT_NE(inst.grad()[2], 0.0);
}

TEST(Indicator, Strict) {
    EXPECT_EQ(indicator(0.7, 0.5), 1);
    EXPECT_EQ(indicator(0.5, 0.5), 0);
    EXPECT_EQ(indicator(0.49, 0.5), 0);
}

TEST(LossSelfBag, Examples) {
    EXPECT_NEAR(loss_self_bag(0.99, {0.3, 0.8}, 0.7, 0.0, 0.5), 0.7 * -std::log(0.99), 1e-12);
    EXPECT_NEAR(-std::log(0.99), 0.01005, 1e-5);
    EXPECT_LE(loss_self_bag(1.0 - 1e-7, {}, 0.7, 0.0, 0.5), 1e-6);
    EXPECT_NEAR(loss_self_bag(0.5 + 1e-9, {}, 0.7, 0.0, 0.5), 0.7 * std::log(2.0), 1e-8);
}

TEST(LossSelfBag, InstanceTermIsMeanOverBag) {
    std::vector<double> p{0.9, 0.2, 0.6};
    const double expected = 0.4 * oracle::bce(0.3, 0.0) +
                            0.6 * (oracle::bce(0.9, 1) + oracle::bce(0.2, 0) + oracle::bce(0.6, 1)) / 3.0;
    EXPECT_NEAR(loss_self_bag(0.3, p, 0.4, 0.6, 0.5), expected, 1e-12);
}

TEST(LossSelfBag, GradientPushesAwayFromThreshold) {
    const double t = 0.5;
    for (double p : {t + 0.01, t - 0.01}) {
        Tensor x = Tensor::scalar(p, true);
        backward(loss_self_bag(x, Tensor::vector({}), 1.0, 0.0, t));
        if (p > t) EXPECT_LT(x.grad()[0], 0.0);
        else EXPECT_GT(x.grad()[0], 0.0);
    }
}

TEST(LossAttn, Examples) {
    EXPECT_NEAR(loss_attn({0.0, -1.0}, 1), std::log(2.0), 1e-12);
    EXPECT_LE(loss_attn({-3.0, 60.0}, 1), 2e-7);
    EXPECT_NEAR(loss_attn({1.2, 0.3}, 0), -std::log(1.0 - oracle::sigmoid(1.2)), 1e-9);
    EXPECT_NEAR(loss_attn({1.2, 0.3}, 0), 1.4633, 1e-4);
}

TEST(LossAttn, PermutationAndNonMaxInvariance) {
    const double a = loss_attn({0.4, 1.1, -0.2}, 1);
    EXPECT_EQ(loss_attn({1.1, -0.2, 0.4}, 1), a);
    EXPECT_EQ(loss_attn({-5.0, 1.1, 1.0}, 1), a);
}

TEST(LossBagTotal, Examples) {
    LossWeights w;
    EXPECT_NEAR(loss_bag_total(0.2, 0.4, 0.1, 0.3, w), 0.525, 1e-12);
    EXPECT_EQ(loss_bag_total(0, 0, 0, 0, w), 0.0);
    LossWeights label_only = w;
    label_only.use_inst = label_only.use_self = label_only.use_attn = false;
    EXPECT_EQ(loss_bag_total(0.2, 0.4, 0.1, 0.3, label_only), 0.2);
}

TEST(LossInstanceBranch, Examples) {
    LossWeights w;
    EXPECT_LE(loss_instance_branch(1e-9, 3.0, 0, w), 1e-6);
    EXPECT_NEAR(loss_instance_branch(0.5, 0.0, 1, LossWeights{.use_inst_self = false}), std::log(2.0), 1e-12);
    // prob 0.8, a = 2, Y = 1, theta 0.3, t 0.5: CE(prediction 0.8, target sigmoid(2)) + 0.3 CE(0.8, 1).
    const double target = oracle::sigmoid(2.0);
    const double expected = oracle::bce(0.8, target) + 0.3 * oracle::bce(0.8, 1.0);
    EXPECT_NEAR(loss_instance_branch(0.8, 2.0, 1, w), expected, 1e-9);
    EXPECT_NEAR(expected, 0.45534, 1e-5);
}

TEST(LossInstanceBranch, PseudoTermMinimizedAtSoftTarget) {
    LossWeights w{.use_inst_self = false};
    const double at = loss_instance_branch(0.5, 0.0, 1, w);
    for (double p : {0.3, 0.45, 0.55, 0.8}) EXPECT_GT(loss_instance_branch(p, 0.0, 1, w), at);
}

TEST(LossInstanceBranch, BatchIsMeanAndValidatesLengths) {
    LossWeights w;
    Tensor p = Tensor::vector({0.8, 0.1, 0.6});
    std::vector<double> a{2.0, -1.0, 0.5};
    std::vector<int> y{1, 0, 1};
    double expected = 0.0;
    for (int j = 0; j < 3; ++j) expected += loss_instance_branch(p[j], a[j], y[j], w) / 3.0;
    EXPECT_NEAR(loss_instance_branch(p, a, y, w).item(), expected, 1e-14);
    EXPECT_THROW(loss_instance_branch(p, {1.0}, y, w), DimensionError);
}

TEST(Losses, FiniteAndNonnegativeEverywhere) {
    std::mt19937_64 gen(71);
    std::uniform_real_distribution<double> u(0.0, 1.0), a(-50.0, 50.0);
    LossWeights w;
    for (int i = 0; i < 2000; ++i) {
        const double p = i % 10 == 0 ? 0.0 : i % 10 == 1 ? 1.0 : u(gen);
        const double q = u(gen);
        for (double v : {bce(p, q), loss_label(p, q, i % 2, 0.7, 0.3), loss_inst(p, {q, u(gen)}),
                         loss_self_bag(p, {q}, 0.7, 0.3, 0.5), loss_attn({a(gen), a(gen)}, i % 2),
                         loss_instance_branch(p, a(gen), i % 2, w)}) {
            EXPECT_TRUE(std::isfinite(v));
            EXPECT_GE(v, 0.0);
        }
    }
}

TEST(Weights, TripartiteRuleWarnsButDoesNotThrow) {
    EXPECT_TRUE(validate(LossWeights{}).empty());
    EXPECT_FALSE(validate(LossWeights{.beta = 0.2, .gamma = 0.3}).empty());
    EXPECT_FALSE(validate(LossWeights{.beta = 2.0, .gamma = 0.5}).empty());
    EXPECT_FALSE(validate(LossWeights{.beta = 0.5, .gamma = 2.0}).empty());
    EXPECT_TRUE(validate(LossWeights{.beta = 0.2, .gamma = 0.3, .use_self = false}).empty());
    EXPECT_THROW(validate(LossWeights{.beta = -1.0}), ConfigError);
    EXPECT_THROW(validate(LossWeights{.c1 = 0.0, .c2 = 0.0}), ConfigError);
    EXPECT_THROW(validate(LossWeights{.t = 1.0}), ConfigError);
}

namespace {

std::vector<std::vector<double>> grads_of(const ModelState& s) {
    std::vector<std::vector<double>> out;
    for (const auto& p : s.parameters()) out.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    return out;
}

}  // namespace

// Disabling a term must match building the loss without it, in value and in every gradient.
TEST(Ablation, FlagOffEqualsTermDeleted) {
    for (auto agg : toy::attention_aggregators()) {
        Bag bag = toy::random_bag(72, 6, 8, 1);
        for (int which = 0; which < 3; ++which) {
            LossWeights w;
            if (which == 0) w.use_inst = false;
            if (which == 1) w.use_self = false;
            if (which == 2) w.use_attn = false;

            ModelState a = toy::random_state(73, agg);
            auto out_a = bag_forward(bag, a, {.training = true, .tau = 0.75});
            Tensor la = loss_bag_total(bag_loss_parts(out_a, 1, w), w);
            backward(la);

            ModelState b = toy::random_state(73, agg);
            auto out_b = bag_forward(bag, b, {.training = true, .tau = 0.75});
            LossWeights full;
            BagLossParts parts = bag_loss_parts(out_b, 1, full);
            Tensor lb = parts.label;
            if (which != 0) lb = add(lb, scale(parts.inst, full.beta));
            if (which != 1) lb = add(lb, scale(parts.self, full.gamma));
            if (which != 2) lb = add(lb, scale(parts.attn, full.delta));
            backward(lb);

            EXPECT_EQ(la.item(), lb.item());
            EXPECT_EQ(grads_of(a), grads_of(b)) << to_string(agg) << " term " << which;
        }
    }
}

TEST(Ablation, InstanceSelfFlagOffEqualsTermDeleted) {
    LossWeights off{.use_inst_self = false};
    Tensor p1 = Tensor::vector({0.3, 0.7, 0.55}, true);
    backward(loss_instance_branch(p1, {0.1, 1.0, -0.5}, {1, 1, 0}, off));
    Tensor p2 = Tensor::vector({0.3, 0.7, 0.55}, true);
    std::vector<double> targets{soft_label(0.1, 1), soft_label(1.0, 1), soft_label(-0.5, 0)};
    backward(mean(bce(p2, targets)));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(p1.grad()[j], p2.grad()[j]);
}

TEST(Gradients, FullBagLossEveryAggregator) {
    for (auto agg : toy::attention_aggregators()) {
        for (bool tie : {true, false}) {
            if (!tie && agg != Aggregator::dsmil) continue;
            ModelState s = toy::random_state(74, agg, tie);
            Bag bag = toy::random_bag(75, 6, 8, 1);
            LossWeights w{.inst_target_grad = true};
            auto loss = [&] {
                auto out = bag_forward(bag, s, {.training = true, .tau = 0.75});
                return loss_bag_total(bag_loss_parts(out, bag.label, w), w);
            };
            auto r = oracle::check_gradients(loss, s.parameters());
            EXPECT_LE(r.max_rel_err, 1e-4) << to_string(agg) << ": " << r.worst;
        }
    }
}
