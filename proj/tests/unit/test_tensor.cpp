#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/oracles.hpp"

using namespace dualmil;

namespace {

std::vector<NamedParam> one(const Tensor& t, const char* name = "x") { return {{name, t}}; }

}  // namespace

TEST(Tensor, ShapeMustMatchValues) {
    EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError);
    EXPECT_NO_THROW(Tensor({2, 2}, {1, 2, 3, 4}));
}

TEST(Tensor, RejectsNonFiniteConstruction) {
    EXPECT_THROW(Tensor::vector({1.0, std::nan("")}), NumericError);
    EXPECT_THROW(Tensor::scalar(INFINITY), NumericError);
}

TEST(Tensor, GradPresentIffRequiresGrad) {
    Tensor a = Tensor::vector({1, 2}, true);
    Tensor b = Tensor::vector({1, 2});
    EXPECT_EQ(a.grad().size(), 2u);
    EXPECT_EQ(b.grad().size(), 0u);
}

TEST(Matmul, IdentityAndHandSum) {
    Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor x = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    Tensor y = matmul(eye, x);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], x[i]);

    Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor ones = Tensor::matrix(2, 1, {1, 1});
    Tensor c = matmul(a, ones);
    EXPECT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_EQ(c[0], 3.0);
    EXPECT_EQ(c[1], 7.0);
}

TEST(Matmul, ShapeMismatch) {
    EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifference) {
    std::mt19937_64 gen(1);
    Tensor a = oracle::random_tensor(gen, {3, 4});
    Tensor b = oracle::random_tensor(gen, {4, 2});
    Tensor w = oracle::random_tensor(gen, {3, 2}, -1, 1, false);
    auto loss = [&] { return sum(mul(matmul(a, b), w)); };
    auto r = oracle::check_gradients(loss, {{"a", a}, {"b", b}});
    EXPECT_LE(r.max_rel_err, 1e-6) << r.worst;
}

TEST(Linear, MatchesMatmulWithTransposedWeight) {
    std::mt19937_64 gen(2);
    Tensor x = oracle::random_tensor(gen, {5, 3});
    Tensor w = oracle::random_tensor(gen, {4, 3});
    Tensor b = oracle::random_tensor(gen, {4});
    Tensor y = linear(x, w, b);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t o = 0; o < 4; ++o) {
            double ref = b[o];
            for (std::size_t p = 0; p < 3; ++p) ref += x.at(i, p) * w.at(o, p);
            EXPECT_NEAR(y.at(i, o), ref, 1e-14);
        }
    Tensor mask = oracle::random_tensor(gen, {5, 4}, -1, 1, false);
    auto loss = [&] { return sum(mul(linear(x, w, b), mask)); };
    auto r = oracle::check_gradients(loss, {{"x", x}, {"w", w}, {"b", b}});
    EXPECT_LE(r.max_rel_err, 1e-6) << r.worst;
}

TEST(Sigmoid, ValuesAndSaturation) {
    EXPECT_EQ(sigmoid(0.0), 0.5);
    EXPECT_NEAR(sigmoid(1000.0), 1.0, 1e-12);
    EXPECT_NEAR(sigmoid(-1000.0), 0.0, 1e-12);
    Tensor s = sigmoid(Tensor::vector({-1000, 0, 1000}));
    EXPECT_NEAR(s[0], 0.0, 1e-12);
    EXPECT_EQ(s[1], 0.5);
    EXPECT_NEAR(s[2], 1.0, 1e-12);
}

TEST(Sigmoid, GradientAtPointThree) {
    Tensor x = Tensor::vector({0.3}, true);
    auto r = oracle::check_gradients([&] { return sum(sigmoid(x)); }, one(x));
    EXPECT_LE(r.max_rel_err, 1e-6) << r.worst;
}

TEST(Softmax, UniformSingletonAndSum) {
    Tensor u = softmax(Tensor::vector({3.5, 3.5, 3.5, 3.5}));
    for (double v : u.values()) EXPECT_DOUBLE_EQ(v, 0.25);
    Tensor s = softmax(Tensor::vector({0}));
    EXPECT_EQ(s[0], 1.0);
    EXPECT_THROW(softmax(Tensor::vector({})), DimensionError);

    std::mt19937_64 gen(3);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = oracle::random_tensor(gen, {7}, -1000, 1000, false);
        Tensor p = softmax(x);
        double total = 0.0;
        for (double v : p.values()) {
            EXPECT_GT(v, 0.0 - 1e-300);
            EXPECT_LE(v, 1.0);
            total += v;
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(Softmax, GradientMatchesFiniteDifference) {
    std::mt19937_64 gen(4);
    Tensor x = oracle::random_tensor(gen, {6});
    Tensor w = oracle::random_tensor(gen, {6}, -1, 1, false);
    auto r = oracle::check_gradients([&] { return sum(mul(softmax(x), w)); }, one(x));
    EXPECT_LE(r.max_rel_err, 1e-5) << r.worst;
}

TEST(ReduceMax, ValueIndexAndTieBreak) {
    auto a = reduce_max(Tensor::vector({3, 1, 2}));
    EXPECT_EQ(a.value.item(), 3.0);
    EXPECT_EQ(a.index, 0u);
    auto b = reduce_max(Tensor::vector({5, 5, 1}));
    EXPECT_EQ(b.value.item(), 5.0);
    EXPECT_EQ(b.index, 0u);
    EXPECT_THROW(reduce_max(Tensor::vector({})), DimensionError);
}

TEST(ReduceMax, SubgradientAwayFromTies) {
    Tensor x = Tensor::vector({0.1, 0.9, -0.4, 0.5}, true);
    auto r = oracle::check_gradients([&] { return scale(reduce_max(x).value, 2.0); }, one(x));
    EXPECT_LE(r.max_rel_err, 1e-6) << r.worst;
    EXPECT_EQ(x.grad()[1], 2.0);
    EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Elementwise, BasicValues) {
    EXPECT_EQ(tanh(Tensor::scalar(0.0)).item(), 0.0);
    EXPECT_EQ(clamp(Tensor::scalar(1.5), 0.0, 1.0).item(), 1.0);
    EXPECT_THROW(log(Tensor::scalar(0.0)), DomainError);
    EXPECT_THROW(log(Tensor::scalar(-1.0)), DomainError);
    for (double x = 1e-7 + 1e-9; x < 1.0; x += 0.0137) {
        EXPECT_NEAR(exp(log(Tensor::scalar(x))).item(), x, 1e-12);
    }
    Tensor a = Tensor::vector({1, 2});
    Tensor b = Tensor::vector({3, 5});
    EXPECT_EQ(add(a, b)[1], 7.0);
    EXPECT_EQ(sub(a, b)[0], -2.0);
    EXPECT_EQ(mul(a, b)[1], 10.0);
    EXPECT_EQ(scale(a, 3.0)[1], 6.0);
    EXPECT_THROW(add(a, Tensor::vector({1, 2, 3})), DimensionError);
}

TEST(Elementwise, GradientsMatchFiniteDifference) {
    std::mt19937_64 gen(5);
    Tensor x = oracle::random_tensor(gen, {8});
    Tensor y = oracle::random_tensor(gen, {8});
    Tensor pos = oracle::random_tensor(gen, {8}, 0.1, 1.0);
    auto loss = [&] {
        Tensor t = add(mul(tanh(x), exp(y)), log(pos));
        t = sub(t, scale(clamp(x, -0.5, 0.5), 0.7));
        t = add(t, one_minus(sigmoid(add_scalar(y, 0.2))));
        return mean(mul(t, relu(add_scalar(x, 0.05))));
    };
    auto r = oracle::check_gradients(loss, {{"x", x}, {"y", y}, {"pos", pos}});
    EXPECT_LE(r.max_rel_err, 1e-6) << r.worst;
}

TEST(Views, SelectRowReshapeConcatGradients) {
    std::mt19937_64 gen(6);
    Tensor m = oracle::random_tensor(gen, {3, 4});
    Tensor v = oracle::random_tensor(gen, {2});
    auto loss = [&] {
        Tensor r = row(m, 1);
        Tensor c = concat({r, v, reshape(m, {12})});
        return add(sum(mul(c, c)), select(c, 3));
    };
    auto r = oracle::check_gradients(loss, {{"m", m}, {"v", v}});
    EXPECT_LE(r.max_rel_err, 1e-6) << r.worst;
}

TEST(Backward, SumAndSquare) {
    Tensor x = Tensor::vector({1.5, -2.0, 0.25}, true);
    backward(sum(x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
    x.zero_grad();
    backward(sum(mul(x, x)));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Backward, ReuseAccumulates) {
    Tensor x = Tensor::scalar(3.0, true);
    backward(add(x, x));
    EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, NonScalarLossIsContractError) {
    Tensor x = Tensor::vector({1, 2}, true);
    EXPECT_THROW(backward(x), ContractError);
}

TEST(Tape, TopologicalOrderAndSingleVisit) {
    Tensor x = Tensor::vector({0.2, 0.4}, true);
    Tensor h = tanh(x);
    Tensor loss = sum(add(mul(h, h), h));
    Tape tape = Tape::record(loss);
    const auto nodes = tape.nodes();
    std::set<const detail::Node*> seen;
    for (const detail::Node* n : nodes) {
        EXPECT_TRUE(seen.insert(n).second) << "node visited twice";
        for (const auto& p : n->parents) {
            if (p->requires_grad) {
                EXPECT_TRUE(seen.count(p.get())) << "operand after its consumer";
            }
        }
    }
    EXPECT_EQ(nodes.back(), loss.node().get());
    EXPECT_EQ(nodes.size(), 5u);  // x, tanh, mul, add, sum
}

TEST(Tape, NoGradGuardRecordsNothing) {
    Tensor x = Tensor::vector({0.2}, true);
    Tensor y;
    {
        NoGradGuard guard;
        y = sigmoid(x);
    }
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(sigmoid(x).requires_grad());
}

TEST(Numeric, NonFiniteResultIsAnError) {
    EXPECT_THROW(exp(Tensor::scalar(1000.0)), NumericError);
}

TEST(Numeric, NoNanOnLargeInputs) {
    std::mt19937_64 gen(7);
    Tensor x = oracle::random_tensor(gen, {64}, -1e3, 1e3);
    Tensor y = add(softmax(x), add(sigmoid(x), tanh(x)));
    backward(sum(mul(y, y)));
    for (double g : x.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Adam, FirstStepIsLrTimesSign) {
    for (double g : {3.0, -0.02, 1e-3}) {
        Tensor p = Tensor::scalar(0.5, true);
        Adam adam({.lr = 0.01, .weight_decay = 0.0});
        auto group = adam.add_group({p});
        p.mutable_grad()[0] = g;
        adam.step(group);
        const double expected = 0.5 - 0.01 * g / (std::sqrt(g * g) + 1e-8);
        EXPECT_NEAR(p[0], expected, 1e-15);
        EXPECT_NEAR(std::abs(p[0] - 0.5), 0.01, 1e-7);
    }
}

TEST(Adam, ZeroGradientZeroDecayLeavesParameter) {
    Tensor p = Tensor::vector({0.3, -0.7}, true);
    Adam adam({.weight_decay = 0.0});
    auto group = adam.add_group({p});
    for (int i = 0; i < 5; ++i) adam.step(group);
    EXPECT_EQ(p[0], 0.3);
    EXPECT_EQ(p[1], -0.7);
}

TEST(Adam, ThreeStepQuadraticMatchesReference) {
    // f(x) = (x - 2)^2, gradient taken from the autodiff engine each step.
    const AdamConfig cfg{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.01};
    Tensor x = Tensor::scalar(-1.0, true);
    Adam adam(cfg);
    auto group = adam.add_group({x});
    oracle::AdamRef ref{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, {}, {}, 0};
    std::vector<double> xr{-1.0};
    for (int step = 0; step < 3; ++step) {
        x.zero_grad();
        Tensor d = add_scalar(x, -2.0);
        backward(mul(d, d));
        adam.step(group);
        ref.step(xr, {2.0 * (xr[0] - 2.0)});
        EXPECT_NEAR(x[0], xr[0], 1e-12);
    }
    EXPECT_EQ(adam.steps(group), 3);
}

TEST(Adam, SharedParameterKeepsOneMomentPairWithPerGroupCounters) {
    Tensor shared = Tensor::scalar(1.0, true);
    Tensor only_a = Tensor::scalar(1.0, true);
    Adam adam({.lr = 0.1, .weight_decay = 0.0});
    auto a = adam.add_group({shared, only_a});
    auto b = adam.add_group({shared});
    oracle::AdamRef ref_shared{0.1, 0.9, 0.999, 1e-8, 0.0, {}, {}, 0};
    std::vector<double> xs{1.0};

    shared.mutable_grad()[0] = 0.5;
    only_a.mutable_grad()[0] = 0.5;
    adam.step(a);
    ref_shared.step(xs, {0.5});
    EXPECT_NEAR(shared[0], xs[0], 1e-15);

    // Second group: moments continue from the shared slot, bias correction uses group b's count (1).
    shared.mutable_grad()[0] = -0.25;
    adam.step(b);
    ref_shared.m[0] = 0.9 * ref_shared.m[0] + 0.1 * -0.25;
    ref_shared.v[0] = 0.999 * ref_shared.v[0] + 0.001 * 0.0625;
    xs[0] -= 0.1 * (ref_shared.m[0] / 0.1) / (std::sqrt(ref_shared.v[0] / 0.001) + 1e-8);
    EXPECT_NEAR(shared[0], xs[0], 1e-15);
    EXPECT_EQ(adam.steps(a), 1);
    EXPECT_EQ(adam.steps(b), 1);
}
