#include <gtest/gtest.h>

#include "c2v/tensor.hpp"
#include "oracles.hpp"

using namespace c2v;

namespace {

// Compares backward() against finite_diff_grad for f(inputs) -> scalar.
// The output is scalarized with fixed random weights so permutation and
// indexing mistakes cannot cancel out.
void expect_grad_matches(const std::function<Tensor(const std::vector<Tensor>&)>& op,
                         std::vector<Tensor> inputs, uint64_t seed, double tol = 1e-4) {
    Rng rng(seed);
    for (auto& t : inputs) t.set_requires_grad(true);
    Tensor probe_out = op(inputs);
    Tensor weights(probe_out.shape());
    for (size_t i = 0; i < weights.numel(); ++i) weights.data()[i] = rng.uniform(-1.0, 1.0);
    auto scalarize = [&](const std::vector<Tensor>& args) { return sum(mul(op(args), weights)); };

    Tape::active().clear();
    for (auto& t : inputs) t.zero_grad();
    Tensor loss = scalarize(inputs);
    backward(loss);

    for (size_t which = 0; which < inputs.size(); ++which) {
        auto f = [&](const Tensor& x) {
            std::vector<Tensor> args = inputs;
            args[which] = x;
            return scalarize(args).item();
        };
        Tensor fd = finite_diff_grad(f, inputs[which], 1e-5);
        for (size_t i = 0; i < fd.numel(); ++i) {
            double a = inputs[which].grad()[i];
            double b = fd.data()[i];
            double err = std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
            ASSERT_LT(err, tol) << "input " << which << " coord " << i;
        }
    }
}

Tensor rand_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace

TEST(Tensor, ConstructionInvariant) {
    Tensor t({2, 3});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
}

TEST(Matmul, IdentityCase) {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor b({2, 2}, {3, 4, 5, 6});
    Tensor c = matmul(eye, b);
    EXPECT_EQ(c.vec(), b.vec());
}

TEST(Matmul, HandArithmetic) {
    Tensor a({1, 2}, {1, 2});
    Tensor b({2, 1}, {3, 4});
    EXPECT_DOUBLE_EQ(matmul(a, b).item(), 11.0);
}

TEST(Matmul, ZeroAnnihilator) {
    Tensor a({2, 2});
    Rng rng(3);
    Tensor b = rand_tensor({2, 2}, rng);
    Tensor c = matmul(a, b);
    for (double v : c.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    Tensor a({2, 3}), b({2, 3});
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
    }
}

TEST(Matmul, AssociativityOnRandomChains) {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor a = rand_tensor({3, 3}, rng);
        Tensor b = rand_tensor({3, 3}, rng);
        Tensor c = rand_tensor({3, 3}, rng);
        Tensor left = matmul(matmul(a, b), c);
        Tensor right = matmul(a, matmul(b, c));
        for (size_t i = 0; i < 9; ++i) EXPECT_NEAR(left.data()[i], right.data()[i], 1e-9);
    }
}

TEST(Softmax, UniformFromEqualInputs) {
    Tensor x({3}, {0, 0, 0});
    Tensor y = softmax(x, 0);
    for (double v : y.vec()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Softmax, ClosedFormExponentials) {
    Tensor x({3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
    Tensor y = softmax(x, 0);
    EXPECT_NEAR(y.data()[0], 1.0 / 6.0, 1e-12);
    EXPECT_NEAR(y.data()[1], 2.0 / 6.0, 1e-12);
    EXPECT_NEAR(y.data()[2], 3.0 / 6.0, 1e-12);
}

TEST(Softmax, MaxShiftOverflowSafety) {
    Tensor x({2}, {1000.0, 0.0});
    Tensor y = softmax(x, 0);
    EXPECT_TRUE(y.all_finite());
    EXPECT_NEAR(y.data()[0], 1.0, 1e-12);
    EXPECT_NEAR(y.data()[1], 0.0, 1e-12);
}

TEST(Softmax, RowsSumToOne) {
    Rng rng(5);
    Tensor x = rand_tensor({4, 7}, rng, -30, 30);
    Tensor y = softmax(x, 1);
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += y.data()[r * 7 + j];
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(KlDiv, IdenticalDistributionsAreZero) {
    Tensor p({2}, {0.5, 0.5});
    EXPECT_DOUBLE_EQ(kl_div(p, p).item(), 0.0);
}

TEST(KlDiv, HighPrecisionScalarCase) {
    Tensor p({2}, {0.5, 0.5});
    Tensor q({2}, {0.25, 0.75});
    double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    EXPECT_NEAR(expected, 0.14384103622589045, 1e-15);  // frozen value
    EXPECT_NEAR(kl_div(p, q).item(), expected, 1e-12);
    EXPECT_NEAR(kl_div(p, q).item(), oracle::kl_rows(p.vec(), q.vec(), 2), 1e-12);
}

TEST(KlDiv, DegenerateMassNoNan) {
    Tensor p({2}, {1.0, 0.0});
    double v = kl_div(p, p).item();
    EXPECT_EQ(v, 0.0);
    EXPECT_TRUE(std::isfinite(v));
}

TEST(KlDiv, RejectsUnnormalizedInput) {
    Tensor p({2}, {0.6, 0.6});
    Tensor q({2}, {0.5, 0.5});
    EXPECT_THROW(kl_div(p, q), ValueError);
    EXPECT_THROW(kl_div(q, p), ValueError);
    Tensor neg({2}, {1.5, -0.5});
    EXPECT_THROW(kl_div(neg, q), ValueError);
}

TEST(KlDiv, ShapeMismatch) {
    Tensor p({2}, {0.5, 0.5});
    Tensor q({3}, {0.3, 0.3, 0.4});
    EXPECT_THROW(kl_div(p, q), ShapeError);
}

TEST(KlDiv, NonNegativeAndZeroAtSelfOnRandomPairs) {
    Rng rng(17);
    for (int trial = 0; trial < 1000; ++trial) {
        int n = rng.uniform_int(2, 6);
        Tensor logits_p = rand_tensor({1, n}, rng, -4, 4);
        Tensor logits_q = rand_tensor({1, n}, rng, -4, 4);
        Tensor p = softmax(logits_p, 1);
        Tensor q = softmax(logits_q, 1);
        EXPECT_GE(kl_div(p, q).item(), 0.0);
        EXPECT_LT(std::abs(kl_div(p, p).item()), 1e-10);
    }
}

TEST(KlDiv, MatchesOracleOnTinyInstances) {
    Rng rng(23);
    for (int trial = 0; trial < 25; ++trial) {
        int n = rng.uniform_int(2, 4);
        int rows = rng.uniform_int(1, 2);
        Tensor p = softmax(rand_tensor({rows, n}, rng, -3, 3), 1);
        Tensor q = softmax(rand_tensor({rows, n}, rng, -3, 3), 1);
        EXPECT_NEAR(kl_div(p, q).item(), oracle::kl_rows(p.vec(), q.vec(), n), 1e-9);
    }
}

TEST(Backward, LinearCase) {
    Tensor x({3}, {1, 2, 3});
    x.set_requires_grad(true);
    backward(sum(x));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, AnalyticDerivativeOfSquares) {
    Tensor x({3}, {1, 2, 3});
    x.set_requires_grad(true);
    backward(sum(mul(x, x)));
    EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 6.0);
}

TEST(Backward, KlAtMinimumHasVanishingGradient) {
    Tensor q({3}, {0.2, 0.3, 0.5});
    Tensor x({1, 3}, {std::log(0.2), std::log(0.3), std::log(0.5)});
    x.set_requires_grad(true);
    Tensor loss = kl_div(softmax(x, 1), reshape(q, {1, 3}));
    backward(loss);
    for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(Backward, RequiresScalarLoss) {
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor y = mul(x, x);
    EXPECT_THROW(backward(y), ValueError);
    Tape::active().clear();
}

TEST(Backward, TapeClearedAfterRun) {
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    backward(sum(x));
    EXPECT_EQ(Tape::active().size(), 0u);
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    backward(sum(x));
    backward(sum(x));
    for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(NoGrad, SuppressesRecording) {
    Tensor x({2}, {1, 2});
    x.set_requires_grad(true);
    {
        NoGradGuard ng;
        Tensor y = mul(x, x);
        EXPECT_FALSE(y.requires_grad());
    }
    EXPECT_EQ(Tape::active().size(), 0u);
}

TEST(FiniteDiff, SumGivesOnes) {
    Rng rng(2);
    Tensor x = rand_tensor({4}, rng);
    Tensor g = finite_diff_grad([](const Tensor& t) { return sum(t).item(); }, x, 1e-5);
    for (size_t i = 0; i < g.numel(); ++i) EXPECT_NEAR(g.data()[i], 1.0, 1e-8);
}

TEST(FiniteDiff, QuadraticDerivative) {
    Tensor x({2}, {1, 2});
    Tensor g = finite_diff_grad([](const Tensor& t) { return sum(mul(t, t)).item(); }, x, 1e-5);
    EXPECT_NEAR(g.data()[0], 2.0, 1e-6);
    EXPECT_NEAR(g.data()[1], 4.0, 1e-6);
}

TEST(FiniteDiff, RejectsNonPositiveEps) {
    Tensor x({1}, {1.0});
    EXPECT_THROW(finite_diff_grad([](const Tensor& t) { return sum(t).item(); }, x, 0.0),
                 ValueError);
}

// Every differentiable operation against the finite-difference oracle.

TEST(GradCheck, ElementwiseArithmetic) {
    Rng rng(31);
    Tensor a = rand_tensor({3, 4}, rng);
    Tensor b = rand_tensor({3, 4}, rng, 0.5, 2.0);
    expect_grad_matches([](const std::vector<Tensor>& v) { return add(v[0], v[1]); }, {a, b}, 1);
    expect_grad_matches([](const std::vector<Tensor>& v) { return sub(v[0], v[1]); }, {a, b}, 2);
    expect_grad_matches([](const std::vector<Tensor>& v) { return mul(v[0], v[1]); }, {a, b}, 3);
    expect_grad_matches([](const std::vector<Tensor>& v) { return divide(v[0], v[1]); }, {a, b}, 4);
    expect_grad_matches([](const std::vector<Tensor>& v) { return mul_scalar(v[0], -1.7); }, {a}, 5);
    expect_grad_matches([](const std::vector<Tensor>& v) { return add_scalar(v[0], 0.3); }, {a}, 6);
    expect_grad_matches([](const std::vector<Tensor>& v) { return sub_from_scalar(1.0, v[0]); },
                        {a}, 7);
}

TEST(GradCheck, ElementwiseFunctions) {
    Rng rng(37);
    Tensor pos = rand_tensor({2, 5}, rng, 0.2, 3.0);
    Tensor any = rand_tensor({2, 5}, rng, -2.0, 2.0);
    // keep relu inputs away from the kink
    Tensor off = rand_tensor({2, 5}, rng, 0.2, 1.0);
    for (size_t i = 0; i < off.numel(); ++i)
        if (i % 2 == 0) off.data()[i] = -off.data()[i];
    expect_grad_matches([](const std::vector<Tensor>& v) { return log(v[0]); }, {pos}, 1);
    expect_grad_matches([](const std::vector<Tensor>& v) { return exp(v[0]); }, {any}, 2);
    expect_grad_matches([](const std::vector<Tensor>& v) { return sqrt(v[0]); }, {pos}, 3);
    expect_grad_matches([](const std::vector<Tensor>& v) { return relu(v[0]); }, {off}, 4);
    expect_grad_matches([](const std::vector<Tensor>& v) { return gelu(v[0]); }, {any}, 5);
}

TEST(GradCheck, BroadcastVariants) {
    Rng rng(41);
    Tensor x = rand_tensor({2, 3, 4}, rng);
    Tensor bias = rand_tensor({4}, rng);
    Tensor pos = rand_tensor({3, 4}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return add_bias(v[0], v[1]); },
                        {x, bias}, 1);
    expect_grad_matches([](const std::vector<Tensor>& v) { return add_tokens(v[0], v[1]); },
                        {x, pos}, 2);
    expect_grad_matches([](const std::vector<Tensor>& v) { return l2_normalize_rows(v[0]); }, {x},
                        3);
}

TEST(GradCheck, ShapeMovement) {
    Rng rng(43);
    Tensor x = rand_tensor({2, 3, 4}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return reshape(v[0], {6, 4}); }, {x}, 1);
    expect_grad_matches([](const std::vector<Tensor>& v) { return transpose_last2(v[0]); }, {x}, 2);
    expect_grad_matches([](const std::vector<Tensor>& v) { return narrow(v[0], 1, 1, 2); }, {x}, 3);
    Tensor y = rand_tensor({2, 2, 4}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return concat({v[0], v[1]}, 1); },
                        {x, y}, 4);
    Tensor img = rand_tensor({2, 3, 4, 4}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return patch_partition(v[0], 2); },
                        {img}, 5);
    Tensor tok = rand_tensor({2, 4, 12}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return patch_reverse(v[0], 2, 4, 4); },
                        {tok}, 6);
}

TEST(GradCheck, LinearAlgebra) {
    Rng rng(47);
    Tensor a = rand_tensor({3, 4}, rng);
    Tensor b = rand_tensor({4, 5}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return matmul(v[0], v[1]); }, {a, b}, 1);
    Tensor ba = rand_tensor({2, 3, 4}, rng);
    Tensor bb = rand_tensor({2, 4, 5}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return bmm(v[0], v[1]); }, {ba, bb}, 2);
    Tensor w = rand_tensor({4, 5}, rng);
    Tensor bias = rand_tensor({5}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return linear(v[0], v[1], v[2]); },
                        {ba, w, bias}, 3);
}

TEST(GradCheck, Reductions) {
    Rng rng(53);
    Tensor x = rand_tensor({2, 3, 4}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return sum(v[0]); }, {x}, 1);
    expect_grad_matches([](const std::vector<Tensor>& v) { return mean(v[0]); }, {x}, 2);
    expect_grad_matches([](const std::vector<Tensor>& v) { return sum_axis(v[0], 1); }, {x}, 3);
    expect_grad_matches([](const std::vector<Tensor>& v) { return global_avg_pool(v[0]); }, {x}, 4);
    Tensor img = rand_tensor({2, 3, 4, 4}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return global_avg_pool(v[0]); }, {img},
                        5);
}

TEST(GradCheck, SoftmaxAndKl) {
    Rng rng(59);
    Tensor x = rand_tensor({2, 3, 4}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return softmax(v[0], 2); }, {x}, 1);
    expect_grad_matches([](const std::vector<Tensor>& v) { return softmax(v[0], 1); }, {x}, 2);
    Tensor logits_p = rand_tensor({3, 4}, rng);
    Tensor logits_q = rand_tensor({3, 4}, rng);
    expect_grad_matches(
        [](const std::vector<Tensor>& v) { return kl_div(softmax(v[0], 1), softmax(v[1], 1)); },
        {logits_p, logits_q}, 3);
}

TEST(GradCheck, NormalizationAndConv) {
    Rng rng(61);
    Tensor x = rand_tensor({3, 5}, rng);
    Tensor gamma = rand_tensor({5}, rng, 0.5, 1.5);
    Tensor beta = rand_tensor({5}, rng);
    expect_grad_matches([](const std::vector<Tensor>& v) { return layer_norm(v[0], v[1], v[2]); },
                        {x, gamma, beta}, 1);
    Tensor img = rand_tensor({2, 2, 6, 6}, rng);
    Tensor w3 = rand_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor b3 = rand_tensor({3}, rng);
    expect_grad_matches(
        [](const std::vector<Tensor>& v) { return conv2d(v[0], v[1], v[2], 1, 1); },
        {img, w3, b3}, 2);
    expect_grad_matches(
        [](const std::vector<Tensor>& v) { return conv2d(v[0], v[1], v[2], 2, 1); },
        {img, w3, b3}, 3);
    Tensor w1 = rand_tensor({3, 2, 1, 1}, rng);
    expect_grad_matches(
        [](const std::vector<Tensor>& v) { return conv2d(v[0], v[1], v[2], 1, 0); },
        {img, w1, b3}, 4);
    expect_grad_matches([](const std::vector<Tensor>& v) { return avg_pool2d(v[0], 2); }, {img}, 5);
    expect_grad_matches([](const std::vector<Tensor>& v) { return bilinear_resize(v[0], 12, 12); },
                        {img}, 6);
    expect_grad_matches([](const std::vector<Tensor>& v) { return bilinear_resize(v[0], 3, 3); },
                        {img}, 7);
}

TEST(PatchOps, RoundTripIsIdentity) {
    Rng rng(67);
    Tensor img = rand_tensor({2, 3, 8, 8}, rng);
    Tensor back = patch_reverse(patch_partition(img, 4), 4, 8, 8);
    EXPECT_EQ(back.vec(), img.vec());
}

TEST(PatchOps, DivisibilityError) {
    Tensor img({1, 1, 6, 6});
    EXPECT_THROW(patch_partition(img, 4), ShapeError);
}
