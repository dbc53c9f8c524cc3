#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "deviant/autodiff.hpp"
#include "deviant/vector_ops.hpp"
#include "support/fd_harness.hpp"
#include "support/oracles.hpp"

using namespace deviant;

namespace {

Tensor<float> mat(std::size_t r, std::size_t c, std::vector<float> v) { return Tensor<float>::matrix(r, c, std::move(v)); }

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    Tape<float> t;
    const Var i2 = t.constant(mat(2, 2, {1, 0, 0, 1}));
    const Var b = t.constant(mat(2, 2, {1, 2, 3, 4}));
    EXPECT_EQ(t.value(t.matmul(i2, b)).data, (std::vector<float>{1, 2, 3, 4}));
}

TEST(Matmul, ProjectorRow) {
    Tape<float> t;
    const Var p = t.constant(mat(2, 2, {1, 0, 0, 0}));
    const Var x = t.constant(mat(2, 1, {5, 7}));
    EXPECT_EQ(t.value(t.matmul(p, x)).data, (std::vector<float>{5, 0}));
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> a(12), b(8);
    for (auto& v : a) v = u(rng);
    for (auto& v : b) v = u(rng);
    Tape<float> t;
    const Var va = t.constant(Tensor<float>::matrix(3, 4, std::vector<float>(a.begin(), a.end())));
    const Var vb = t.constant(Tensor<float>::matrix(4, 2, std::vector<float>(b.begin(), b.end())));
    const auto& got = t.value(t.matmul(va, vb));
    // Oracle on the float-rounded inputs.
    std::vector<double> af(got.data.size()), ar(a.size()), br(b.size());
    for (std::size_t i = 0; i < a.size(); ++i) ar[i] = static_cast<float>(a[i]);
    for (std::size_t i = 0; i < b.size(); ++i) br[i] = static_cast<float>(b[i]);
    const auto want = oracle::matmul(ar, br, 3, 4, 2);
    ASSERT_EQ(got.shape, (Shape{3, 2}));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_LT(std::abs(got.data[i] - want[i]), 1e-6);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
    Tape<float> t;
    const Var a = t.constant(Tensor<float>::zeros({2, 3}));
    const Var b = t.constant(Tensor<float>::zeros({2, 3}));
    EXPECT_THROW(t.matmul(a, b), DimensionError);
}

TEST(Softmax, UniformOnEqualLogits) {
    Tape<float> t;
    const auto& y = t.value(t.softmax_lastdim(t.constant(mat(1, 3, {0, 0, 0}))));
    for (float v : y.data) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
}

TEST(Softmax, MaskBiasSaturates) {
    Tape<float> t;
    const Tensor<float> bias = mat(1, 2, {0, -1e9f});
    const auto& y = t.value(t.softmax_lastdim(t.constant(mat(1, 2, {0, 0})), &bias));
    EXPECT_NEAR(y.data[0], 1.0, 1e-6);
    EXPECT_LT(y.data[1], 1e-6);
    EXPECT_EQ(t.masked_rows(), 0u);
}

TEST(Softmax, MatchesDoubleOracle) {
    Tape<float> t;
    const auto& y = t.value(t.softmax_lastdim(t.constant(mat(1, 3, {1, 2, 3}))));
    const auto want = oracle::softmax({1, 2, 3});
    for (std::size_t i = 0; i < 3; ++i) EXPECT_LT(std::abs(y.data[i] - want[i]), 1e-6);
}

TEST(Softmax, FullyMaskedRowIsUniformAndCounted) {
    Tape<float> t;
    const Tensor<float> bias = mat(2, 2, {-1e9f, -1e9f, 0, 0});
    const auto& y = t.value(t.softmax_lastdim(t.constant(mat(2, 2, {0.3f, -0.2f, 1, 2})), &bias));
    EXPECT_NEAR(y.data[0] + y.data[1], 1.0, 1e-6);
    EXPECT_EQ(t.masked_rows(), 1u);
}

TEST(Softmax, RowsSumToOneUnderRandomBias) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-50, 50);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor<float> x = Tensor<float>::zeros({4, 7}), b = Tensor<float>::zeros({4, 7});
        for (auto& v : x.data) v = u(rng);
        for (auto& v : b.data) v = u(rng);
        Tape<float> t;
        const auto& y = t.value(t.softmax_lastdim(t.constant(x), &b));
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < 7; ++c) s += y.at(r, c);
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Gelu, ValuesMatchErfForm) {
    Tape<float> t;
    const auto& y = t.value(t.gelu(t.constant(mat(1, 3, {0, 10, 1}))));
    EXPECT_EQ(y.data[0], 0.0f);
    EXPECT_NEAR(y.data[1], 10.0, 1e-4);
    EXPECT_LT(std::abs(y.data[2] - oracle::gelu(1.0)), 1e-6);
}

TEST(Cosine, Conventions) {
    const std::vector<double> e1 = {1, 0, 0}, e2 = {0, 1, 0}, z = {0, 0, 0};
    EXPECT_EQ(cosine<double>(e1, e1), 1.0);
    EXPECT_EQ(cosine<double>(e1, e2), 0.0);
    EXPECT_EQ(cosine<double>(e1, z), 0.0);
    EXPECT_EQ(cosine_distance<double>(e1, z), 1.0);
}

TEST(Backward, LinearLossGivesBroadcastInput) {
    Tensor<double> w = Tensor<double>::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    w.requires_grad = true;
    w.zero_grad();
    Tape<double> t;
    const Var x = t.constant(Tensor<double>::matrix(3, 1, {0.5, -1, 2}));
    t.backward(t.sum(t.matmul(t.parameter(w), x)));
    EXPECT_EQ(*w.grad, (std::vector<double>{0.5, -1, 2, 0.5, -1, 2}));
}

TEST(Backward, SquaredNormGivesTwoX) {
    Tensor<double> x = Tensor<double>::matrix(1, 3, {1, -2, 3});
    x.requires_grad = true;
    x.zero_grad();
    Tape<double> t;
    const Var v = t.parameter(x);
    t.backward(t.sum(t.mul(v, v)));
    EXPECT_EQ(*x.grad, (std::vector<double>{2, -4, 6}));
}

TEST(Backward, NonScalarLossIsContractError) {
    Tensor<double> x = Tensor<double>::matrix(1, 2, {1, 2});
    x.requires_grad = true;
    Tape<double> t;
    EXPECT_THROW(t.backward(t.parameter(x)), ContractError);
}

TEST(Backward, AccumulatesAcrossTapes) {
    Tensor<double> x = Tensor<double>::matrix(1, 2, {1, 2});
    x.requires_grad = true;
    x.zero_grad();
    for (int i = 0; i < 2; ++i) {
        Tape<double> t;
        t.backward(t.sum(t.parameter(x)));
    }
    EXPECT_EQ(*x.grad, (std::vector<double>{2, 2}));
}

TEST(Backward, ConstantsReceiveNoGradient) {
    Tensor<double> x = Tensor<double>::matrix(1, 2, {1, 2});
    x.requires_grad = true;
    x.zero_grad();
    Tape<double> t;
    const Var c = t.constant(Tensor<double>::matrix(1, 2, {3, 4}));
    t.backward(t.sum(t.mul(t.parameter(x), c)));
    EXPECT_TRUE(t.grad(c).empty());
    EXPECT_FALSE(t.requires_grad(c));
}

TEST(Tape, NonFiniteResultThrows) {
    Tape<float> t;
    const Var x = t.constant(mat(1, 1, {1e30f}));
    EXPECT_THROW(t.mul(x, x), NumericError);
    EXPECT_THROW(t.log(t.constant(mat(1, 1, {-1}))), NumericError);
}

TEST(Tape, TopologicalOrder) {
    Tape<float> t;
    const Var a = t.constant(mat(1, 2, {1, 2}));
    const Var b = t.gelu(t.add(a, a));
    const Var c = t.sum(b);
    for (std::size_t id = 0; id < t.size(); ++id)
        for (const std::size_t in : t.inputs(Var{id})) EXPECT_LT(in, id);
    EXPECT_EQ(t.op_name(c), "sum");
}

TEST(Tape, DeterministicAcrossRuns) {
    auto run = [] {
        std::mt19937_64 rng(5);
        auto x = fd::random_tensor(rng, 4, 6);
        x.requires_grad = true;
        x.zero_grad();
        Tape<double> t;
        const Var v = t.parameter(x);
        const Var y = t.softmax_lastdim(t.gelu(t.matmul(v, t.transpose(v))));
        t.backward(t.sum(t.mul(y, y)));
        return std::make_pair(t.value(y).data, *x.grad);
    };
    EXPECT_EQ(run(), run());
}

TEST(Tape, ClampAndTopkGradientSupport) {
    Tensor<double> x = Tensor<double>::matrix(1, 4, {-2, 0.5, 0.2, 3});
    x.requires_grad = true;
    x.zero_grad();
    Tape<double> t;
    t.backward(t.sum(t.clamp(t.parameter(x), 0, 1)));
    EXPECT_EQ(*x.grad, (std::vector<double>{0, 1, 1, 0}));
    x.zero_grad();
    Tape<double> t2;
    t2.backward(t2.topk_mean(t2.parameter(x), 2));
    EXPECT_EQ(*x.grad, (std::vector<double>{0, 0.5, 0, 0.5}));
}

TEST(Tape, SafeReciprocalZeroesTinyEntries) {
    Tensor<double> x = Tensor<double>::matrix(1, 2, {0.0, 4.0});
    x.requires_grad = true;
    x.zero_grad();
    Tape<double> t;
    const Var r = t.safe_reciprocal(t.parameter(x), 1e-12);
    EXPECT_EQ(t.value(r).data, (std::vector<double>{0.0, 0.25}));
    t.backward(t.sum(r));
    EXPECT_EQ((*x.grad)[0], 0.0);
    EXPECT_DOUBLE_EQ((*x.grad)[1], -1.0 / 16.0);
}

// Central differences at 64-bit for every op, 20 random instances each.
TEST(GradientCheck, EveryOpWithinTolerance) {
    for (const auto& r : fd::run_suite(20, 2024)) {
        EXPECT_GE(r.instances, 20) << r.op;
        EXPECT_LT(r.max_rel_err, 1e-5) << r.op;
    }
}

// The 32-bit tape against 64-bit differences of the same graph.
TEST(GradientCheck, SinglePrecisionWithinLooseTolerance) {
    std::mt19937_64 rng(8);
    auto xd = fd::random_tensor(rng, 3, 4);
    auto wd = fd::random_tensor(rng, 4, 2);
    Tensor<float> x = xd.cast<float>(), w = wd.cast<float>();
    w.requires_grad = true;
    w.zero_grad();
    Tape<float> t;
    t.backward(t.sum(t.gelu(t.matmul(t.constant(x), t.parameter(w)))));
    auto f = [&](const Tensor<double>& ww) {
        Tape<double> td;
        return td.value(td.sum(td.gelu(td.matmul(td.constant(x.cast<double>()), td.constant(ww))))).data[0];
    };
    for (std::size_t i = 0; i < wd.numel(); ++i) {
        auto up = w.cast<double>(), dn = w.cast<double>();
        up.data[i] += 1e-3;
        dn.data[i] -= 1e-3;
        const double num = (f(up) - f(dn)) / 2e-3;
        EXPECT_LT(std::abs((*w.grad)[i] - num), 1e-3 * std::max(1.0, std::abs(num)));
    }
}
