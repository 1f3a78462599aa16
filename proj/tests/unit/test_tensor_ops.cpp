#include "stainseg/gradcheck.hpp"
#include "stainseg/ops.hpp"
#include "stainseg/optim.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace stainseg;
namespace o = stainseg::ops;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.data())
        v = u(rng);
    return t;
}

// Direct-summation reference for a zero-padded stride-1 cross-correlation.
double conv_reference(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t pad, std::size_t n,
                      std::size_t co, std::size_t oy, std::size_t ox)
{
    const auto cin = x.dim(1), h = x.dim(2), wd = x.dim(3), kh = w.dim(2), kw = w.dim(3);
    double s = b[co];
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(oy + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd))
                    continue;
                s += x[((n * cin + c) * h + iy) * wd + ix] * w[((co * cin + c) * kh + i) * kw + j];
            }
    return s;
}

} // namespace

TEST(Conv2d, IdentityKernel)
{
    Tensor x = random_tensor({1, 1, 3, 3}, 1);
    Tensor w({1, 1, 1, 1}, 1.0);
    Tensor b({1}, 0.0);
    Tensor y = o::conv2d(nullptr, x, w, b, 0);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i)
        EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, AllOnesCenterIsNine)
{
    Tensor x({1, 1, 3, 3}, 1.0);
    Tensor w({1, 1, 3, 3}, 1.0);
    Tensor b({1}, 0.0);
    Tensor y = o::conv2d(nullptr, x, w, b, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    EXPECT_DOUBLE_EQ(y[4], conv_reference(x, w, b, 1, 0, 0, 1, 1));
    EXPECT_DOUBLE_EQ(y[4], 9.0);
    EXPECT_DOUBLE_EQ(y[0], 4.0);
}

TEST(Conv2d, SixPointwiseFilters)
{
    Tensor y = o::conv2d(nullptr, random_tensor({1, 3, 2, 2}, 2), random_tensor({6, 3, 1, 1}, 3), Tensor({6}), 0);
    EXPECT_EQ(y.shape(), (Shape{1, 6, 2, 2}));
}

TEST(Conv2d, MatchesDirectSummation)
{
    Tensor x = random_tensor({2, 3, 5, 4}, 4);
    Tensor w = random_tensor({2, 3, 3, 3}, 5);
    Tensor b = random_tensor({2}, 6);
    for (std::size_t pad : {0u, 1u, 2u}) {
        Tensor y = o::conv2d(nullptr, x, w, b, pad);
        ASSERT_EQ(y.dim(2), 5 + 2 * pad - 2);
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t co = 0; co < 2; ++co)
                for (std::size_t i = 0; i < y.dim(2); ++i)
                    for (std::size_t j = 0; j < y.dim(3); ++j)
                        EXPECT_NEAR(y[((n * 2 + co) * y.dim(2) + i) * y.dim(3) + j],
                                    conv_reference(x, w, b, pad, n, co, i, j), 1e-12);
    }
}

TEST(Conv2d, RejectsChannelMismatch)
{
    try {
        o::conv2d(nullptr, Tensor({1, 3, 4, 4}), Tensor({2, 4, 3, 3}), Tensor({2}), 1);
        FAIL() << "expected rejection";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("3 channels"), std::string::npos) << e.what();
    }
}

TEST(Conv2d, GradientMatchesFiniteDifferences)
{
    std::vector<Tensor> wrt{random_tensor({2, 2, 4, 5}, 7), random_tensor({3, 2, 3, 3}, 8), random_tensor({3}, 9)};
    Tensor probe = random_tensor({2, 3, 4, 5}, 10);
    auto res = grad_check(
        [&](Tape* t) { return o::sum(t, o::mul(t, o::conv2d(t, wrt[0], wrt[1], wrt[2], 1), probe)); }, wrt);
    EXPECT_LT(res.max_relative_error, 1e-6);
    EXPECT_EQ(res.checked, 80u + 54u + 3u);
}

TEST(Conv2d, PointwiseIsLinearLayerExactGradient)
{
    std::vector<Tensor> wrt{random_tensor({1, 4, 3, 3}, 11), random_tensor({2, 4, 1, 1}, 12), random_tensor({2}, 13)};
    Tensor probe = random_tensor({1, 2, 3, 3}, 14);
    auto res = grad_check(
        [&](Tape* t) { return o::sum(t, o::mul(t, o::conv2d(t, wrt[0], wrt[1], wrt[2], 0), probe)); }, wrt);
    EXPECT_LT(res.max_relative_error, 1e-9);
}

TEST(ConvTranspose2d, SinglePixelBroadcast)
{
    Tensor x({1, 1, 1, 1}, 0.7);
    Tensor y = o::conv_transpose2d(nullptr, x, Tensor({1, 1, 2, 2}, 1.0), Tensor({1}, 0.0));
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (double v : y.data())
        EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(ConvTranspose2d, DoublesSpatialDims)
{
    Tensor y = o::conv_transpose2d(nullptr, Tensor({1, 1, 2, 2}, 1.0), Tensor({1, 1, 2, 2}, 1.0), Tensor({1}));
    EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
}

TEST(ConvTranspose2d, GradientMatchesFiniteDifferences)
{
    std::vector<Tensor> wrt{random_tensor({1, 2, 3, 3}, 15), random_tensor({2, 3, 2, 2}, 16), random_tensor({3}, 17)};
    Tensor probe = random_tensor({1, 3, 6, 6}, 18);
    auto res = grad_check(
        [&](Tape* t) { return o::sum(t, o::mul(t, o::conv_transpose2d(t, wrt[0], wrt[1], wrt[2]), probe)); }, wrt);
    EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(MaxPool2, BlockMaximum)
{
    Tensor x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    EXPECT_EQ(o::maxpool2(nullptr, x).item(), 4.0);
    Tensor pooled = o::maxpool2(nullptr, Tensor({1, 2, 4, 4}, 2.5));
    for (double v : pooled.data())
        EXPECT_EQ(v, 2.5);
}

TEST(MaxPool2, TieRoutesGradientToFirstElement)
{
    Tensor x({1, 1, 2, 2}, std::vector<double>{5, 5, 0, 0}, true);
    Tape tape;
    tape.backward(o::sum(&tape, o::maxpool2(&tape, x)));
    const std::vector<double> expected{1, 0, 0, 0};
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_EQ(x.grad()[i], expected[i]);
}

TEST(MaxPool2, RejectsOddDims)
{
    EXPECT_THROW(o::maxpool2(nullptr, Tensor({1, 1, 3, 2})), std::invalid_argument);
}

TEST(MaxPool2, GradientMatchesFiniteDifferences)
{
    std::vector<Tensor> wrt{random_tensor({2, 2, 4, 4}, 19)};
    Tensor probe = random_tensor({2, 2, 2, 2}, 20);
    auto res = grad_check([&](Tape* t) { return o::sum(t, o::mul(t, o::maxpool2(t, wrt[0]), probe)); }, wrt);
    EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(Relu, Elementwise)
{
    Tensor y = o::relu(nullptr, Tensor({3}, std::vector<double>{-1, 0, 2}));
    EXPECT_EQ(y[0], 0.0);
    EXPECT_EQ(y[1], 0.0);
    EXPECT_EQ(y[2], 2.0);
}

TEST(Relu, AllNegativeGivesZeroGradient)
{
    Tensor x = random_tensor({2, 5}, 21, -2.0, -0.1);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = o::relu(&tape, x);
    tape.backward(o::sum(&tape, y));
    for (std::size_t i = 0; i < x.numel(); ++i) {
        EXPECT_EQ(y[i], 0.0);
        EXPECT_EQ(x.grad()[i], 0.0);
    }
}

TEST(Relu, GradientAwayFromKink)
{
    std::vector<Tensor> wrt{random_tensor({3, 4, 4}, 22)};
    Tensor probe = random_tensor({3, 4, 4}, 23);
    GradCheckOptions opt;
    opt.exclude_below = 1e-3;
    auto res = grad_check([&](Tape* t) { return o::sum(t, o::mul(t, o::relu(t, wrt[0]), probe)); }, wrt, opt);
    EXPECT_LT(res.max_relative_error, 1e-6);
    EXPECT_GT(res.checked, 40u);
}

TEST(BatchNorm, ConstantInputGivesBeta)
{
    o::BatchNormState st(2);
    Tensor y = o::batchnorm(nullptr, Tensor({2, 2, 3, 3}, 0.8), Tensor({2}, std::vector<double>{3.0, -2.0}),
                            Tensor({2}, std::vector<double>{0.25, -1.5}), st, o::Mode::train);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t k = 0; k < 9; ++k) {
            EXPECT_DOUBLE_EQ(y[(n * 2 + 0) * 9 + k], 0.25);
            EXPECT_DOUBLE_EQ(y[(n * 2 + 1) * 9 + k], -1.5);
        }
}

TEST(BatchNorm, StandardizedInputPassesThrough)
{
    // Four values per channel with mean 0 and biased variance 1.
    Tensor x({1, 1, 2, 2}, std::vector<double>{-1, 1, -1, 1});
    o::BatchNormState st(1);
    Tensor y = o::batchnorm(nullptr, x, Tensor({1}, 1.0), Tensor({1}, 0.0), st, o::Mode::train);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_NEAR(y[i], x[i], 1e-5);
    EXPECT_NEAR(st.running_mean[0], 0.0, 1e-15);
    EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * 1.0, 1e-15);
}

TEST(BatchNorm, TrainOutputIsStandardized)
{
    Tensor x = random_tensor({3, 2, 4, 4}, 24, -3.0, 5.0);
    o::BatchNormState st(2);
    Tensor y = o::batchnorm(nullptr, x, Tensor({2}, 1.0), Tensor({2}, 0.0), st, o::Mode::train);
    for (std::size_t c = 0; c < 2; ++c) {
        double m = 0, v = 0;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t k = 0; k < 16; ++k)
                m += y[(n * 2 + c) * 16 + k];
        m /= 48;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t k = 0; k < 16; ++k)
                v += std::pow(y[(n * 2 + c) * 16 + k] - m, 2);
        v /= 48;
        EXPECT_LT(std::abs(m), 1e-10);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
}

TEST(BatchNorm, EvalBeforeTrainingUsesUnitStats)
{
    Tensor x = random_tensor({1, 2, 2, 2}, 25);
    o::BatchNormState st(2);
    Tensor y = o::batchnorm(nullptr, x, Tensor({2}, 1.0), Tensor({2}, 0.0), st, o::Mode::eval);
    for (std::size_t i = 0; i < x.numel(); ++i)
        EXPECT_NEAR(y[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, TrainGradientMatchesFiniteDifferences)
{
    std::vector<Tensor> wrt{random_tensor({2, 3, 2, 2}, 26), random_tensor({3}, 27, 0.5, 1.5),
                            random_tensor({3}, 28)};
    Tensor probe = random_tensor({2, 3, 2, 2}, 29);
    o::BatchNormState st(3);
    auto res = grad_check(
        [&](Tape* t) {
            return o::sum(t, o::mul(t, o::batchnorm(t, wrt[0], wrt[1], wrt[2], st, o::Mode::train), probe));
        },
        wrt);
    EXPECT_LT(res.max_relative_error, 1e-5);
}

TEST(BatchNorm, EvalGradientMatchesFiniteDifferences)
{
    std::vector<Tensor> wrt{random_tensor({2, 3, 2, 2}, 30), random_tensor({3}, 31), random_tensor({3}, 32)};
    Tensor probe = random_tensor({2, 3, 2, 2}, 33);
    o::BatchNormState st(3);
    st.running_mean = {0.1, -0.2, 0.3};
    st.running_var = {0.5, 2.0, 1.2};
    auto res = grad_check(
        [&](Tape* t) {
            return o::sum(t, o::mul(t, o::batchnorm(t, wrt[0], wrt[1], wrt[2], st, o::Mode::eval), probe));
        },
        wrt);
    EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(Softmax, UniformLogits)
{
    Tensor p = o::softmax_channels(nullptr, Tensor({1, 4, 1, 1}, 0.0));
    for (double v : p.data())
        EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, DominantLogit)
{
    Tensor p = o::softmax_channels(nullptr, Tensor({1, 4, 1, 1}, std::vector<double>{10, 0, 0, 0}));
    const double e10 = std::exp(10.0);
    EXPECT_NEAR(p[0], e10 / (e10 + 3.0), 1e-15);
    EXPECT_NEAR(p[0], 0.99986, 1e-5);
}

TEST(Softmax, ShiftInvariantAndNormalized)
{
    Tensor x = random_tensor({2, 4, 3, 3}, 34, -20, 20);
    Tensor shifted = x.clone();
    std::mt19937_64 rng(35);
    std::uniform_real_distribution<double> u(-50, 50);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t s = 0; s < 9; ++s) {
            const double c = u(rng);
            for (std::size_t k = 0; k < 4; ++k)
                shifted[(n * 4 + k) * 9 + s] += c;
        }
    Tensor p = o::softmax_channels(nullptr, x);
    Tensor q = o::softmax_channels(nullptr, shifted);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t s = 0; s < 9; ++s) {
            double total = 0;
            for (std::size_t k = 0; k < 4; ++k) {
                const auto i = (n * 4 + k) * 9 + s;
                total += p[i];
                EXPECT_NEAR(p[i], q[i], 1e-12);
                EXPECT_GT(p[i], 0.0);
            }
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
}

TEST(Softmax, GradientMatchesFiniteDifferences)
{
    std::vector<Tensor> wrt{random_tensor({2, 4, 2, 3}, 36, -2, 2)};
    Tensor probe = random_tensor({2, 4, 2, 3}, 37);
    auto res =
        grad_check([&](Tape* t) { return o::sum(t, o::mul(t, o::softmax_channels(t, wrt[0]), probe)); }, wrt);
    EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(WeightedCrossEntropy, UniformPredictionIsLn4)
{
    const std::vector<std::uint8_t> labels{0, 1, 2, 3, 3, 2, 1, 0, 0};
    const std::vector<double> w(4, 1.0);
    Tensor p({1, 4, 3, 3}, 0.25);
    EXPECT_NEAR(o::weighted_cross_entropy(nullptr, p, labels, w, 255).item(), std::log(4.0), 1e-12);
}

TEST(WeightedCrossEntropy, PerfectPredictionApproachesZero)
{
    const std::vector<std::uint8_t> labels{0, 1, 2, 3};
    Tensor logits({1, 4, 2, 2}, 0.0);
    for (std::size_t s = 0; s < 4; ++s)
        logits[labels[s] * 4 + s] = 40.0;
    const double loss = o::weighted_cross_entropy(nullptr, o::softmax_channels(nullptr, logits), labels,
                                                  std::vector<double>(4, 1.0), 255).item();
    EXPECT_LT(loss, 1e-15);
}

TEST(WeightedCrossEntropy, AllIgnoredIsExactlyZero)
{
    Tensor logits = random_tensor({1, 4, 2, 2}, 38);
    logits.set_requires_grad(true);
    Tape tape;
    Tensor loss = o::weighted_cross_entropy(&tape, o::softmax_channels(&tape, logits),
                                            std::vector<std::uint8_t>(4, 255), std::vector<double>(4, 2.0), 255);
    EXPECT_EQ(loss.item(), 0.0);
    tape.backward(loss);
    for (double g : logits.grad())
        EXPECT_EQ(g, 0.0);
}

TEST(WeightedCrossEntropy, RejectsInvalidLabel)
{
    EXPECT_THROW(o::weighted_cross_entropy(nullptr, Tensor({1, 4, 1, 1}, 0.25), std::vector<std::uint8_t>{7},
                                           std::vector<double>(4, 1.0), 255),
                 std::invalid_argument);
}

TEST(WeightedCrossEntropy, UnitWeightsEqualPlainMeanCrossEntropy)
{
    std::mt19937_64 rng(39);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor p = o::softmax_channels(nullptr, random_tensor({1, 4, 4, 4}, 100 + trial, -3, 3));
        std::vector<std::uint8_t> labels(16);
        for (auto& l : labels)
            l = static_cast<std::uint8_t>(rng() % 4);
        double brute = 0;
        for (std::size_t s = 0; s < 16; ++s)
            brute += -std::log(p[labels[s] * 16 + s]);
        brute /= 16;
        EXPECT_NEAR(o::weighted_cross_entropy(nullptr, p, labels, std::vector<double>(4, 1.0), 255).item(), brute,
                    1e-12);
    }
}

TEST(WeightedCrossEntropy, WeightsAndIgnoreCount)
{
    // Two valid pixels (weights 2 and 4) and one ignored: (2*ln4 + 4*ln4) / 2.
    Tensor p({1, 4, 1, 3}, 0.25);
    const std::vector<std::uint8_t> labels{1, 255, 3};
    const std::vector<double> w{1, 2, 3, 4};
    EXPECT_NEAR(o::weighted_cross_entropy(nullptr, p, labels, w, 255).item(), 3.0 * std::log(4.0), 1e-12);
}

TEST(WeightedCrossEntropy, GradientThroughSoftmax)
{
    std::vector<Tensor> wrt{random_tensor({2, 4, 2, 2}, 40, -2, 2)};
    const std::vector<std::uint8_t> labels{0, 1, 255, 3, 2, 2, 1, 0};
    const std::vector<double> w{0.3, 0.9, 1.1, 2.5};
    auto res = grad_check(
        [&](Tape* t) { return o::weighted_cross_entropy(t, o::softmax_channels(t, wrt[0]), labels, w, 255); },
        wrt);
    EXPECT_LT(res.max_relative_error, 1e-6);
}

TEST(ConcatChannels, GradientMatchesFiniteDifferences)
{
    std::vector<Tensor> wrt{random_tensor({2, 1, 2, 2}, 41), random_tensor({2, 3, 2, 2}, 42)};
    Tensor probe = random_tensor({2, 4, 2, 2}, 43);
    auto res = grad_check(
        [&](Tape* t) { return o::sum(t, o::mul(t, o::concat_channels(t, wrt[0], wrt[1]), probe)); }, wrt);
    EXPECT_LT(res.max_relative_error, 1e-9);
}

TEST(Backward, SumGivesOnes)
{
    Tensor x = random_tensor({2, 3, 4}, 44);
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(o::sum(&tape, x));
    for (double g : x.grad())
        EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput)
{
    Tensor x({2}, std::vector<double>{1, 2}, true);
    Tape tape;
    tape.backward(o::sum(&tape, o::mul(&tape, x, x)));
    EXPECT_EQ(x.grad()[0], 2.0);
    EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, RepeatedCallsAccumulateExactlyTwice)
{
    Tensor x = random_tensor({1, 2, 4, 4}, 45);
    Tensor w = random_tensor({3, 2, 3, 3}, 46);
    Tensor b = random_tensor({3}, 47);
    w.set_requires_grad(true);
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = o::relu(&tape, o::conv2d(&tape, x, w, b, 1));
    Tensor loss = o::sum(&tape, o::mul(&tape, y, y));
    tape.backward(loss);
    std::vector<double> once(w.grad().begin(), w.grad().end());
    std::vector<double> once_x(x.grad().begin(), x.grad().end());
    tape.backward(loss);
    for (std::size_t i = 0; i < once.size(); ++i)
        EXPECT_NEAR(w.grad()[i], 2.0 * once[i], 1e-12 * std::abs(once[i]));
    for (std::size_t i = 0; i < once_x.size(); ++i)
        EXPECT_NEAR(x.grad()[i], 2.0 * once_x[i], 1e-12 * std::abs(once_x[i]));
}

TEST(Backward, RejectsNonScalar)
{
    Tape tape;
    EXPECT_THROW(tape.backward(Tensor({2})), std::invalid_argument);
}

TEST(Sgd, PlainStep)
{
    std::vector<Parameter> ps{Parameter("p", Tensor({1}, 1.0))};
    ps[0].value.grad()[0] = 0.5;
    sgd_momentum_step(ps, 0.1, 0.0);
    EXPECT_DOUBLE_EQ(ps[0].value[0], 0.95);
}

TEST(Sgd, MomentumRecursion)
{
    std::vector<Parameter> ps{Parameter("p", Tensor({1}, 0.0))};
    ps[0].value.grad()[0] = 1.0;
    sgd_momentum_step(ps, 0.1, 0.9);
    EXPECT_DOUBLE_EQ(ps[0].value[0], -0.1);
    sgd_momentum_step(ps, 0.1, 0.9);
    EXPECT_DOUBLE_EQ(ps[0].velocity[0], 1.9);
    EXPECT_NEAR(ps[0].value[0], -0.29, 1e-15);
}

TEST(Sgd, MomentumCarriesWithZeroGradient)
{
    std::vector<Parameter> ps{Parameter("p", Tensor({1}, 2.0))};
    ps[0].velocity[0] = 3.0;
    ps[0].value.grad()[0] = 0.0;
    sgd_momentum_step(ps, 0.1, 0.9);
    EXPECT_NEAR(ps[0].value[0], 2.0 - 0.1 * 0.9 * 3.0, 1e-15);
}

TEST(Sgd, MissingGradientNamesParameter)
{
    std::vector<Parameter> ps{Parameter("cd.conv1.weight", Tensor({1}, 2.0))};
    try {
        sgd_momentum_step(ps, 0.1, 0.9);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("cd.conv1.weight"), std::string::npos);
    }
}

TEST(NonFinite, ReluAndMaxPoolPropagateNaN)
{
    const double nan = std::nan("");
    Tensor x({1, 1, 2, 2}, std::vector<double>{1.0, nan, -2.0, 0.5});
    const Tensor r = o::relu(nullptr, x);
    EXPECT_TRUE(std::isnan(r[1]));
    EXPECT_EQ(r[2], 0.0);
    EXPECT_TRUE(std::isnan(o::maxpool2(nullptr, x)[0]));
}
