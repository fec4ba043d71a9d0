#include "ses/error.hpp"
#include "ses/gradcheck.hpp"
#include "ses/nn.hpp"
#include "ses/ops.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ses;

namespace {

Linear identity_linear(std::size_t n) {
  Linear l;
  l.weight = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) l.weight.mutable_data()[i * n + i] = 1.0;
  l.bias = Tensor::zeros({n});
  return l;
}

}  // namespace

TEST(Linear, IdentityLeavesInputUnchanged) {
  Rng rng(1);
  Tensor x = Tensor::randn({2, 3, 4, 5}, rng);
  EXPECT_TRUE(test::bit_equal(linear_forward(identity_linear(3), x, 1), x));
}

TEST(Linear, ZeroWeightGivesBias) {
  Rng rng(2);
  Linear l;
  l.weight = Tensor::zeros({2, 3});
  l.bias = Tensor({2}, std::vector<double>{0.5, -1.5});
  Tensor y = linear_forward(l, Tensor::randn({4, 3, 2, 2}, rng), 1);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t p = 0; p < 4; ++p) {
      EXPECT_EQ(y.at((n * 2 + 0) * 4 + p), 0.5);
      EXPECT_EQ(y.at((n * 2 + 1) * 4 + p), -1.5);
    }
}

TEST(Linear, AxisMismatchRaises) {
  Rng rng(3);
  Linear l = Linear::init(3, 2, rng);
  EXPECT_THROW(linear_forward(l, Tensor::zeros({1, 4, 2, 2}), 1), ShapeError);
}

TEST(Linear, InitRange) {
  Rng rng(4);
  Linear l = Linear::init(16, 8, rng);
  for (double w : l.weight.data()) EXPECT_LE(std::abs(w), 0.25);
  for (double b : l.bias.data()) EXPECT_LE(std::abs(b), 0.25);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  Linear l = Linear::init(3, 2, rng);
  Tensor x = Tensor::randn({2, 3, 2, 2}, rng);
  Tensor r = Tensor::randn({2, 2, 2, 2}, rng);
  l.weight.set_requires_grad();
  l.bias.set_requires_grad();
  x.set_requires_grad();
  auto loss = [&] { return sum(linear_forward(l, x, 1) * r); };
  EXPECT_LT(gradcheck(loss, {x, l.weight, l.bias}).max_rel_error, 1e-4);
}

TEST(BatchNorm, ConstantInputGivesBeta) {
  BatchNorm bn = BatchNorm::init(2);
  bn.beta = Tensor({2}, std::vector<double>{0.25, -2.0});
  Tensor y = batchnorm_forward(bn, Tensor({3, 2, 2, 2}, 4.0), Mode::train);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t p = 0; p < 4; ++p) {
      EXPECT_EQ(y.at((n * 2 + 0) * 4 + p), 0.25);
      EXPECT_EQ(y.at((n * 2 + 1) * 4 + p), -2.0);
    }
}

TEST(BatchNorm, TrainOutputIsStandardised) {
  Rng rng(6);
  BatchNorm bn = BatchNorm::init(3);
  Tensor x = Tensor::randn({4, 3, 5, 5}, rng, 3.0);
  Tensor y = batchnorm_forward(bn, x, Mode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0, s2 = 0.0, n = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t p = 0; p < 25; ++p) {
        const double v = y.at((b * 3 + c) * 25 + p);
        s += v;
        s2 += v * v;
        n += 1.0;
      }
    EXPECT_NEAR(s / n, 0.0, 1e-6);
    // eps makes the variance fall short of 1 by about eps / var.
    EXPECT_NEAR(s2 / n, 1.0, 1e-5);
  }
}

TEST(BatchNorm, EvalWithDefaultStatsScalesByEps) {
  Rng rng(7);
  BatchNorm bn = BatchNorm::init(2);
  Tensor x = Tensor::randn({2, 2, 3, 3}, rng);
  Tensor y = batchnorm_forward(bn, x, Mode::eval);
  const double s = 1.0 / std::sqrt(1.0 + bn.eps);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.at(i), x.at(i) * s, 1e-15);
  EXPECT_TRUE(test::bit_equal(y, batchnorm_forward(bn, x, Mode::eval)));
}

TEST(BatchNorm, RunningStatsFollowMomentum) {
  Rng rng(8);
  BatchNorm bn = BatchNorm::init(2);
  bn.running_mean = Tensor({2}, std::vector<double>{0.3, -0.2});
  bn.running_var = Tensor({2}, std::vector<double>{2.0, 0.5});
  const Tensor old_mean = bn.running_mean.clone(), old_var = bn.running_var.clone();
  Tensor x = Tensor::randn({3, 2, 4, 4}, rng, 2.0);
  BatchStats stats;
  batch_norm_batch_stats(x, bn.gamma, bn.beta, bn.eps, 1, &stats);
  batchnorm_forward(bn, x, Mode::train);
  for (std::size_t c = 0; c < 2; ++c) {
    const double m = bn.running_mean.at(c) - old_mean.at(c) - bn.momentum * (stats.mean[c] - old_mean.at(c));
    const double v = bn.running_var.at(c) - old_var.at(c) - bn.momentum * (stats.var[c] - old_var.at(c));
    EXPECT_LT(std::abs(m), 1e-12);
    EXPECT_LT(std::abs(v), 1e-12);
  }
}

TEST(BatchNorm, GradientMatchesFiniteDifferences) {
  Rng rng(9);
  BatchNorm bn = BatchNorm::init(3);
  bn.gamma = Tensor::uniform({3}, rng, 0.5, 1.5);
  bn.beta = Tensor::uniform({3}, rng, -0.5, 0.5);
  Tensor x = Tensor::randn({2, 3, 3, 3}, rng);
  Tensor r = Tensor::randn({2, 3, 3, 3}, rng);
  for (Tensor* t : {&x, &bn.gamma, &bn.beta}) t->set_requires_grad();
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto loss = [&] { return sum(batchnorm_forward(bn, x, mode) * r); };
    EXPECT_LT(gradcheck(loss, {x, bn.gamma, bn.beta}).max_rel_error, 1e-4);
  }
}

TEST(BatchNorm, ChannelMismatchRaises) {
  BatchNorm bn = BatchNorm::init(3);
  EXPECT_THROW(batchnorm_forward(bn, Tensor::zeros({1, 2, 2, 2}), Mode::train), ShapeError);
}
