#include "ses/error.hpp"
#include "ses/gradcheck.hpp"
#include "ses/ops.hpp"
#include "ses/tensor.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

using namespace ses;
using ses::test::max_abs_diff;

TEST(Tensor, ShapeAndFill) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.numel(), 6u);
  for (double v : t.data()) EXPECT_EQ(v, 1.5);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, CopiesShareStorageCloneDoesNot) {
  Tensor a({3}, 0.0);
  Tensor b = a;
  Tensor c = a.clone();
  a.mutable_data()[0] = 7.0;
  EXPECT_EQ(b.at(0), 7.0);
  EXPECT_EQ(c.at(0), 0.0);
}

TEST(Tensor, NonFiniteResultRaises) {
  Tensor a({2}, std::vector<double>{1.0, 1e308});
  EXPECT_THROW(scale(a, 1e10), NumericError);
}

TEST(Tensor, SerializationRoundTrip) {
  Rng rng(4);
  Tensor t = Tensor::randn({2, 3, 4}, rng);
  std::stringstream ss;
  save_tensor(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.substr(0, 4), "SEST");
  EXPECT_EQ(bytes.size(), 4u + 4u + 3u * 8u + 24u * 8u);
  Tensor back = load_tensor(ss);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_TRUE(test::bit_equal(back, t));

  std::stringstream bad("XXXX");
  EXPECT_THROW(load_tensor(bad), IoError);
}

TEST(Autograd, ChainRuleOnSmallGraph) {
  // f = sum((a * b) + a) -> df/da = b + 1, df/db = a
  Tensor a({3}, std::vector<double>{1, 2, 3});
  Tensor b({3}, std::vector<double>{4, 5, 6});
  a.set_requires_grad();
  b.set_requires_grad();
  sum(a * b + a).backward();
  EXPECT_EQ(a.grad().at(0), 5.0);
  EXPECT_EQ(a.grad().at(2), 7.0);
  EXPECT_EQ(b.grad().at(1), 2.0);
}

TEST(Autograd, BackwardTwiceAccumulates) {
  Tensor a({2}, std::vector<double>{1, 2});
  a.set_requires_grad();
  Tensor loss = sum(scale(a, 3.0));
  loss.backward();
  loss.backward();
  EXPECT_EQ(a.grad().at(0), 6.0);
  a.zero_grad();
  EXPECT_FALSE(a.has_grad());
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Tensor a({2}, 1.0);
  a.set_requires_grad();
  NoGradGuard guard;
  Tensor y = a * a;
  EXPECT_EQ(y.grad_fn(), nullptr);
  EXPECT_FALSE(grad_enabled());
}

TEST(Ops, ReluExample) {
  Tensor x({3}, std::vector<double>{-1, 0, 2});
  Tensor y = relu(x);
  EXPECT_EQ(y.at(0), 0.0);
  EXPECT_EQ(y.at(1), 0.0);
  EXPECT_EQ(y.at(2), 2.0);
}

TEST(Ops, MaxpoolExampleAndOddExtent) {
  Tensor x({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(maxpool2(x).at(0), 4.0);
  Tensor odd({1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor p = maxpool2(odd);
  EXPECT_EQ(p.shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(p.at(0), 5.0);
  EXPECT_EQ(p.at(1), 6.0);
  EXPECT_EQ(p.at(2), 8.0);
  EXPECT_EQ(p.at(3), 9.0);
}

TEST(Ops, MaxpoolTieGoesToFirst) {
  Tensor x({1, 2, 2}, std::vector<double>{3, 3, 3, 3});
  x.set_requires_grad();
  sum(maxpool2(x)).backward();
  EXPECT_EQ(x.grad().at(0), 1.0);
  EXPECT_EQ(x.grad().at(1), 0.0);
  EXPECT_EQ(x.grad().at(3), 0.0);
}

TEST(Ops, CrossEntropyClosedForms) {
  Tensor uniform({1, 4}, 0.0);
  const std::vector<int> label{2};
  EXPECT_NEAR(cross_entropy(uniform, label).item(), std::log(4.0), 1e-12);
  Tensor sure({1, 4}, std::vector<double>{0, 0, 100, 0});
  const double l = cross_entropy(sure, label).item();
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-10);
  const std::vector<int> out_of_range{4};
  EXPECT_THROW(cross_entropy(uniform, out_of_range), ValueError);
}

TEST(Ops, MatmulSmall) {
  Tensor a({2, 2}, std::vector<double>{1, 2, 3, 4});
  Tensor b({2, 1}, std::vector<double>{5, 6});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.at(0), 17.0);
  EXPECT_EQ(c.at(1), 39.0);
  EXPECT_THROW(matmul(a, Tensor({3, 1})), ShapeError);
}

TEST(Ops, BroadcastOverLeadingAxes) {
  Tensor a({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor b({3}, std::vector<double>{10, 20, 30});
  Tensor c = a + b;
  EXPECT_EQ(c.at(3), 14.0);
  EXPECT_THROW(a + Tensor({2}), ShapeError);
}

TEST(Ops, SoftmaxSumsToOne) {
  Rng rng(1);
  Tensor x = Tensor::randn({2, 5, 3}, rng, 4.0);
  Tensor y = softmax(x, {1});
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < 5; ++b) s += y.at((a * 5 + b) * 3 + c);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Ops, UnfoldMatchesDirectIndexing) {
  Rng rng(2);
  const std::size_t C = 2, H = 4, W = 5, k = 3;
  Tensor x = Tensor::randn({C, H, W}, rng);
  Tensor u = unfold(x, k);
  ASSERT_EQ(u.shape(), (Shape{C, k * k, H, W}));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t j = 0; j < k * k; ++j)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const long sy = static_cast<long>(y) + static_cast<long>(j / k) - 1;
          const long sx = static_cast<long>(xx) + static_cast<long>(j % k) - 1;
          const bool inside = sy >= 0 && sy < static_cast<long>(H) && sx >= 0 && sx < static_cast<long>(W);
          const double expect = inside ? x.at((c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)) : 0.0;
          EXPECT_EQ(u.at(((c * k * k + j) * H + y) * W + xx), expect);
        }
}

TEST(Ops, GlobalAvgPoolAndConcat) {
  Tensor x({1, 2, 1, 2}, std::vector<double>{1, 3, 5, 7});
  Tensor g = global_avg_pool(x);
  EXPECT_EQ(g.at(0), 2.0);
  EXPECT_EQ(g.at(1), 6.0);
  Tensor c = concat({x, x}, 1);
  EXPECT_EQ(c.shape(), (Shape{1, 4, 1, 2}));
  EXPECT_EQ(c.at(6), 5.0);
}

TEST(Gradcheck, DetectsWrongGradient) {
  // A deliberately broken op: forward doubles, backward claims identity.
  Tensor x({3}, std::vector<double>{0.1, 0.2, 0.3});
  auto broken = [&] {
    Buffer v(x.data().begin(), x.data().end());
    for (auto& e : v) e *= 2.0;
    return sum(Tensor::from_op({3}, std::move(v), "broken", {x},
                               [](std::span<const double> g, GradSink& sink) {
                                 auto gx = sink(0);
                                 for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                               }));
  };
  EXPECT_GT(gradcheck(broken, {x}).max_rel_error, 0.3);
}

TEST(Gradcheck, EveryOpPassesForOneSeed) {
  for (const auto& e : gradcheck_suite(11)) {
    if (e.name == "ses_block") continue;  // covered by the acceptance run
    EXPECT_LT(e.result.max_rel_error, 1e-4) << e.name << " worst " << e.result.worst;
  }
}
