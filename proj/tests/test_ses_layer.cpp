#include "ses/error.hpp"
#include "ses/gradcheck.hpp"
#include "ses/ops.hpp"
#include "ses/ses_layer.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ses;
using ses::test::max_abs_diff;

namespace {

SESLayerConfig small_config(bool positional = false) {
  SESLayerConfig c;
  c.c_in = 8;
  c.c_out = 8;
  c.k = 5;
  c.r1 = 1;
  c.r2 = 2;
  c.r3 = 2;
  c.positional_encoding = positional;
  return c;
}

// Gives the γ batch norms non-trivial affine parameters and running stats.
void perturb_gamma(SESLayer& l, Rng& rng) {
  for (BatchNorm* bn : {&l.gamma_bn1, &l.gamma_bn2}) {
    const std::size_t c = bn->channels();
    bn->gamma = Tensor::uniform({c}, rng, 0.5, 1.5);
    bn->beta = Tensor::uniform({c}, rng, -0.3, 0.3);
    bn->running_mean = Tensor::uniform({c}, rng, -0.3, 0.3);
    bn->running_var = Tensor::uniform({c}, rng, 0.5, 2.0);
  }
}

// w[n, c, j, y, x] for a [N,c_w,kk,H,W] mask tensor.
double mask_at(const Tensor& w, std::size_t n, std::size_t c, std::size_t j, std::size_t y, std::size_t x) {
  const std::size_t cw = w.size(1), kk = w.size(2), h = w.size(3), wd = w.size(4);
  return w.at((((n * cw + c) * kk + j) * h + y) * wd + x);
}

}  // namespace

TEST(SESConfig, DerivedWidthsAndValidation) {
  SESLayerConfig c;
  c.c_in = 256;
  c.c_out = 256;
  c.r1 = 4;
  c.r2 = 16;
  c.r3 = 8;
  EXPECT_EQ(c.c_v(), 64u);
  EXPECT_EQ(c.c_qk(), 16u);
  EXPECT_EQ(c.c_w(), 8u);
  c.validate();
  c.k = 6;
  EXPECT_THROW(c.validate(), ValueError);
  c.k = 7;
  c.r3 = 3;
  EXPECT_THROW(c.validate(), ValueError);
}

TEST(SESMasks, ConstantInputGivesUniformInteriorMasks) {
  Rng rng(1);
  SESLayer l = SESLayer::init(small_config(), rng);
  perturb_gamma(l, rng);
  const std::size_t H = 9, W = 10, k = 5, pad = 2;
  Tensor x({2, 8, H, W}, 0.7);
  for (Mode mode : {Mode::train, Mode::eval}) {
    Tensor w = regress_masks(l, x, x, mode);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t y = pad; y + pad < H; ++y)
          for (std::size_t xx = pad; xx + pad < W; ++xx)
            for (std::size_t j = 0; j < k * k; ++j)
              EXPECT_NEAR(mask_at(w, n, c, j, y, xx), 1.0 / 25.0, 1e-12);
  }
}

TEST(SESMasks, FootprintDistributionsAreNormalised) {
  Rng rng(2);
  SESLayer l = SESLayer::init(small_config(), rng);
  Tensor q = Tensor::randn({2, 8, 6, 7}, rng, 3.0);
  Tensor k = Tensor::randn({2, 8, 6, 7}, rng, 3.0);
  Tensor w = regress_masks(l, q, k, Mode::train);
  ASSERT_EQ(w.shape(), (Shape{2, 4, 25, 6, 7}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t xx = 0; xx < 7; ++xx) {
          double s = 0.0;
          for (std::size_t j = 0; j < 25; ++j) {
            const double v = mask_at(w, n, c, j, y, xx);
            EXPECT_GE(v, 0.0);
            s += v;
          }
          EXPECT_NEAR(s, 1.0, 1e-12);
        }
}

TEST(SESMasks, DominantRelationSaturatesSoftmax) {
  // Identity in place of γ: masks are the softmax of the raw relation.
  const std::size_t k = 3, H = 5, W = 5, cy = 2, cx = 2, target = 7;  // offset (+1, 0)
  Tensor q({1, 1, H, W}, 0.0);
  std::vector<double> kv(H * W, 0.0);
  kv[(cy + 1) * W + cx] = -1000.0;
  Tensor key({1, 1, H, W}, std::move(kv));
  Tensor w = footprint_softmax(pairwise_relation(q, key, k));
  EXPECT_NEAR(mask_at(w, 0, 0, target, cy, cx), 1.0, 1e-12);
}

TEST(SESMasks, FusedMatchesComposedOps) {
  for (bool positional : {false, true})
    for (Mode mode : {Mode::train, Mode::eval}) {
      Rng rng(3);
      SESLayer a = SESLayer::init(small_config(positional), rng);
      perturb_gamma(a, rng);
      SESLayer b = a;
      ParamList pa, pb;
      a.collect("a", pa);
      b.collect("b", pb);
      for (std::size_t i = 0; i < pa.size(); ++i) {
        *pb[i].tensor = pa[i].tensor->clone();
        if (pa[i].trainable) {
          pa[i].tensor->set_requires_grad();
          pb[i].tensor->set_requires_grad();
        }
      }
      Tensor x = Tensor::randn({3, 8, 6, 7}, rng);
      Tensor x2 = x.clone();
      x.set_requires_grad();
      x2.set_requires_grad();
      Tensor wa = regress_masks(a, x, x, mode);
      Tensor wb = regress_masks_composed(b, x2, x2, mode);
      EXPECT_LT(max_abs_diff(wa, wb), 1e-13);
      Tensor r = Tensor::randn(wa.shape(), rng);
      sum(wa * r).backward();
      sum(wb * r).backward();
      EXPECT_LT(max_abs_diff(x.grad(), x2.grad()), 1e-12);
      for (std::size_t i = 0; i < pa.size(); ++i) {
        const Tensor& ta = *pa[i].tensor;
        const Tensor& tb = *pb[i].tensor;
        if (!pa[i].trainable) {
          EXPECT_LT(max_abs_diff(ta, tb), 1e-13) << pa[i].name;  // running statistics
        } else if (ta.has_grad() || tb.has_grad()) {
          ASSERT_TRUE(ta.has_grad() && tb.has_grad()) << pa[i].name;
          EXPECT_LT(max_abs_diff(ta.grad(), tb.grad()), 1e-12) << pa[i].name;
        }
      }
    }
}

TEST(SESMasks, FusedGradientMatchesFiniteDifferences) {
  Rng rng(4);
  SESLayer l = SESLayer::init(small_config(true), rng);
  perturb_gamma(l, rng);
  Tensor q = Tensor::randn({2, 4, 4, 5}, rng);
  Tensor k = Tensor::randn({2, 4, 4, 5}, rng);
  Tensor r = Tensor::randn({2, 4, 25, 4, 5}, rng);
  std::vector<Tensor> in{q, k, l.gamma_bn1.gamma, l.gamma_bn1.beta, l.gamma_fc1.weight, l.gamma_fc1.bias,
                         l.gamma_bn2.gamma, l.gamma_bn2.beta, l.gamma_fc2.weight, l.gamma_fc2.bias};
  for (auto& t : in) t.set_requires_grad();
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto loss = [&] { return sum(mask_regressor(l, q, k, mode) * r); };
    EXPECT_LT(gradcheck(loss, in).max_rel_error, 1e-4);
  }
}

TEST(Aggregate, OneHotCentreIsIdentity) {
  Rng rng(5);
  const std::size_t k = 3;
  Tensor v = Tensor::randn({2, 4, 5, 6}, rng);
  std::vector<double> wv(2 * 2 * 9 * 30, 0.0);
  for (std::size_t m = 0; m < 4; ++m)
    for (std::size_t p = 0; p < 30; ++p) wv[(m * 9 + 4) * 30 + p] = 1.0;
  Tensor w({2, 2, 9, 5, 6}, std::move(wv));
  EXPECT_LT(max_abs_diff(aggregate(v, w, k, 2), v), 1e-15);
}

TEST(Aggregate, UniformMaskIsZeroPaddedBoxMean) {
  Rng rng(6);
  const std::size_t k = 3, H = 4, W = 5;
  Tensor v = Tensor::randn({1, 1, H, W}, rng);
  Tensor w({1, 1, 9, H, W}, 1.0 / 9.0);
  Tensor out = aggregate(v, w, k, 1);
  for (long y = 0; y < static_cast<long>(H); ++y)
    for (long x = 0; x < static_cast<long>(W); ++x) {
      double s = 0.0;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long sy = y + dy, sx = x + dx;
          if (sy >= 0 && sy < static_cast<long>(H) && sx >= 0 && sx < static_cast<long>(W))
            s += v.at(static_cast<std::size_t>(sy * static_cast<long>(W) + sx));
        }
      EXPECT_NEAR(out.at(static_cast<std::size_t>(y * static_cast<long>(W) + x)), s / 9.0, 1e-14);
    }
}

TEST(Aggregate, SingleSharedMaskMatchesLoopOracle) {
  Rng rng(7);
  const std::size_t k = 3, C = 4, H = 4, W = 4;
  Tensor v = Tensor::randn({C, H, W}, rng);
  Tensor w = footprint_softmax(Tensor::randn({1, 1, 9, H, W}, rng)).reshape({1, 9, H, W});
  Tensor out = aggregate(v, w, k, C);
  for (std::size_t c = 0; c < C; ++c)
    for (long y = 0; y < 4; ++y)
      for (long x = 0; x < 4; ++x) {
        double s = 0.0;
        for (std::size_t j = 0; j < 9; ++j) {
          const long sy = y + static_cast<long>(j / 3) - 1, sx = x + static_cast<long>(j % 3) - 1;
          if (sy < 0 || sy >= 4 || sx < 0 || sx >= 4) continue;
          s += w.at((j * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)) *
               v.at((c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx));
        }
        EXPECT_NEAR(out.at((c * H + static_cast<std::size_t>(y)) * W + static_cast<std::size_t>(x)), s, 1e-14);
      }
  EXPECT_THROW(aggregate(v, w, k, 3), ValueError);
}

TEST(Embedding, ProjectionAndMaskSum) {
  Rng rng(8);
  const std::size_t kk = 9;
  Tensor vp = Tensor::randn({1, 4, 3, 3}, rng);
  Tensor w = footprint_softmax(Tensor::randn({1, 2, kk, 3, 3}, rng));
  Linear zeta;
  zeta.weight = Tensor::zeros({1, 1 + kk});
  zeta.bias = Tensor::zeros({1});
  zeta.weight.mutable_data()[0] = 1.0;
  EXPECT_LT(max_abs_diff(embed_transformation(vp, w, zeta, 2), vp), 1e-15);
  zeta.weight = Tensor::ones({1, 1 + kk});
  zeta.weight.mutable_data()[0] = 0.0;
  const Tensor ones = embed_transformation(vp, w, zeta, 2);
  for (double o : ones.data()) EXPECT_NEAR(o, 1.0, 1e-14);
  zeta.weight = Tensor::zeros({1, kk});
  EXPECT_THROW(embed_transformation(vp, w, zeta, 2), ShapeError);
}

TEST(Embedding, AffineInFeatureSlot) {
  Rng rng(9);
  Linear zeta = Linear::init(10, 1, rng);
  Tensor w = footprint_softmax(Tensor::randn({1, 2, 9, 3, 3}, rng));
  Tensor a = Tensor::randn({1, 2, 3, 3}, rng), b = Tensor::randn({1, 2, 3, 3}, rng);
  Tensor zero = Tensor::zeros({1, 2, 3, 3});
  // ζ(a + b) - ζ(a) - ζ(b) + ζ(0) vanishes for an affine map.
  Tensor d = embed_transformation(a + b, w, zeta, 1) - embed_transformation(a, w, zeta, 1) -
             embed_transformation(b, w, zeta, 1) + embed_transformation(zero, w, zeta, 1);
  for (double v : d.data()) EXPECT_NEAR(v, 0.0, 1e-13);
}

TEST(Embedding, SharedWeightsCommuteWithChannelPermutation) {
  Rng rng(10);
  Linear zeta = Linear::init(10, 1, rng);
  Tensor vp = Tensor::randn({1, 3, 2, 2}, rng);
  Tensor w = footprint_softmax(Tensor::randn({1, 3, 9, 2, 2}, rng));
  const std::vector<std::size_t> perm{2, 0, 1};
  std::vector<double> pv(vp.numel()), pw(w.numel());
  for (std::size_t c = 0; c < 3; ++c) {
    std::copy_n(vp.data().data() + perm[c] * 4, 4, pv.data() + c * 4);
    std::copy_n(w.data().data() + perm[c] * 36, 36, pw.data() + c * 36);
  }
  Tensor out = embed_transformation(vp, w, zeta, 1);
  Tensor pout = embed_transformation(Tensor(vp.shape(), pv), Tensor(w.shape(), pw), zeta, 1);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 4; ++p) EXPECT_EQ(pout.at(c * 4 + p), out.at(perm[c] * 4 + p));
}

TEST(SESForward, EvalIsDeterministicAndUnbatchedMatches) {
  Rng rng(11);
  SESLayer l = SESLayer::init(small_config(), rng);
  perturb_gamma(l, rng);
  Tensor x = Tensor::randn({8, 6, 6}, rng);
  Tensor y1 = ses_forward(l, x, x, Mode::eval);
  Tensor y2 = ses_forward(l, x, x, Mode::eval);
  EXPECT_EQ(y1.shape(), (Shape{8, 6, 6}));
  EXPECT_TRUE(test::bit_equal(y1, y2));
  Tensor yb = ses_forward(l, x.reshape({1, 8, 6, 6}), x.reshape({1, 8, 6, 6}), Mode::eval);
  EXPECT_TRUE(test::bit_equal(yb.reshape({8, 6, 6}), y1));
}

TEST(SESForward, TranslationEquivariantAwayFromBorders) {
  Rng rng(12);
  SESLayer l = SESLayer::init(small_config(), rng);
  perturb_gamma(l, rng);
  const std::size_t H = 14, W = 14, dy = 2, dx = 3, pad = 2;
  Tensor x = Tensor::randn({1, 8, H, W}, rng);
  // Shift content by (dy, dx); rows/columns entering from the edge are fresh noise.
  Tensor xs = Tensor::randn({1, 8, H, W}, rng);
  auto xv = x.data();
  auto sv = xs.mutable_data();
  for (std::size_t c = 0; c < 8; ++c)
    for (std::size_t y = 0; y + dy < H; ++y)
      for (std::size_t xx = 0; xx + dx < W; ++xx) sv[(c * H + y + dy) * W + xx + dx] = xv[(c * H + y) * W + xx];
  Tensor w, ws;
  Tensor out = ses_forward(l, x, x, Mode::eval, &w);
  Tensor outs = ses_forward(l, xs, xs, Mode::eval, &ws);
  // Cells whose footprint stays inside both maps; the output reads a second
  // footprint of values, hence twice the margin.
  for (std::size_t y = 2 * pad; y + dy + 2 * pad < H; ++y)
    for (std::size_t xx = 2 * pad; xx + dx + 2 * pad < W; ++xx) {
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t j = 0; j < 25; ++j)
          EXPECT_EQ(mask_at(w, 0, c, j, y, xx), mask_at(ws, 0, c, j, y + dy, xx + dx));
      for (std::size_t c = 0; c < 8; ++c)
        EXPECT_EQ(out.at((c * H + y) * W + xx), outs.at((c * H + y + dy) * W + xx + dx));
    }
}

TEST(SESForward, BlockGradientMatchesFiniteDifferences) {
  Rng rng(13);
  SESLayer l = SESLayer::init(small_config(), rng);
  Tensor v = Tensor::randn({2, 8, 5, 5}, rng), qk = Tensor::randn({2, 8, 5, 5}, rng);
  Tensor r = Tensor::randn({2, 8, 5, 5}, rng);
  ParamList params;
  l.collect("ses", params);
  std::vector<Tensor> in{v, qk};
  for (auto& p : params)
    if (p.trainable) in.push_back(*p.tensor);
  for (auto& t : in) t.set_requires_grad();
  auto loss = [&] { return sum(ses_forward(l, v, qk, qk, Mode::train) * r); };
  EXPECT_LT(gradcheck(loss, in).max_rel_error, 1e-4);
}

TEST(SESParameters, FewerThanConvolutionAtReferenceSetting) {
  SESLayerConfig c;
  c.c_in = 256;
  c.c_out = 256;
  c.k = 7;
  c.r1 = 4;
  c.r2 = 16;
  c.r3 = 8;
  Rng rng(14);
  SESLayer l = SESLayer::init(c, rng);
  // lin_v, lin_q, lin_k, two γ batch norms, γ linears, ζ, lin_out.
  const std::size_t expected = (256 * 64 + 64) + 2 * (256 * 16 + 16) + 2 * 16 + (16 * 16 + 16) + 2 * 16 +
                               (16 * 8 + 8) + (50 + 1) + (64 * 256 + 256);
  EXPECT_EQ(l.parameter_count(), expected);
  EXPECT_EQ(conv_parameter_count(256, 256, 7), 256u * 256u * 49u + 256u);
  EXPECT_LT(l.parameter_count(), conv_parameter_count(256, 256, 7));
}
