#include "ses/dataset.hpp"
#include "ses/error.hpp"
#include "ses/harness.hpp"
#include "ses/transport.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cmath>

using namespace ses;

namespace {

Tensor uniform_masks(std::size_t o, std::size_t k, std::size_t h, std::size_t w) {
  return Tensor({o, k * k, h, w}, 1.0 / static_cast<double>(k * k));
}

std::vector<ImageGrid> shape_images(std::size_t n, std::size_t side, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ImageGrid> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(render_shape(random_shape(static_cast<ShapeClass>(i % kNumShapeClasses), side, rng), side));
  return out;
}

}  // namespace

TEST(ExtractGraph, LiftsUniformMaskToStrideGrid) {
  Probe p = mask_probe(uniform_masks(1, 3, 16, 16), 4);
  SamplingGraph g = extract_graph(p, 8, 8, 0);
  ASSERT_EQ(g.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_DOUBLE_EQ(g.weights()[i], 1.0 / 9.0);
    const Point2 q = g.points()[i];
    EXPECT_DOUBLE_EQ(q.x(), 30.0 + 4.0 * static_cast<double>(i % 3));
    EXPECT_DOUBLE_EQ(q.y(), 30.0 + 4.0 * static_cast<double>(i / 3));
  }
  EXPECT_DOUBLE_EQ(g.mean().x(), 34.0);
  EXPECT_DOUBLE_EQ(g.mean().y(), 34.0);
}

TEST(ExtractGraph, OneHotMaskIsSinglePoint) {
  std::vector<double> m(9 * 25, 0.0);
  for (std::size_t p = 0; p < 25; ++p) m[2 * 25 + p] = 1.0;  // footprint cell (-1, +1)
  Probe probe = mask_probe(Tensor({1, 9, 5, 5}, std::move(m)), 2);
  SamplingGraph g = extract_graph(probe, 2, 2, 0);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_DOUBLE_EQ(g.weights()[0], 1.0);
  EXPECT_EQ(g.points()[0], (Point2{7.0, 3.0}));
}

TEST(ExtractGraph, LocationOnCellCentreIsSinglePoint) {
  Probe p = location_probe(2, 8, 8, {{Point2{1.0, -1.0}}}, {{1.0}});
  SamplingGraph g = extract_graph(p, 4, 4, 0);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g.points()[0], (Point2{11.0, 7.0}));
}

TEST(ExtractGraph, LocationSplatsBilinearly) {
  Probe p = location_probe(1, 8, 8, {{Point2{0.25, 0.5}}}, {{2.0}});
  SamplingGraph g = extract_graph(p, 4, 4, 0);
  ASSERT_EQ(g.size(), 4u);
  EXPECT_NEAR(g.mean().x(), 4.75, 1e-12);
  EXPECT_NEAR(g.mean().y(), 5.0, 1e-12);
  EXPECT_NEAR(g.total(), 1.0, 1e-12);
}

TEST(ExtractGraph, BorderCentreRejected) {
  Probe p = mask_probe(uniform_masks(2, 5, 10, 10), 1);
  EXPECT_THROW(extract_graph(p, 1, 5, 0), ValueError);
  EXPECT_THROW(extract_graph(p, 5, 8, 0), ValueError);
  EXPECT_THROW(extract_graph(p, 5, 5, 2), ValueError);
  EXPECT_NO_THROW(extract_graph(p, 2, 7, 1));
}

TEST(IdealGraph, TransformsSupportKeepsWeights) {
  SamplingGraph g({{1, 0}, {2, 0}, {0, 3}}, {0.2, 0.3, 0.5});
  SamplingGraph same = ideal_graph(g, Affine2D::identity());
  EXPECT_EQ(same.points(), g.points());
  TransformParams r;
  r.kind = TransformKind::rotation;
  r.angle_deg = 90.0;
  SamplingGraph rot = ideal_graph(g, make_transform(r, {0, 0}));
  EXPECT_EQ(rot.weights(), g.weights());
  EXPECT_NEAR((rot.points()[0] - Point2{0, 1}).norm(), 0.0, 1e-15);
  EXPECT_NEAR((rot.points()[1] - Point2{0, 2}).norm(), 0.0, 1e-15);
  EXPECT_NEAR((rot.points()[2] - Point2{-3, 0}).norm(), 0.0, 1e-15);
  EXPECT_NEAR(rot.total(), 1.0, 1e-15);
}

TEST(Aemd, IdentityTransformGivesZero) {
  const auto images = shape_images(4, 32, 1);
  AEMDOptions opts;
  opts.kind = TransformKind::identity;
  opts.n = 8;
  opts.seed = 3;
  EXPECT_NEAR(aemd(ConstantSampler(5, 2, 3), images, opts).aemd, 0.0, 1e-9);
  EXPECT_NEAR(aemd(ContentSampler(5), images, opts).aemd, 0.0, 1e-9);
}

TEST(Aemd, ConstantSamplerQuarterTurnIsZero) {
  const auto images = shape_images(2, 32, 2);
  AEMDOptions opts;
  opts.kind = TransformKind::rotation;
  TransformParams p;
  p.kind = TransformKind::rotation;
  p.angle_deg = 90.0;
  opts.fixed = p;
  opts.n = 4;
  EXPECT_NEAR(aemd(ConstantSampler(3), images, opts).aemd, 0.0, 1e-9);
}

TEST(Aemd, ConstantSamplerSkewMatchesSolverOracle) {
  const std::size_t k = 3, side = 32;
  const double s = 0.3;
  // Ideal graph: the k x k grid sheared about its centre. Observed: the
  // unsheared grid. Both share the centre after the sub-cell shift.
  Eigen::MatrixXd cost(k * k, k * k);
  for (std::size_t i = 0; i < k * k; ++i)
    for (std::size_t j = 0; j < k * k; ++j) {
      const double ux = static_cast<double>(i % k) - 1.0, uy = static_cast<double>(i / k) - 1.0;
      const double vx = static_cast<double>(j % k) - 1.0, vy = static_cast<double>(j / k) - 1.0;
      cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = std::hypot(ux + s * uy - vx, uy - vy);
    }
  const Eigen::VectorXd mass = Eigen::VectorXd::Constant(k * k, 1.0 / static_cast<double>(k * k));
  const double oracle = 2.0 / static_cast<double>(side) * solve_transport<double>(mass, mass, cost).cost;
  EXPECT_GT(oracle, 0.0);

  AEMDOptions opts;
  opts.kind = TransformKind::skew;
  TransformParams p;
  p.kind = TransformKind::skew;
  p.shear = s;
  p.shear_axis = ShearAxis::x;
  opts.fixed = p;
  opts.n = 6;
  opts.seed = 4;
  const AEMDReport r = aemd(ConstantSampler(k), shape_images(3, side, 3), opts);
  EXPECT_NEAR(r.aemd, oracle, 1e-6);
}

TEST(Aemd, ContentSamplerIsNearlyEquivariantUnderReflection) {
  AEMDOptions opts;
  opts.kind = TransformKind::reflection;
  opts.n = 20;
  opts.seed = 5;
  const AEMDReport r = aemd(ContentSampler(5), shape_images(8, 32, 4), opts);
  EXPECT_LT(r.aemd, 0.002);
}

TEST(Aemd, ReportRecomputesAndStaysInUnitRange) {
  AEMDOptions opts;
  opts.kind = TransformKind::rotation;
  opts.n = 6;
  opts.seed = 6;
  const AEMDReport r = aemd(ContentSampler(3), shape_images(3, 32, 5), opts);
  EXPECT_EQ(r.aemd, r.recompute());
  EXPECT_GE(r.aemd, 0.0);
  EXPECT_LE(r.aemd, 1.0);
  EXPECT_DOUBLE_EQ(r.alpha, 2.0 / 32.0);
  ASSERT_EQ(r.records.size(), 6u);
  EXPECT_EQ(r.records[4].image, 1u);
  nlohmann::json j = r;
  EXPECT_EQ(j["records"].size(), 6u);
  EXPECT_EQ(j["transform"], "rotation");
}

TEST(Aemd, DeterministicAndIndependentOfThreadCount) {
  const auto images = shape_images(4, 32, 6);
  AEMDOptions opts;
  opts.kind = TransformKind::scale;
  opts.n = 9;
  opts.seed = 7;
  opts.threads = 1;
  const nlohmann::json a = aemd(ContentSampler(3), images, opts);
  const nlohmann::json b = aemd(ContentSampler(3), images, opts);
  opts.threads = 3;
  const nlohmann::json c = aemd(ContentSampler(3), images, opts);
  EXPECT_EQ(a.dump(), b.dump());
  EXPECT_EQ(a.dump(), c.dump());
}

TEST(Aemd, RejectsEmptyRequests) {
  AEMDOptions opts;
  opts.n = 0;
  EXPECT_THROW(aemd(ContentSampler(3), shape_images(1, 32, 7), opts), ValueError);
  opts.n = 1;
  EXPECT_THROW(aemd(ContentSampler(3), {}, opts), ValueError);
}
