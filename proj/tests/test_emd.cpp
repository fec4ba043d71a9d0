#include "ses/emd.hpp"
#include "ses/emd_oracles.hpp"
#include "ses/error.hpp"
#include "ses/transport.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ses;

namespace {

std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> w(n);
  double s = 0.0;
  for (auto& x : w) s += (x = u(rng));
  for (auto& x : w) x /= s;
  return w;
}

SamplingGraph random_graph(std::size_t n, Rng& rng, double spread = 10.0) {
  std::uniform_real_distribution<double> u(-spread, spread);
  std::vector<Point2> p(n);
  for (auto& q : p) q = {u(rng), u(rng)};
  return SamplingGraph(p, random_weights(n, rng));
}

SamplingGraph shifted(const SamplingGraph& g, const Point2& v) {
  std::vector<Point2> p = g.points();
  for (auto& q : p) q += v;
  return SamplingGraph(p, g.weights());
}

}  // namespace

TEST(SamplingGraph, ValidatesAndMergesDuplicates) {
  EXPECT_THROW(SamplingGraph({{0, 0}, {1, 0}}, {0.5, 0.4}), ValueError);
  EXPECT_THROW(SamplingGraph({{0, 0}, {1, 0}}, {1.5, -0.5}), ValueError);
  EXPECT_THROW(SamplingGraph({{0, 0}}, {0.5, 0.5}), ValueError);
  SamplingGraph g({{1, 2}, {3, 4}, {1, 2}}, {0.25, 0.5, 0.25});
  ASSERT_EQ(g.size(), 2u);
  EXPECT_DOUBLE_EQ(g.weights()[0], 0.5);
}

TEST(Emd, EqualGraphsGiveZeroAndDiagonalPlan) {
  Rng rng(1);
  SamplingGraph g = random_graph(7, rng);
  EXPECT_EQ(emd(g, g), 0.0);
  TransportPlan plan = transport_plan(g, g);
  for (Eigen::Index i = 0; i < plan.plan.rows(); ++i)
    for (Eigen::Index j = 0; j < plan.plan.cols(); ++j)
      if (i != j) EXPECT_EQ(plan.plan(i, j), 0.0);
}

TEST(Emd, UnitMassesAtDistance) {
  SamplingGraph a({{1.0, 2.0}}, {1.0}), b({{4.0, 6.0}}, {1.0});
  EXPECT_DOUBLE_EQ(emd(a, b), 5.0);
}

TEST(Emd, CrossingCaseTakesCheaperMatching) {
  // Matchings: straight pairs cost 1 + 1, crossed pairs cost 2 * sqrt(101).
  SamplingGraph a({{0, 0}, {10, 0}}, {0.5, 0.5});
  SamplingGraph b({{10, 1}, {0, 1}}, {0.5, 0.5});
  TransportPlan plan = transport_plan(a, b);
  EXPECT_NEAR(plan.cost, 1.0, 1e-12);
  EXPECT_NEAR(plan.plan(0, 1), 0.5, 1e-12);
  EXPECT_NEAR(plan.plan(1, 0), 0.5, 1e-12);
  EXPECT_NEAR(plan.plan(0, 0), 0.0, 1e-12);
}

TEST(Emd, MatchesOneDimensionalOracle) {
  Rng rng(2);
  std::uniform_int_distribution<std::size_t> size(1, 9);
  std::uniform_real_distribution<double> u(-5.0, 5.0), ang(0.0, 6.283185307179586);
  for (int trial = 0; trial < 200; ++trial) {
    const double th = ang(rng);
    const Point2 dir{std::cos(th), std::sin(th)}, origin{u(rng), u(rng)};
    auto make = [&](std::vector<double>& xs, std::vector<double>& ws) {
      const std::size_t n = size(rng);
      xs.resize(n);
      for (auto& x : xs) x = u(rng);
      ws = random_weights(n, rng);
      std::vector<Point2> p;
      for (double x : xs) p.push_back(origin + x * dir);
      return SamplingGraph(p, ws);
    };
    std::vector<double> xa, wa, xb, wb;
    SamplingGraph a = make(xa, wa), b = make(xb, wb);
    EXPECT_NEAR(emd(a, b), wasserstein_1d(xa, wa, xb, wb), 1e-9);
  }
}

TEST(Emd, MatchesPolytopeEnumeration) {
  Rng rng(3);
  std::uniform_int_distribution<std::size_t> size(1, 6);
  for (int trial = 0; trial < 50; ++trial) {
    SamplingGraph a = random_graph(size(rng), rng), b = random_graph(size(rng), rng);
    Eigen::VectorXd sa = Eigen::Map<const Eigen::VectorXd>(a.weights().data(), static_cast<Eigen::Index>(a.size()));
    Eigen::VectorXd sb = Eigen::Map<const Eigen::VectorXd>(b.weights().data(), static_cast<Eigen::Index>(b.size()));
    Eigen::MatrixXd cost(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < b.size(); ++j)
        cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (a.points()[i] - b.points()[j]).norm();
    EXPECT_NEAR(emd(a, b), enumerate_transport(sa, sb, cost), 1e-9);
  }
}

TEST(Emd, EnumerationOracleAgreesWithHandSolvedInstance) {
  Eigen::VectorXd s(2), d(2);
  s << 0.5, 0.5;
  d << 0.5, 0.5;
  Eigen::MatrixXd c(2, 2);
  c << 3.0, 1.0, 1.0, 3.0;
  EXPECT_DOUBLE_EQ(enumerate_transport(s, d, c), 1.0);
}

TEST(Emd, PlanMarginalsCostAndCentroidBound) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    SamplingGraph a = random_graph(12, rng), b = random_graph(9, rng);
    TransportPlan plan = transport_plan(a, b);
    for (std::size_t i = 0; i < a.size(); ++i)
      EXPECT_NEAR(plan.plan.row(static_cast<Eigen::Index>(i)).sum(), a.weights()[i], 1e-9);
    for (std::size_t j = 0; j < b.size(); ++j)
      EXPECT_NEAR(plan.plan.col(static_cast<Eigen::Index>(j)).sum(), b.weights()[j], 1e-9);
    EXPECT_GE(plan.plan.minCoeff(), 0.0);
    double cost = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < b.size(); ++j)
        cost += plan.plan(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * (a.points()[i] - b.points()[j]).norm();
    EXPECT_NEAR(cost, plan.cost, 1e-9);
    EXPECT_NEAR(plan.cost, emd(a, b), 1e-12);
    EXPECT_GE(plan.cost + 1e-12, (a.mean() - b.mean()).norm());
  }
}

TEST(Emd, MetricAxioms) {
  Rng rng(5);
  std::uniform_int_distribution<std::size_t> size(1, 8);
  for (int trial = 0; trial < 500; ++trial) {
    SamplingGraph a = random_graph(size(rng), rng), b = random_graph(size(rng), rng), c = random_graph(size(rng), rng);
    const double ab = emd(a, b), ba = emd(b, a), bc = emd(b, c), ac = emd(a, c);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-9);
    EXPECT_LE(ac, ab + bc + 1e-9);
  }
}

TEST(Emd, TranslationCovariance) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    SamplingGraph a = random_graph(6, rng), b = random_graph(5, rng);
    const Point2 v{1.5 * trial - 30.0, 0.7};
    const double base = emd(a, b);
    EXPECT_NEAR(emd(shifted(a, v), shifted(b, v)), base, 1e-9);
    EXPECT_LE(std::abs(emd(shifted(a, v), b) - base), v.norm() + 1e-9);
  }
}

TEST(Emd, TinyWeightsArePruned) {
  SamplingGraph a({{0, 0}, {100, 100}}, {1.0 - 1e-13, 1e-13});
  SamplingGraph b({{3, 4}}, {1.0});
  EXPECT_NEAR(emd(a, b), 5.0, 1e-12);
}

TEST(Emd, LargeInstanceSolves) {
  Rng rng(7);
  SamplingGraph a = random_graph(300, rng, 100.0), b = random_graph(250, rng, 100.0);
  TransportPlan plan = transport_plan(a, b);
  EXPECT_NEAR(plan.plan.sum(), 1.0, 1e-9);
  EXPECT_GE(plan.cost + 1e-12, (a.mean() - b.mean()).norm());
}

TEST(Transport, FloatScalarInstantiation) {
  Eigen::VectorXf s(2), d(3);
  s << 0.5f, 0.5f;
  d << 0.25f, 0.25f, 0.5f;
  Eigen::MatrixXf c(2, 3);
  c << 0, 1, 2, 2, 1, 0;
  const auto sol = solve_transport<float>(s, d, c);
  EXPECT_NEAR(sol.cost, 0.25f, 1e-6f);
  EXPECT_THROW(solve_transport<float>(s, s, c), ShapeError);
}

TEST(EmdSelftest, SmallRunPasses) {
  EmdSelftestOptions o;
  o.instances_1d = 20;
  o.instances_2d = 5;
  o.triples = 20;
  o.seed = 11;
  EXPECT_TRUE(emd_selftest(o).ok());
}
