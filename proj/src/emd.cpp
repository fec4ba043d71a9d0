#include "ses/emd.hpp"

#include "ses/error.hpp"
#include "ses/transport.hpp"

#include <cmath>
#include <map>
#include <numeric>

namespace ses {

SamplingGraph::SamplingGraph(std::vector<Point2> points, std::vector<double> weights) {
  if (points.size() != weights.size())
    throw ValueError("sampling graph: " + std::to_string(points.size()) + " points but " +
                     std::to_string(weights.size()) + " weights");
  if (points.empty()) throw ValueError("sampling graph: no support points");
  double tot = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!std::isfinite(weights[i]) || weights[i] < 0.0)
      throw ValueError("sampling graph: weight " + std::to_string(i) + " is negative or non-finite");
    if (!points[i].allFinite()) throw ValueError("sampling graph: non-finite support point");
    tot += weights[i];
  }
  if (std::abs(tot - 1.0) > kMassTolerance)
    throw ValueError("sampling graph: weights sum to " + std::to_string(tot) + ", expected 1");

  std::map<std::pair<double, double>, std::size_t> index;
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto [it, fresh] = index.try_emplace({points[i].x(), points[i].y()}, points_.size());
    if (fresh) {
      points_.push_back(points[i]);
      weights_.push_back(weights[i]);
    } else {
      weights_[it->second] += weights[i];
    }
  }
}

double SamplingGraph::total() const { return std::accumulate(weights_.begin(), weights_.end(), 0.0); }

Point2 SamplingGraph::mean() const {
  Point2 m = Point2::Zero();
  for (std::size_t i = 0; i < points_.size(); ++i) m += weights_[i] * points_[i];
  return m / total();
}

namespace {

struct Pruned {
  std::vector<std::size_t> keep;
  Eigen::VectorXd mass;
};

Pruned prune(const SamplingGraph& g) {
  Pruned p;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.weights()[i] >= kPruneWeight) p.keep.push_back(i);
  if (p.keep.empty()) throw ValueError("sampling graph has no mass above the prune threshold");
  p.mass.resize(static_cast<Eigen::Index>(p.keep.size()));
  for (std::size_t i = 0; i < p.keep.size(); ++i) p.mass(static_cast<Eigen::Index>(i)) = g.weights()[p.keep[i]];
  p.mass /= p.mass.sum();
  return p;
}

}  // namespace

TransportPlan transport_plan(const SamplingGraph& a, const SamplingGraph& b) {
  if (a.size() == 0 || b.size() == 0) throw ValueError("emd of an empty sampling graph");
  const Pruned pa = prune(a), pb = prune(b);
  const auto n = static_cast<Eigen::Index>(pa.keep.size());
  const auto m = static_cast<Eigen::Index>(pb.keep.size());
  Eigen::MatrixXd cost(n, m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      cost(i, j) = (a.points()[pa.keep[static_cast<std::size_t>(i)]] -
                    b.points()[pb.keep[static_cast<std::size_t>(j)]])
                       .norm();
  auto sol = solve_transport<double>(pa.mass, pb.mass, cost);

  TransportPlan out;
  out.plan.setZero(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      out.plan(static_cast<Eigen::Index>(pa.keep[static_cast<std::size_t>(i)]),
               static_cast<Eigen::Index>(pb.keep[static_cast<std::size_t>(j)])) = sol.plan(i, j);
  out.cost = sol.cost;
  return out;
}

double emd(const SamplingGraph& a, const SamplingGraph& b) { return transport_plan(a, b).cost; }

}  // namespace ses
