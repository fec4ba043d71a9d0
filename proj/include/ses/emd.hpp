#pragma once

#include "ses/geometry.hpp"

#include <Eigen/Core>

#include <vector>

namespace ses {

/// Discrete probability distribution over 2-D points (input-pixel units).
/// Construction validates the weights and merges coincident points.
class SamplingGraph {
 public:
  SamplingGraph() = default;
  SamplingGraph(std::vector<Point2> points, std::vector<double> weights);

  const std::vector<Point2>& points() const { return points_; }
  const std::vector<double>& weights() const { return weights_; }
  std::size_t size() const { return points_.size(); }
  double total() const;
  Point2 mean() const;

 private:
  std::vector<Point2> points_;
  std::vector<double> weights_;
};

/// Weights summing within this of 1 count as normalised.
inline constexpr double kMassTolerance = 1e-9;
/// Weights below this are dropped before solving.
inline constexpr double kPruneWeight = 1e-12;

struct TransportPlan {
  Eigen::MatrixXd plan;  // rows index a.points(), columns b.points()
  double cost = 0.0;
};

/// Exact optimal transport between two graphs under Euclidean ground distance.
TransportPlan transport_plan(const SamplingGraph& a, const SamplingGraph& b);

/// Earth mover's distance (cost of the optimal plan).
double emd(const SamplingGraph& a, const SamplingGraph& b);

}  // namespace ses
