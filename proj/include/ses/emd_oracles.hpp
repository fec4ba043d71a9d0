#pragma once

#include "ses/emd.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace ses {

/// W1 distance between two distributions on the real line, integrating
/// |F_a - F_b| between consecutive merged support points.
double wasserstein_1d(const std::vector<double>& xa, const std::vector<double>& wa, const std::vector<double>& xb,
                      const std::vector<double>& wb);

/// Exact transport cost by exhaustive search over the vertices of the
/// transportation polytope, built by peeling leaves of their support forests.
double enumerate_transport(const Eigen::VectorXd& supply, const Eigen::VectorXd& demand, const Eigen::MatrixXd& cost);

struct EmdSelftestOptions {
  std::size_t instances_1d = 200;
  std::size_t instances_2d = 50;
  std::size_t triples = 500;
  std::uint64_t seed = 0;
};

struct EmdSelftestResult {
  double max_err_1d = 0.0;
  double max_err_enumeration = 0.0;
  double max_axiom_violation = 0.0;  // negativity, asymmetry or triangle excess
  bool ok(double tol = 1e-9) const {
    return max_err_1d < tol && max_err_enumeration < tol && max_axiom_violation <= tol;
  }
};

/// n points uniform in [0, spread)^2 with weights drawn from [0.05, 1.05), normalised.
SamplingGraph random_graph(Rng& rng, std::size_t n, double spread);

/// Checks emd() against the 1-D closed form on collinear graphs, against
/// enumerate_transport on planar graphs, and the metric axioms on triples.
EmdSelftestResult emd_selftest(const EmdSelftestOptions& opts);

}  // namespace ses
