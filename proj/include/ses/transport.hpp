#pragma once

#include "ses/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

namespace ses {

template <typename Scalar>
struct TransportSolution {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> plan;
  Scalar cost = Scalar(0);
  int pivots = 0;
};

/// Balanced transportation problem solved exactly by the transportation
/// simplex (MODI) method.
///
/// The basis is kept as a spanning tree of the bipartite row/column graph
/// with n + m - 1 cells (degenerate zero-flow cells included). The start is
/// the north-west corner solution. Entering cells follow Dantzig's rule;
/// after a run of degenerate pivots the solver switches to Bland's rule
/// until the objective moves again, which rules out cycling.
template <typename Scalar>
TransportSolution<Scalar> solve_transport(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& supply,
                                          const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& demand,
                                          const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& cost) {
  using Index = Eigen::Index;
  const Index n = supply.size(), m = demand.size();
  if (n == 0 || m == 0) throw ValueError("transport problem needs non-empty marginals");
  if (cost.rows() != n || cost.cols() != m) throw ShapeError("transport cost matrix has wrong shape");

  TransportSolution<Scalar> sol;
  sol.plan.setZero(n, m);
  std::vector<std::pair<Index, Index>> basis;
  basis.reserve(static_cast<std::size_t>(n + m - 1));

  {
    std::vector<Scalar> a(supply.data(), supply.data() + n), b(demand.data(), demand.data() + m);
    Index i = 0, j = 0;
    while (true) {
      const Scalar q = std::min(a[i], b[j]);
      sol.plan(i, j) = q;
      basis.emplace_back(i, j);
      a[i] -= q;
      b[j] -= q;
      if (i == n - 1 && j == m - 1) break;
      if (j == m - 1 || (i < n - 1 && a[i] <= b[j])) ++i;
      else ++j;
    }
    // Rounding residue of the last cell.
    sol.plan(n - 1, m - 1) = std::max(Scalar(0), sol.plan(n - 1, m - 1));
  }

  const Scalar cmax = cost.cwiseAbs().maxCoeff();
  const Scalar tol = Scalar(1e-12) * (Scalar(1) + cmax);
  const Index nodes = n + m;
  std::vector<Scalar> pot(static_cast<std::size_t>(nodes));
  std::vector<std::vector<std::pair<Index, std::size_t>>> adj(static_cast<std::size_t>(nodes));
  std::vector<Index> parent(static_cast<std::size_t>(nodes));
  std::vector<std::size_t> parent_edge(static_cast<std::size_t>(nodes));
  std::vector<Index> queue;
  queue.reserve(static_cast<std::size_t>(nodes));

  auto build_tree = [&](Index root) {
    for (auto& l : adj) l.clear();
    for (std::size_t e = 0; e < basis.size(); ++e) {
      adj[basis[e].first].emplace_back(n + basis[e].second, e);
      adj[n + basis[e].second].emplace_back(basis[e].first, e);
    }
    std::fill(parent.begin(), parent.end(), Index(-1));
    parent[root] = root;
    queue.assign(1, root);
    for (std::size_t h = 0; h < queue.size(); ++h) {
      const Index u = queue[h];
      for (auto [v, e] : adj[u])
        if (parent[v] < 0) {
          parent[v] = u;
          parent_edge[v] = e;
          queue.push_back(v);
        }
    }
  };

  const int max_pivots = static_cast<int>(50 * (n + m) * std::max<Index>(1, std::min(n, m)) + 1000);
  int degenerate_run = 0;
  bool bland = false;

  while (true) {
    // Potentials: u_i + v_j = c_ij on basic cells, u_0 = 0.
    build_tree(0);
    pot[0] = Scalar(0);
    for (std::size_t h = 1; h < queue.size(); ++h) {
      const Index node = queue[h];
      const auto [bi, bj] = basis[parent_edge[node]];
      if (node >= n) pot[node] = cost(bi, bj) - pot[bi];
      else pot[node] = cost(bi, bj) - pot[n + bj];
    }
    if (static_cast<Index>(queue.size()) != nodes)
      throw NumericError("transport simplex: basis is not a spanning tree");

    Index ei = -1, ej = -1;
    Scalar best = -tol;
    for (Index i = 0; i < n && !(bland && ei >= 0); ++i)
      for (Index j = 0; j < m; ++j) {
        const Scalar r = cost(i, j) - pot[i] - pot[n + j];
        if (r < best) {
          best = bland ? -tol : r;
          ei = i;
          ej = j;
          if (bland) break;
        }
      }
    if (ei < 0) break;
    if (++sol.pivots > max_pivots) throw NumericError("transport simplex: pivot limit exceeded");

    // Tree path from column ej back to row ei closes the cycle with (ei, ej).
    build_tree(ei);
    std::vector<std::size_t> path;
    for (Index node = n + ej; node != ei; node = parent[node]) path.push_back(parent_edge[node]);
    // path[0] touches column ej and loses flow, then signs alternate.
    Scalar theta = std::numeric_limits<Scalar>::infinity();
    std::size_t leave = 0;
    for (std::size_t p = 0; p < path.size(); p += 2) {
      const auto [i, j] = basis[path[p]];
      const Scalar x = sol.plan(i, j);
      const bool better = bland ? (x < theta || (x == theta && basis[path[p]] < basis[path[leave]]))
                                : x < theta;
      if (better) {
        theta = x;
        leave = p;
      }
    }
    for (std::size_t p = 0; p < path.size(); ++p) {
      const auto [i, j] = basis[path[p]];
      if (p % 2 == 0) sol.plan(i, j) = std::max(Scalar(0), sol.plan(i, j) - theta);
      else sol.plan(i, j) += theta;
    }
    sol.plan(ei, ej) = theta;
    const auto [li, lj] = basis[path[leave]];
    sol.plan(li, lj) = Scalar(0);
    basis[path[leave]] = {ei, ej};

    if (theta == Scalar(0)) {
      if (++degenerate_run > n + m) bland = true;
    } else {
      degenerate_run = 0;
      bland = false;
    }
  }

  sol.cost = (sol.plan.array() * cost.array()).sum();
  return sol;
}

}  // namespace ses
