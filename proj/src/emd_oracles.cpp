#include "ses/emd_oracles.hpp"

#include "ses/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <random>
#include <string>
#include <unordered_map>

namespace ses {

double wasserstein_1d(const std::vector<double>& xa, const std::vector<double>& wa, const std::vector<double>& xb,
                      const std::vector<double>& wb) {
  if (xa.size() != wa.size() || xb.size() != wb.size() || xa.empty() || xb.empty())
    throw ValueError("wasserstein_1d: mismatched or empty inputs");
  struct Ev {
    double x, da, db;
  };
  std::vector<Ev> ev;
  for (std::size_t i = 0; i < xa.size(); ++i) ev.push_back({xa[i], wa[i], 0.0});
  for (std::size_t i = 0; i < xb.size(); ++i) ev.push_back({xb[i], 0.0, wb[i]});
  std::sort(ev.begin(), ev.end(), [](const Ev& l, const Ev& r) { return l.x < r.x; });
  double fa = 0.0, fb = 0.0, acc = 0.0;
  for (std::size_t i = 0; i + 1 < ev.size(); ++i) {
    fa += ev[i].da;
    fb += ev[i].db;
    acc += std::abs(fa - fb) * (ev[i + 1].x - ev[i].x);
  }
  return acc;
}

namespace {

// Every vertex of the transportation polytope has a forest as its support.
// Peeling a leaf of that forest sends the leaf's whole residual along its
// only edge, which is min(residual row, residual column). Searching over
// every peel order therefore visits every vertex; sub-problems reached by
// different orders are shared through the memo.
struct Peeler {
  std::size_t n, m;
  const Eigen::MatrixXd& c;
  double tol;
  std::unordered_map<std::string, double> memo;

  double best(std::uint32_t rows, std::uint32_t cols, const std::vector<double>& res) {
    if (rows == 0 || cols == 0) return 0.0;
    std::string key(sizeof rows + sizeof cols, '\0');
    std::memcpy(key.data(), &rows, sizeof rows);
    std::memcpy(key.data() + sizeof rows, &cols, sizeof cols);
    for (std::size_t v = 0; v < n + m; ++v) {
      const bool active = v < n ? (rows >> v) & 1u : (cols >> (v - n)) & 1u;
      if (active) key.append(reinterpret_cast<const char*>(&res[v]), sizeof(double));
    }
    if (auto it = memo.find(key); it != memo.end()) return it->second;

    double out = std::numeric_limits<double>::infinity();
    std::vector<double> next = res;
    for (std::size_t i = 0; i < n; ++i) {
      if (!((rows >> i) & 1u)) continue;
      for (std::size_t j = 0; j < m; ++j) {
        if (!((cols >> j) & 1u)) continue;
        const double ri = res[i], cj = res[n + j], flow = std::min(ri, cj);
        std::uint32_t r2 = rows, c2 = cols;
        // Equal residuals close both nodes: a degenerate vertex.
        if (ri - flow <= tol) r2 &= ~(1u << i);
        if (cj - flow <= tol) c2 &= ~(1u << j);
        next[i] = ri - flow;
        next[n + j] = cj - flow;
        const double v = flow * c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) + best(r2, c2, next);
        next[i] = ri;
        next[n + j] = cj;
        out = std::min(out, v);
      }
    }
    memo.emplace(std::move(key), out);
    return out;
  }
};

}  // namespace

double enumerate_transport(const Eigen::VectorXd& supply, const Eigen::VectorXd& demand, const Eigen::MatrixXd& cost) {
  const auto n = static_cast<std::size_t>(supply.size()), m = static_cast<std::size_t>(demand.size());
  if (n == 0 || m == 0 || n > 16 || m > 16) throw ValueError("enumerate_transport: unsupported problem size");
  if (cost.rows() != supply.size() || cost.cols() != demand.size()) throw ShapeError("enumerate_transport: cost shape");
  std::vector<double> res(n + m);
  for (std::size_t i = 0; i < n; ++i) res[i] = supply(static_cast<Eigen::Index>(i));
  for (std::size_t j = 0; j < m; ++j) res[n + j] = demand(static_cast<Eigen::Index>(j));
  const double scale = std::max(supply.sum(), demand.sum());
  Peeler p{n, m, cost, 1e-12 * scale, {}};
  const double best = p.best((1u << n) - 1u, (1u << m) - 1u, res);
  if (!std::isfinite(best)) throw NumericError("enumerate_transport: no feasible vertex found");
  return best;
}

SamplingGraph random_graph(Rng& rng, std::size_t n, double spread) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Point2> pts;
  std::vector<double> w;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pts.emplace_back(spread * u(rng), spread * u(rng));
    w.push_back(0.05 + u(rng));
    s += w.back();
  }
  for (auto& x : w) x /= s;
  return SamplingGraph(pts, w);
}

EmdSelftestResult emd_selftest(const EmdSelftestOptions& opts) {
  Rng rng(opts.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> size(1, 6);
  EmdSelftestResult r;
  for (std::size_t i = 0; i < opts.instances_1d; ++i) {
    // Points on a random line; the 1-D oracle sees only the line coordinate.
    const Point2 origin(10 * u(rng), 10 * u(rng));
    const double angle = 6.283185307179586 * u(rng);
    const Point2 dir(std::cos(angle), std::sin(angle));
    std::vector<double> ta, tb, wa, wb;
    std::vector<Point2> pa, pb;
    const std::size_t na = size(rng), nb = size(rng);
    for (std::size_t j = 0; j < na; ++j) ta.push_back(5 * u(rng)), wa.push_back(0.05 + u(rng));
    for (std::size_t j = 0; j < nb; ++j) tb.push_back(5 * u(rng)), wb.push_back(0.05 + u(rng));
    double sa = 0, sb = 0;
    for (double x : wa) sa += x;
    for (double x : wb) sb += x;
    for (auto& x : wa) x /= sa;
    for (auto& x : wb) x /= sb;
    for (double t : ta) pa.push_back(origin + t * dir);
    for (double t : tb) pb.push_back(origin + t * dir);
    const double err = std::abs(emd(SamplingGraph(pa, wa), SamplingGraph(pb, wb)) - wasserstein_1d(ta, wa, tb, wb));
    r.max_err_1d = std::max(r.max_err_1d, err);
  }
  for (std::size_t i = 0; i < opts.instances_2d; ++i) {
    const std::size_t n = size(rng), m = size(rng);
    const SamplingGraph a = random_graph(rng, n, 8.0), b = random_graph(rng, m, 8.0);
    Eigen::MatrixXd cost(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
    for (Eigen::Index p = 0; p < cost.rows(); ++p)
      for (Eigen::Index q = 0; q < cost.cols(); ++q)
        cost(p, q) = (a.points()[static_cast<std::size_t>(p)] - b.points()[static_cast<std::size_t>(q)]).norm();
    const Eigen::VectorXd wa = Eigen::Map<const Eigen::VectorXd>(a.weights().data(), cost.rows());
    const Eigen::VectorXd wb = Eigen::Map<const Eigen::VectorXd>(b.weights().data(), cost.cols());
    r.max_err_enumeration = std::max(r.max_err_enumeration, std::abs(emd(a, b) - enumerate_transport(wa, wb, cost)));
  }
  for (std::size_t i = 0; i < opts.triples; ++i) {
    const SamplingGraph a = random_graph(rng, size(rng), 8.0), b = random_graph(rng, size(rng), 8.0),
                        c = random_graph(rng, size(rng), 8.0);
    const double ab = emd(a, b), ba = emd(b, a), bc = emd(b, c), ac = emd(a, c);
    r.max_axiom_violation = std::max({r.max_axiom_violation, -ab, std::abs(ab - ba), ac - ab - bc});
  }
  return r;
}

}  // namespace ses
