// Fused mask regressor: relation, BN, ReLU, Linear, BN, ReLU, Linear and
// the footprint softmax in one op.
//
// The composed version materialises eight [N,C,k*k,H,W] intermediates per
// layer. Here the work runs one (sample, footprint offset) block at a time,
// a [channels, H*W] slab that stays in cache. Batch statistics are merged
// across blocks with Chan's update, and the backward sweep recomputes the
// chain instead of storing it, so only the output masks persist.

#include "footprint.hpp"
#include "ses/error.hpp"
#include "ses/ses_layer.hpp"

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>

namespace ses {

namespace {

using RMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using StridedRows = Eigen::Map<RMat, 0, Eigen::OuterStride<>>;

Vec to_vec(std::span<const double> v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

RMat to_mat(const Tensor& t) {
  return Eigen::Map<const RMat>(t.data().data(), static_cast<Eigen::Index>(t.size(0)),
                                static_cast<Eigen::Index>(t.size(1)));
}

// Running per-row mean and sum of squared deviations (Chan et al. merge).
struct Moments {
  Vec mean, m2;
  double count = 0.0;

  explicit Moments(Eigen::Index rows) : mean(Vec::Zero(rows)), m2(Vec::Zero(rows)) {}

  void add(const RMat& block) {
    const double nb = static_cast<double>(block.cols());
    const Vec bmean = block.rowwise().mean();
    Vec bm2(block.rows());
    for (Eigen::Index r = 0; r < block.rows(); ++r)
      bm2(r) = (block.row(r).array() - bmean(r)).square().sum();
    const double tot = count + nb;
    const Vec delta = bmean - mean;
    mean += delta * (nb / tot);
    m2 += bm2 + delta.cwiseProduct(delta) * (count * nb / tot);
    count = tot;
  }
  Vec var() const { return (m2 / count).cwiseMax(0.0); }
};

struct Dims {
  std::size_t n, c, g, cw, h, w, k, kk, hw;
  bool pos;
};

// Parameters and normalisation constants frozen at forward time.
struct Frozen {
  Vec g1, b1, mean1, inv1;  // first BN, G rows
  RMat w1;
  Vec fb1;                  // first Linear, G -> C
  Vec g2, b2, mean2, inv2;  // second BN, C rows
  RMat w2;
  Vec fb2;                  // second Linear, C -> c_w

  Vec scale1() const { return g1.cwiseProduct(inv1); }
  Vec shift1() const { return b1 - mean1.cwiseProduct(scale1()); }
  Vec scale2() const { return g2.cwiseProduct(inv2); }
  Vec shift2() const { return b2 - mean2.cwiseProduct(scale2()); }
};

// rel = q - shifted k (zero padded), plus the two offset rows when enabled.
void relation_block(const Dims& d, const double* q, const double* k, std::size_t n, std::size_t j,
                    RMat& rel) {
  rel.resize(static_cast<Eigen::Index>(d.g), static_cast<Eigen::Index>(d.hw));
  const auto off = detail::footprint_offset(j, d.k);
  for (std::size_t c = 0; c < d.c; ++c) {
    const double* qp = q + (n * d.c + c) * d.hw;
    const double* kp = k + (n * d.c + c) * d.hw;
    double* row = rel.row(static_cast<Eigen::Index>(c)).data();
    std::copy(qp, qp + d.hw, row);
    detail::for_shifted_rows(d.h, d.w, off, [&](auto y, auto sy, auto x0, auto x1, auto dx) {
      double* r = row + y * static_cast<std::ptrdiff_t>(d.w);
      const double* kr = kp + sy * static_cast<std::ptrdiff_t>(d.w) + dx;
      for (auto x = x0; x < x1; ++x) r[x] -= kr[x];
    });
  }
  if (d.pos) {
    const double scale = d.k > 1 ? 1.0 / static_cast<double>(d.k / 2) : 1.0;
    rel.row(static_cast<Eigen::Index>(d.c)).setConstant(static_cast<double>(off.dy) * scale);
    rel.row(static_cast<Eigen::Index>(d.c + 1)).setConstant(static_cast<double>(off.dx) * scale);
  }
}

// Row-wise helpers. Rows are channels; looping over them keeps every
// inner operation on a contiguous, vectorisable row.

// dst.row(r) = max(0, src.row(r) * a[r] + b[r])
void affine_relu_rows(const RMat& src, const Vec& a, const Vec& b, RMat& dst) {
  dst.resize(src.rows(), src.cols());
  for (Eigen::Index r = 0; r < src.rows(); ++r)
    dst.row(r) = (src.row(r).array() * a(r) + b(r)).cwiseMax(0.0);
}

void add_row_bias(RMat& m, const Vec& b) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).array() += b(r);
}

// sg += Σ g, sgx += Σ g * (x - mean) * inv, per row.
template <typename G>
void bn_sums(const G& g, const RMat& x, const Vec& mean, const Vec& inv, Vec& sg, Vec& sgx) {
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    sg(r) += g.row(r).sum();
    sgx(r) += (g.row(r).array() * (x.row(r).array() - mean(r))).sum() * inv(r);
  }
}

// Batch-norm input gradient from output gradient g. With batch statistics:
// coef * (g - mg - xhat * mgx); with fixed statistics: coef * g.
template <typename G>
void bn_backward_rows(const G& g, const RMat& x, const Vec& mean, const Vec& inv, const Vec& coef,
                      const Vec* mg, const Vec* mgx, RMat& out) {
  out.resize(g.rows(), g.cols());
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    if (mg)
      out.row(r) = coef(r) * (g.row(r).array() - (*mg)(r) -
                              (x.row(r).array() - mean(r)) * (inv(r) * (*mgx)(r)));
    else
      out.row(r) = coef(r) * g.row(r).array();
  }
}

// Per-block scratch for the forward chain.
// ReLU masks are read back as r > 0, which matches a > 0 exactly.
struct Chain {
  RMat rel, r1, h1, r2;

  void to_h1(const Frozen& f, const Vec& s1, const Vec& t1) {
    affine_relu_rows(rel, s1, t1, r1);
    h1.noalias() = f.w1 * r1;
    add_row_bias(h1, f.fb1);
  }
  void to_r2(const Vec& s2, const Vec& t2) {
    affine_relu_rows(h1, s2, t2, r2);
  }
};

// In-place softmax over the footprint of one sample's [c_w, k*k, H*W] logits.
void softmax_footprint(double* p, std::size_t cw, std::size_t kk, std::size_t hw) {
  using Row = Eigen::Map<Eigen::ArrayXd>;
  const auto n = static_cast<Eigen::Index>(hw);
  Eigen::ArrayXd mx(n), tot(n);
  for (std::size_t c = 0; c < cw; ++c) {
    double* base = p + c * kk * hw;
    mx = Row(base, n);
    for (std::size_t j = 1; j < kk; ++j) mx = mx.max(Row(base + j * hw, n));
    tot.setZero();
    for (std::size_t j = 0; j < kk; ++j) {
      Row r(base + j * hw, n);
      r = (r - mx).exp();
      tot += r;
    }
    tot = tot.inverse();
    for (std::size_t j = 0; j < kk; ++j) Row(base + j * hw, n) *= tot;
  }
}

// Logits of sample n for every offset, written as [c_w, k*k, H*W] at dst
// unless dst is null. Keeps h1 and r2 per offset when asked.
void sample_logits(const Dims& d, const Frozen& f, const double* q, const double* k, std::size_t n,
                   double* dst, std::vector<RMat>* h1s = nullptr, std::vector<RMat>* r2s = nullptr) {
  const Vec s1 = f.scale1(), t1 = f.shift1(), s2 = f.scale2(), t2 = f.shift2();
  Chain ch;
  RMat lg;
  for (std::size_t j = 0; j < d.kk; ++j) {
    relation_block(d, q, k, n, j, ch.rel);
    ch.to_h1(f, s1, t1);
    ch.to_r2(s2, t2);
    if (h1s) (*h1s)[j] = ch.h1;
    if (r2s) (*r2s)[j] = ch.r2;
    if (!dst) continue;
    lg.noalias() = f.w2 * ch.r2;
    add_row_bias(lg, f.fb2);
    StridedRows out(dst + j * d.hw, static_cast<Eigen::Index>(d.cw), static_cast<Eigen::Index>(d.hw),
                    Eigen::OuterStride<>(static_cast<Eigen::Index>(d.kk * d.hw)));
    out = lg;
  }
}

void add_to(std::span<double> dst, const Vec& v) {
  if (dst.empty()) return;
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += v(static_cast<Eigen::Index>(i));
}

void add_to(std::span<double> dst, const RMat& m) {
  if (dst.empty()) return;
  Eigen::Map<RMat>(dst.data(), m.rows(), m.cols()) += m;
}

}  // namespace

Tensor mask_regressor(SESLayer& layer, const Tensor& q, const Tensor& k, Mode mode) {
  const auto& cfg = layer.cfg;
  if (q.rank() != 4 || q.shape() != k.shape())
    throw ShapeError("mask_regressor: query " + to_string(q.shape()) + " and key " +
                     to_string(k.shape()) + " must be equal [N,C,H,W]");
  if (q.size(1) != cfg.c_qk())
    throw ShapeError("mask_regressor: expected " + std::to_string(cfg.c_qk()) + " channels, got " +
                     std::to_string(q.size(1)));
  for (const Linear* l : {&layer.gamma_fc1, &layer.gamma_fc2})
    if (!l->bias.defined()) throw ValueError("mask_regressor: γ linear layers need a bias");

  Dims d{};
  d.n = q.size(0);
  d.c = q.size(1);
  d.pos = cfg.positional_encoding;
  d.g = d.c + (d.pos ? 2 : 0);
  d.cw = cfg.c_w();
  d.h = q.size(2);
  d.w = q.size(3);
  d.k = cfg.k;
  d.kk = cfg.footprint();
  d.hw = d.h * d.w;
  const auto* qv = q.data().data();
  const auto* kv = k.data().data();
  const bool train = mode == Mode::train;

  Frozen f;
  f.g1 = to_vec(layer.gamma_bn1.gamma.data());
  f.b1 = to_vec(layer.gamma_bn1.beta.data());
  f.w1 = to_mat(layer.gamma_fc1.weight);
  f.fb1 = to_vec(layer.gamma_fc1.bias.data());
  f.g2 = to_vec(layer.gamma_bn2.gamma.data());
  f.b2 = to_vec(layer.gamma_bn2.beta.data());
  f.w2 = to_mat(layer.gamma_fc2.weight);
  f.fb2 = to_vec(layer.gamma_fc2.bias.data());

  auto invert = [](const Vec& var, double eps) { return (var.array() + eps).rsqrt().matrix(); };
  if (train) {
    Moments m1(static_cast<Eigen::Index>(d.g));
    Chain ch;
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t j = 0; j < d.kk; ++j) {
        relation_block(d, qv, kv, n, j, ch.rel);
        m1.add(ch.rel);
      }
    const Vec var1 = m1.var();
    f.mean1 = m1.mean;
    f.inv1 = invert(var1, layer.gamma_bn1.eps);

    Moments m2(static_cast<Eigen::Index>(d.c));
    const Vec s1 = f.scale1(), t1 = f.shift1();
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t j = 0; j < d.kk; ++j) {
        relation_block(d, qv, kv, n, j, ch.rel);
        ch.to_h1(f, s1, t1);
        m2.add(ch.h1);
      }
    const Vec var2 = m2.var();
    f.mean2 = m2.mean;
    f.inv2 = invert(var2, layer.gamma_bn2.eps);

    auto stats = [](const Vec& mean, const Vec& var) {
      return BatchStats{std::vector<double>(mean.data(), mean.data() + mean.size()),
                        std::vector<double>(var.data(), var.data() + var.size())};
    };
    update_running_stats(layer.gamma_bn1, stats(f.mean1, var1));
    update_running_stats(layer.gamma_bn2, stats(f.mean2, var2));
  } else {
    f.mean1 = to_vec(layer.gamma_bn1.running_mean.data());
    f.inv1 = invert(to_vec(layer.gamma_bn1.running_var.data()), layer.gamma_bn1.eps);
    f.mean2 = to_vec(layer.gamma_bn2.running_mean.data());
    f.inv2 = invert(to_vec(layer.gamma_bn2.running_var.data()), layer.gamma_bn2.eps);
  }

  const std::size_t per_sample = d.cw * d.kk * d.hw;
  Buffer out(d.n * per_sample);
  for (std::size_t n = 0; n < d.n; ++n) {
    sample_logits(d, f, qv, kv, n, out.data() + n * per_sample);
    softmax_footprint(out.data() + n * per_sample, d.cw, d.kk, d.hw);
  }

  // Backward reuses the masks rather than recomputing the softmax.
  std::shared_ptr<const Buffer> saved;
  if (grad_enabled()) saved = std::make_shared<const Buffer>(out);

  std::vector<Tensor> inputs{q,
                             k,
                             layer.gamma_bn1.gamma,
                             layer.gamma_bn1.beta,
                             layer.gamma_fc1.weight,
                             layer.gamma_fc1.bias,
                             layer.gamma_bn2.gamma,
                             layer.gamma_bn2.beta,
                             layer.gamma_fc2.weight,
                             layer.gamma_fc2.bias};
  return Tensor::from_op(
      {d.n, d.cw, d.kk, d.h, d.w}, std::move(out), "mask_regressor", std::move(inputs),
      [q, k, d, f = std::move(f), train, saved = std::move(saved)](std::span<const double> g, GradSink& sink) {
        const auto* qv = q.data().data();
        const auto* kv = k.data().data();
        const auto C = static_cast<Eigen::Index>(d.c), G = static_cast<Eigen::Index>(d.g),
                   CW = static_cast<Eigen::Index>(d.cw), HW = static_cast<Eigen::Index>(d.hw);
        const double count = static_cast<double>(d.n * d.kk * d.hw);
        const Vec s1 = f.scale1(), t1 = f.shift1(), s2 = f.scale2(), t2 = f.shift2();
        const std::size_t per_sample = d.cw * d.kk * d.hw;

        // Gradients w.r.t. the BN outputs, one [G, H*W] slab per block.
        Buffer slab(d.n * d.kk * d.g * d.hw);
        auto slab_at = [&](std::size_t n, std::size_t j, Eigen::Index rows) {
          return Eigen::Map<RMat>(slab.data() + (n * d.kk + j) * d.g * d.hw, rows, HW);
        };

        // Softmax and second Linear; collects the second BN's sums.
        RMat gw2 = RMat::Zero(CW, C);
        Vec gfb2 = Vec::Zero(CW), sum_g2 = Vec::Zero(C), sum_gx2 = Vec::Zero(C);
        {
          Buffer lg(per_sample);
          std::vector<RMat> h1s(d.kk), r2s(d.kk);
          Buffer dot(d.hw);
          RMat ga2;
          for (std::size_t n = 0; n < d.n; ++n) {
            if (saved) {
              sample_logits(d, f, qv, kv, n, nullptr, &h1s, &r2s);
              std::copy_n(saved->data() + n * per_sample, per_sample, lg.data());
            } else {
              sample_logits(d, f, qv, kv, n, lg.data(), &h1s, &r2s);
              softmax_footprint(lg.data(), d.cw, d.kk, d.hw);
            }
            const double* gs = g.data() + n * per_sample;
            for (std::size_t c = 0; c < d.cw; ++c) {
              double* p = lg.data() + c * d.kk * d.hw;
              const double* gc = gs + c * d.kk * d.hw;
              std::fill(dot.begin(), dot.end(), 0.0);
              for (std::size_t j = 0; j < d.kk; ++j)
                for (std::size_t i = 0; i < d.hw; ++i) dot[i] += p[j * d.hw + i] * gc[j * d.hw + i];
              for (std::size_t j = 0; j < d.kk; ++j)
                for (std::size_t i = 0; i < d.hw; ++i) p[j * d.hw + i] *= gc[j * d.hw + i] - dot[i];
            }
            for (std::size_t j = 0; j < d.kk; ++j) {
              StridedRows gl(lg.data() + j * d.hw, CW, HW,
                             Eigen::OuterStride<>(static_cast<Eigen::Index>(d.kk * d.hw)));
              gw2.noalias() += gl * r2s[j].transpose();
              gfb2 += gl.rowwise().sum();
              ga2.noalias() = f.w2.transpose() * gl;
              ga2 = (r2s[j].array() > 0.0).select(ga2, 0.0);
              bn_sums(ga2, h1s[j], f.mean2, f.inv2, sum_g2, sum_gx2);
              slab_at(n, j, C) = ga2;
            }
          }
        }
        add_to(sink(6), sum_gx2);
        add_to(sink(7), sum_g2);
        add_to(sink(8), gw2);
        add_to(sink(9), gfb2);

        // Second BN and first Linear; collects the first BN's sums.
        RMat gw1 = RMat::Zero(C, G);
        Vec gfb1 = Vec::Zero(C), sum_g1 = Vec::Zero(G), sum_gx1 = Vec::Zero(G);
        {
          Chain ch;
          RMat gh1, ga1;
          const Vec coef2 = s2, mg2 = sum_g2 / count, mgx2 = sum_gx2 / count;
          for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t j = 0; j < d.kk; ++j) {
              relation_block(d, qv, kv, n, j, ch.rel);
              ch.to_h1(f, s1, t1);
              auto ga2 = slab_at(n, j, C);
              bn_backward_rows(ga2, ch.h1, f.mean2, f.inv2, coef2, train ? &mg2 : nullptr,
                               train ? &mgx2 : nullptr, gh1);
              gw1.noalias() += gh1 * ch.r1.transpose();
              gfb1 += gh1.rowwise().sum();
              ga1.noalias() = f.w1.transpose() * gh1;
              ga1 = (ch.r1.array() > 0.0).select(ga1, 0.0);
              bn_sums(ga1, ch.rel, f.mean1, f.inv1, sum_g1, sum_gx1);
              slab_at(n, j, G) = ga1;
            }
        }
        add_to(sink(2), sum_gx1);
        add_to(sink(3), sum_g1);
        add_to(sink(4), gw1);
        add_to(sink(5), gfb1);

        // First BN, then the relation scatters into q and k.
        auto gq = sink(0);
        auto gk = sink(1);
        if (gq.empty() && gk.empty()) return;
        RMat rel, grel;
        const Vec mg1 = sum_g1 / count, mgx1 = sum_gx1 / count;
        for (std::size_t n = 0; n < d.n; ++n)
          for (std::size_t j = 0; j < d.kk; ++j) {
            auto ga1 = slab_at(n, j, G);
            if (train) relation_block(d, qv, kv, n, j, rel);
            bn_backward_rows(ga1, rel, f.mean1, f.inv1, s1, train ? &mg1 : nullptr,
                             train ? &mgx1 : nullptr, grel);
            const auto off = detail::footprint_offset(j, d.k);
            for (std::size_t c = 0; c < d.c; ++c) {
              const double* gr = grel.row(static_cast<Eigen::Index>(c)).data();
              if (!gq.empty()) {
                double* dq = gq.data() + (n * d.c + c) * d.hw;
                for (std::size_t i = 0; i < d.hw; ++i) dq[i] += gr[i];
              }
              if (!gk.empty()) {
                double* dk = gk.data() + (n * d.c + c) * d.hw;
                detail::for_shifted_rows(d.h, d.w, off, [&](auto y, auto sy, auto x0, auto x1, auto dx) {
                  const double* grow = gr + y * static_cast<std::ptrdiff_t>(d.w);
                  double* krow = dk + sy * static_cast<std::ptrdiff_t>(d.w) + dx;
                  for (auto x = x0; x < x1; ++x) krow[x] -= grow[x];
                });
              }
            }
          }
      });
}

}  // namespace ses
