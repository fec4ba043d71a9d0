#include "ses/ses_layer.hpp"

#include "footprint.hpp"
#include "ses/error.hpp"
#include "ses/ops.hpp"

#include <algorithm>

namespace ses {

void SESLayerConfig::validate() const {
  auto fail = [](const std::string& what) { throw ValueError("SES layer config: " + what); };
  if (c_in == 0 || c_out == 0) fail("channel counts must be positive");
  if (k % 2 == 0) fail("kernel size k must be odd, got " + std::to_string(k));
  if (r1 == 0 || r2 == 0 || r3 == 0) fail("reduction factors must be positive");
  if (c_in % r1 != 0) fail("r1=" + std::to_string(r1) + " must divide c_in=" + std::to_string(c_in));
  if (c_in % r2 != 0) fail("r2=" + std::to_string(r2) + " must divide c_in=" + std::to_string(c_in));
  if (c_v() % r3 != 0)
    fail("r3=" + std::to_string(r3) + " must divide c_in/r1=" + std::to_string(c_v()));
}

SESLayer SESLayer::init(const SESLayerConfig& cfg, Rng& rng) {
  cfg.validate();
  SESLayer l;
  l.cfg = cfg;
  const std::size_t gamma_in = cfg.c_qk() + (cfg.positional_encoding ? 2 : 0);
  l.lin_v = Linear::init(cfg.c_in, cfg.c_v(), rng);
  l.lin_q = Linear::init(cfg.c_in, cfg.c_qk(), rng);
  l.lin_k = Linear::init(cfg.c_in, cfg.c_qk(), rng);
  l.gamma_bn1 = BatchNorm::init(gamma_in);
  l.gamma_fc1 = Linear::init(gamma_in, cfg.c_qk(), rng);
  l.gamma_bn2 = BatchNorm::init(cfg.c_qk());
  l.gamma_fc2 = Linear::init(cfg.c_qk(), cfg.c_w(), rng);
  l.zeta = Linear::init(1 + cfg.footprint(), 1, rng);
  l.lin_out = Linear::init(cfg.c_v(), cfg.c_out, rng);
  return l;
}

std::size_t SESLayer::parameter_count() const {
  std::size_t n = lin_v.parameter_count() + lin_q.parameter_count() + lin_k.parameter_count() +
                  gamma_bn1.parameter_count() + gamma_fc1.parameter_count() +
                  gamma_bn2.parameter_count() + gamma_fc2.parameter_count() + lin_out.parameter_count();
  if (cfg.transformation_embedding) n += zeta.parameter_count();
  return n;
}

void SESLayer::collect(const std::string& prefix, ParamList& out) {
  lin_v.collect(prefix + ".lin_v", out);
  lin_q.collect(prefix + ".lin_q", out);
  lin_k.collect(prefix + ".lin_k", out);
  gamma_bn1.collect(prefix + ".gamma_bn1", out);
  gamma_fc1.collect(prefix + ".gamma_fc1", out);
  gamma_bn2.collect(prefix + ".gamma_bn2", out);
  gamma_fc2.collect(prefix + ".gamma_fc2", out);
  if (cfg.transformation_embedding) zeta.collect(prefix + ".zeta", out);
  lin_out.collect(prefix + ".lin_out", out);
}

std::size_t conv_parameter_count(std::size_t c_in, std::size_t c_out, std::size_t k, bool bias) {
  return c_in * c_out * k * k + (bias ? c_out : 0);
}

namespace {

Tensor as_batch(const Tensor& x, const char* what) {
  if (x.rank() == 4) return x;
  if (x.rank() == 3) return x.reshape({1, x.size(0), x.size(1), x.size(2)});
  throw ShapeError(std::string(what) + " expects [C,H,W] or [N,C,H,W], got " + to_string(x.shape()));
}

Tensor drop_batch(const Tensor& x) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  return x.reshape(std::move(s));
}

using detail::footprint_offset;
using detail::for_shifted_rows;

}  // namespace

Tensor pairwise_relation(const Tensor& q, const Tensor& k, std::size_t ksize) {
  if (ksize % 2 == 0) throw ValueError("pairwise_relation: kernel size must be odd");
  if (q.rank() != 4 || q.shape() != k.shape())
    throw ShapeError("pairwise_relation: query " + to_string(q.shape()) + " and key " +
                     to_string(k.shape()) + " must be equal [N,C,H,W]");
  const std::size_t n = q.size(0), c = q.size(1), h = q.size(2), w = q.size(3);
  const std::size_t kk = ksize * ksize, hw = h * w;
  Buffer rel(n * c * kk * hw);
  const auto qv = q.data();
  const auto kv = k.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* qp = qv.data() + p * hw;
    double* out = rel.data() + p * kk * hw;
    detail::unfold_plane(kv.data() + p * hw, out, h, w, ksize);
    for (std::size_t j = 0; j < kk; ++j) {
      double* oj = out + j * hw;
      for (std::size_t i = 0; i < hw; ++i) oj[i] = qp[i] - oj[i];
    }
  }
  return Tensor::from_op({n, c, kk, h, w}, std::move(rel), "pairwise_relation", {q, k},
                         [n, c, kk, hw, h, w, ksize](std::span<const double> g, GradSink& sink) {
                           auto gq = sink(0);
                           auto gk = sink(1);
                           Buffer neg(kk * hw);
                           for (std::size_t p = 0; p < n * c; ++p) {
                             const double* gp = g.data() + p * kk * hw;
                             if (!gq.empty()) {
                               double* dq = gq.data() + p * hw;
                               for (std::size_t j = 0; j < kk; ++j)
                                 for (std::size_t i = 0; i < hw; ++i) dq[i] += gp[j * hw + i];
                             }
                             if (!gk.empty()) {
                               for (std::size_t i = 0; i < kk * hw; ++i) neg[i] = -gp[i];
                               detail::fold_plane_add(neg.data(), gk.data() + p * hw, h, w, ksize);
                             }
                           }
                         });
}

Tensor relative_position_encoding(std::size_t n, std::size_t k, std::size_t h, std::size_t w) {
  const std::size_t kk = k * k, hw = h * w;
  const double scale = k > 1 ? 1.0 / static_cast<double>(k / 2) : 1.0;
  Buffer pos(n * 2 * kk * hw);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < kk; ++j) {
      const auto off = footprint_offset(j, k);
      double* py = pos.data() + ((b * 2 + 0) * kk + j) * hw;
      double* px = pos.data() + ((b * 2 + 1) * kk + j) * hw;
      std::fill(py, py + hw, static_cast<double>(off.dy) * scale);
      std::fill(px, px + hw, static_cast<double>(off.dx) * scale);
    }
  return Tensor({n, 2, kk, h, w}, std::move(pos));
}

Tensor footprint_softmax(const Tensor& logits) {
  if (logits.rank() != 5) throw ShapeError("footprint_softmax expects [N,C,k*k,H,W]");
  return softmax(logits, {2});
}

Tensor regress_masks(SESLayer& layer, const Tensor& q_src, const Tensor& k_src, Mode mode) {
  const auto& cfg = layer.cfg;
  const bool unbatched = q_src.rank() == 3;
  Tensor qs = as_batch(q_src, "regress_masks");
  Tensor ks = as_batch(k_src, "regress_masks");
  if (qs.shape() != ks.shape())
    throw ShapeError("regress_masks: query source " + to_string(qs.shape()) +
                     " and key source " + to_string(ks.shape()) + " are not aligned");
  if (qs.size(1) != cfg.c_in)
    throw ShapeError("regress_masks: input has " + std::to_string(qs.size(1)) +
                     " channels, layer expects " + std::to_string(cfg.c_in));
  Tensor w = mask_regressor(layer, linear_forward(layer.lin_q, qs, 1), linear_forward(layer.lin_k, ks, 1), mode);
  return unbatched ? drop_batch(w) : w;
}

Tensor regress_masks_composed(SESLayer& layer, const Tensor& q_src, const Tensor& k_src, Mode mode) {
  const auto& cfg = layer.cfg;
  const bool unbatched = q_src.rank() == 3;
  Tensor qs = as_batch(q_src, "regress_masks_composed");
  Tensor ks = as_batch(k_src, "regress_masks_composed");
  if (qs.shape() != ks.shape())
    throw ShapeError("regress_masks_composed: query source " + to_string(qs.shape()) +
                     " and key source " + to_string(ks.shape()) + " are not aligned");
  if (qs.size(1) != cfg.c_in)
    throw ShapeError("regress_masks_composed: input has " + std::to_string(qs.size(1)) +
                     " channels, layer expects " + std::to_string(cfg.c_in));

  Tensor q = linear_forward(layer.lin_q, qs, 1);
  Tensor k = linear_forward(layer.lin_k, ks, 1);
  Tensor rel = pairwise_relation(q, k, cfg.k);
  if (cfg.positional_encoding)
    rel = concat({rel, relative_position_encoding(qs.size(0), cfg.k, qs.size(2), qs.size(3))}, 1);

  Tensor h = relu(batchnorm_forward(layer.gamma_bn1, rel, mode, 1));
  h = linear_forward(layer.gamma_fc1, h, 1);
  h = relu(batchnorm_forward(layer.gamma_bn2, h, mode, 1));
  h = linear_forward(layer.gamma_fc2, h, 1);
  Tensor w = footprint_softmax(h);
  return unbatched ? drop_batch(w) : w;
}

Tensor aggregate(const Tensor& v_in, const Tensor& w_in, std::size_t k, std::size_t r3) {
  if (k % 2 == 0) throw ValueError("aggregate: kernel size must be odd");
  if (r3 == 0) throw ValueError("aggregate: r3 must be positive");
  const bool unbatched = v_in.rank() == 3;
  Tensor v = as_batch(v_in, "aggregate");
  Tensor w = unbatched && w_in.rank() == 4
                 ? w_in.reshape({1, w_in.size(0), w_in.size(1), w_in.size(2), w_in.size(3)})
                 : w_in;
  const std::size_t kk = k * k;
  if (w.rank() != 5 || w.size(0) != v.size(0) || w.size(2) != kk || w.size(3) != v.size(2) ||
      w.size(4) != v.size(3))
    throw ShapeError("aggregate: masks " + to_string(w.shape()) + " do not match values " +
                     to_string(v.shape()) + " with k=" + std::to_string(k));
  const std::size_t n = v.size(0), cv = v.size(1), cw = w.size(1), h = v.size(2), wd = v.size(3);
  if (cv != cw * r3)
    throw ValueError("aggregate: value channels " + std::to_string(cv) + " != mask channels " +
                     std::to_string(cw) + " * r3 " + std::to_string(r3));
  const std::size_t hw = h * wd;
  const auto vv = v.data();
  const auto wv = w.data();
  Buffer out(n * cv * hw, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < cv; ++c) {
      const double* vp = vv.data() + (b * cv + c) * hw;
      const double* wp = wv.data() + (b * cw + c / r3) * kk * hw;
      double* op = out.data() + (b * cv + c) * hw;
      for (std::size_t j = 0; j < kk; ++j) {
        const double* wj = wp + j * hw;
        for_shifted_rows(h, wd, footprint_offset(j, k),
                         [&](auto y, auto sy, auto x0, auto x1, auto dx) {
                           const double* wr = wj + y * wd;
                           const double* vr = vp + sy * wd + dx;
                           double* orow = op + y * wd;
                           for (auto x = x0; x < x1; ++x) orow[x] += wr[x] * vr[x];
                         });
      }
    }
  Tensor result = Tensor::from_op(
      {n, cv, h, wd}, std::move(out), "aggregate", {v, w},
      [v, w, n, cv, cw, r3, kk, hw, h, wd, k](std::span<const double> g, GradSink& sink) {
        auto gv = sink(0);
        auto gw = sink(1);
        const auto vv = v.data();
        const auto wv = w.data();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t c = 0; c < cv; ++c) {
            const double* gp = g.data() + (b * cv + c) * hw;
            const double* vp = vv.data() + (b * cv + c) * hw;
            const std::size_t woff = (b * cw + c / r3) * kk * hw;
            for (std::size_t j = 0; j < kk; ++j) {
              const double* wj = wv.data() + woff + j * hw;
              double* dwj = gw.empty() ? nullptr : gw.data() + woff + j * hw;
              double* dvp = gv.empty() ? nullptr : gv.data() + (b * cv + c) * hw;
              for_shifted_rows(h, wd, footprint_offset(j, k),
                               [&](auto y, auto sy, auto x0, auto x1, auto dx) {
                                 const double* grow = gp + y * wd;
                                 if (dvp) {
                                   const double* wr = wj + y * wd;
                                   double* dvr = dvp + sy * wd + dx;
                                   for (auto x = x0; x < x1; ++x) dvr[x] += grow[x] * wr[x];
                                 }
                                 if (dwj) {
                                   const double* vr = vp + sy * wd + dx;
                                   double* dwr = dwj + y * wd;
                                   for (auto x = x0; x < x1; ++x) dwr[x] += grow[x] * vr[x];
                                 }
                               });
            }
          }
      });
  return unbatched ? drop_batch(result) : result;
}

Tensor embed_transformation(const Tensor& vp_in, const Tensor& w_in, const Linear& zeta, std::size_t r3) {
  const bool unbatched = vp_in.rank() == 3;
  Tensor vp = as_batch(vp_in, "embed_transformation");
  Tensor w = unbatched && w_in.rank() == 4
                 ? w_in.reshape({1, w_in.size(0), w_in.size(1), w_in.size(2), w_in.size(3)})
                 : w_in;
  if (w.rank() != 5) throw ShapeError("embed_transformation: masks must be [N,c_w,k*k,H,W]");
  const std::size_t n = vp.size(0), cv = vp.size(1), h = vp.size(2), wd = vp.size(3);
  const std::size_t cw = w.size(1), kk = w.size(2), hw = h * wd;
  if (zeta.weight.rank() != 2 || zeta.out() != 1 || zeta.in() != 1 + kk)
    throw ShapeError("embed_transformation: ζ must map 1 + k*k = " + std::to_string(1 + kk) +
                     " inputs to 1, got " + to_string(zeta.weight.shape()));
  if (r3 == 0 || cv != cw * r3 || w.size(0) != n || w.size(3) != h || w.size(4) != wd)
    throw ShapeError("embed_transformation: features " + to_string(vp.shape()) +
                     " inconsistent with masks " + to_string(w.shape()));

  const auto z = zeta.weight.data();
  const double bias = zeta.bias.defined() ? zeta.bias.data()[0] : 0.0;
  const auto vv = vp.data();
  const auto wv = w.data();
  // The mask term depends only on (mask channel, position).
  Buffer mask_term(n * cw * hw, 0.0);
  for (std::size_t m = 0; m < n * cw; ++m) {
    double* e = mask_term.data() + m * hw;
    for (std::size_t j = 0; j < kk; ++j) {
      const double zj = z[1 + j];
      const double* wj = wv.data() + (m * kk + j) * hw;
      for (std::size_t i = 0; i < hw; ++i) e[i] += zj * wj[i];
    }
  }
  Buffer out(n * cv * hw);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < cv; ++c) {
      const double* e = mask_term.data() + (b * cw + c / r3) * hw;
      const double* x = vv.data() + (b * cv + c) * hw;
      double* o = out.data() + (b * cv + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) o[i] = z[0] * x[i] + e[i] + bias;
    }

  std::vector<Tensor> inputs{vp, w, zeta.weight};
  const bool has_bias = zeta.bias.defined();
  if (has_bias) inputs.push_back(zeta.bias);
  Tensor zw = zeta.weight;
  Tensor result = Tensor::from_op(
      {n, cv, h, wd}, std::move(out), "embed_transformation", std::move(inputs),
      [vp, w, zw, has_bias, n, cv, cw, kk, hw, r3](std::span<const double> g, GradSink& sink) {
        auto gvp = sink(0);
        auto gw = sink(1);
        auto gz = sink(2);
        std::span<double> gb = has_bias ? sink(3) : std::span<double>{};
        const auto z = zw.data();
        const auto vv = vp.data();
        const auto wv = w.data();
        // Gradient summed over the r3 channels sharing each mask.
        Buffer gmask(n * cw * hw, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t c = 0; c < cv; ++c) {
            const double* gp = g.data() + (b * cv + c) * hw;
            double* gm = gmask.data() + (b * cw + c / r3) * hw;
            const double* x = vv.data() + (b * cv + c) * hw;
            double gx_dot = 0.0, gsum = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
              gm[i] += gp[i];
              gx_dot += gp[i] * x[i];
              gsum += gp[i];
            }
            if (!gvp.empty()) {
              double* dv = gvp.data() + (b * cv + c) * hw;
              for (std::size_t i = 0; i < hw; ++i) dv[i] += z[0] * gp[i];
            }
            if (!gz.empty()) gz[0] += gx_dot;
            if (!gb.empty()) gb[0] += gsum;
          }
        for (std::size_t m = 0; m < n * cw; ++m) {
          const double* gm = gmask.data() + m * hw;
          for (std::size_t j = 0; j < kk; ++j) {
            const std::size_t off = (m * kk + j) * hw;
            if (!gw.empty()) {
              const double zj = z[1 + j];
              for (std::size_t i = 0; i < hw; ++i) gw[off + i] += zj * gm[i];
            }
            if (!gz.empty()) {
              double acc = 0.0;
              for (std::size_t i = 0; i < hw; ++i) acc += gm[i] * wv[off + i];
              gz[1 + j] += acc;
            }
          }
        }
      });
  return unbatched ? drop_batch(result) : result;
}

Tensor ses_forward(SESLayer& layer, const Tensor& v_src, const Tensor& q_src, const Tensor& k_src,
                   Mode mode, Tensor* masks) {
  const auto& cfg = layer.cfg;
  const bool unbatched = v_src.rank() == 3;
  Tensor vs = as_batch(v_src, "ses_forward");
  Tensor w = regress_masks(layer, as_batch(q_src, "ses_forward"), as_batch(k_src, "ses_forward"), mode);
  if (w.size(0) != vs.size(0) || w.size(3) != vs.size(2) || w.size(4) != vs.size(3))
    throw ShapeError("ses_forward: value source " + to_string(vs.shape()) +
                     " not aligned with query/key sources");
  Tensor v = linear_forward(layer.lin_v, vs, 1);
  Tensor y = aggregate(v, w, cfg.k, cfg.r3);
  if (cfg.transformation_embedding) y = embed_transformation(y, w, layer.zeta, cfg.r3);
  y = linear_forward(layer.lin_out, y, 1);
  if (masks) *masks = unbatched ? drop_batch(w) : w;
  return unbatched ? drop_batch(y) : y;
}

}  // namespace ses
