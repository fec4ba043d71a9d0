#include "ses/ops.hpp"

#include "ses/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace ses {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace

Tensor elementwise(const Tensor& a, const Tensor& b, Elementwise kind) {
  if (!is_suffix(b.shape(), a.shape()))
    throw ShapeError("elementwise: " + to_string(b.shape()) + " does not broadcast to " +
                     to_string(a.shape()));
  const auto av = a.data();
  const auto bv = b.data();
  const std::size_t n = av.size(), nb = bv.size();
  Buffer out(n);
  for (std::size_t i = 0; i < n; i += nb) {
    const double* pa = av.data() + i;
    double* po = out.data() + i;
    switch (kind) {
      case Elementwise::add:
        for (std::size_t j = 0; j < nb; ++j) po[j] = pa[j] + bv[j];
        break;
      case Elementwise::sub:
        for (std::size_t j = 0; j < nb; ++j) po[j] = pa[j] - bv[j];
        break;
      case Elementwise::mul:
        for (std::size_t j = 0; j < nb; ++j) po[j] = pa[j] * bv[j];
        break;
    }
  }
  const char* name = kind == Elementwise::add ? "add" : kind == Elementwise::sub ? "sub" : "mul";
  return Tensor::from_op(a.shape(), std::move(out), name, {a, b},
                         [a, b, kind, n, nb](std::span<const double> g, GradSink& sink) {
                           if (auto ga = sink(0); !ga.empty()) {
                             if (kind == Elementwise::mul) {
                               auto bv = b.data();
                               for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i % nb];
                             } else {
                               for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
                             }
                           }
                           if (auto gb = sink(1); !gb.empty()) {
                             auto av = a.data();
                             for (std::size_t i = 0; i < n; ++i) {
                               double d = kind == Elementwise::add   ? g[i]
                                          : kind == Elementwise::sub ? -g[i]
                                                                     : g[i] * av[i];
                               gb[i % nb] += d;
                             }
                           }
                         });
}

Tensor scale(const Tensor& a, double factor) {
  Buffer out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return Tensor::from_op(a.shape(), std::move(out), "scale", {a},
                         [factor](std::span<const double> g, GradSink& sink) {
                           auto ga = sink(0);
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * g[i];
                         });
}

Tensor sum(const Tensor& a) {
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return Tensor::from_op({}, {s}, "sum", {a}, [](std::span<const double> g, GradSink& sink) {
    auto ga = sink(0);
    for (auto& v : ga) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0) * inv;
  return Tensor::from_op({}, {s}, "mean", {a}, [inv](std::span<const double> g, GradSink& sink) {
    auto ga = sink(0);
    for (auto& v : ga) v += g[0] * inv;
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0))
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.size(0));
  const auto k = static_cast<Eigen::Index>(a.size(1));
  const auto n = static_cast<Eigen::Index>(b.size(1));
  Buffer out(static_cast<std::size_t>(m * n));
  ConstRowMap A(a.data().data(), m, k), B(b.data().data(), k, n);
  RowMap(out.data(), m, n).noalias() = A * B;
  return Tensor::from_op({a.size(0), b.size(1)}, std::move(out), "matmul", {a, b},
                         [a, b, m, k, n](std::span<const double> g, GradSink& sink) {
                           ConstRowMap G(g.data(), m, n);
                           if (auto ga = sink(0); !ga.empty())
                             RowMap(ga.data(), m, k).noalias() +=
                                 G * ConstRowMap(b.data().data(), k, n).transpose();
                           if (auto gb = sink(1); !gb.empty())
                             RowMap(gb.data(), k, n).noalias() +=
                                 ConstRowMap(a.data().data(), m, k).transpose() * G;
                         });
}

// Softmax ------------------------------------------------------------------

namespace {

// Group id of every element when normalising over `selected` axes.
std::vector<std::size_t> softmax_groups(const Shape& shape, const std::vector<bool>& selected,
                                        std::size_t& num_groups) {
  const std::size_t rank = shape.size();
  std::vector<std::size_t> group_stride(rank, 0);
  num_groups = 1;
  for (std::size_t ax = rank; ax-- > 0;) {
    if (!selected[ax]) {
      group_stride[ax] = num_groups;
      num_groups *= shape[ax];
    }
  }
  std::vector<std::size_t> ids(numel(shape));
  std::vector<std::size_t> idx(rank, 0);
  std::size_t gid = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    ids[i] = gid;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      gid += group_stride[ax];
      if (idx[ax] < shape[ax]) break;
      gid -= group_stride[ax] * shape[ax];
      idx[ax] = 0;
    }
  }
  return ids;
}

}  // namespace

Tensor softmax(const Tensor& x, std::vector<std::size_t> axes) {
  if (axes.empty()) throw ValueError("softmax: empty axis set");
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  const Shape& shape = x.shape();
  for (auto ax : axes)
    if (ax >= shape.size())
      throw ShapeError("softmax: axis " + std::to_string(ax) + " invalid for " + to_string(shape));

  const auto xv = x.data();
  Buffer y(xv.size());
  const bool contiguous = axes.back() - axes.front() + 1 == axes.size();

  if (contiguous) {
    // View as [outer, len, inner] and normalise along len.
    std::size_t outer = 1, len = 1, inner = 1;
    for (std::size_t ax = 0; ax < shape.size(); ++ax) {
      if (ax < axes.front()) outer *= shape[ax];
      else if (ax <= axes.back()) len *= shape[ax];
      else inner *= shape[ax];
    }
    Buffer mx(inner), tot(inner);
    for (std::size_t o = 0; o < outer; ++o) {
      const double* px = xv.data() + o * len * inner;
      double* py = y.data() + o * len * inner;
      std::fill(mx.begin(), mx.end(), -std::numeric_limits<double>::infinity());
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) mx[i] = std::max(mx[i], px[l * inner + i]);
      std::fill(tot.begin(), tot.end(), 0.0);
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) {
          double e = std::exp(px[l * inner + i] - mx[i]);
          py[l * inner + i] = e;
          tot[i] += e;
        }
      for (std::size_t i = 0; i < inner; ++i) tot[i] = 1.0 / tot[i];
      for (std::size_t l = 0; l < len; ++l)
        for (std::size_t i = 0; i < inner; ++i) py[l * inner + i] *= tot[i];
    }
    auto rule = [outer, len, inner](const Buffer& yv) {
      return [yv, outer, len, inner](std::span<const double> g, GradSink& sink) {
        auto gx = sink(0);
        Buffer dot(inner);
        for (std::size_t o = 0; o < outer; ++o) {
          const std::size_t base = o * len * inner;
          std::fill(dot.begin(), dot.end(), 0.0);
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i)
              dot[i] += g[base + l * inner + i] * yv[base + l * inner + i];
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t p = base + l * inner + i;
              gx[p] += yv[p] * (g[p] - dot[i]);
            }
        }
      };
    };
    auto r = rule(y);
    return Tensor::from_op(shape, std::move(y), "softmax", {x}, std::move(r));
  }

  std::vector<bool> selected(shape.size(), false);
  for (auto ax : axes) selected[ax] = true;
  std::size_t groups = 0;
  auto ids = softmax_groups(shape, selected, groups);
  Buffer mx(groups, -std::numeric_limits<double>::infinity()), tot(groups, 0.0);
  for (std::size_t i = 0; i < xv.size(); ++i) mx[ids[i]] = std::max(mx[ids[i]], xv[i]);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    y[i] = std::exp(xv[i] - mx[ids[i]]);
    tot[ids[i]] += y[i];
  }
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] /= tot[ids[i]];
  Buffer yv = y;
  return Tensor::from_op(shape, std::move(y), "softmax", {x},
                         [yv = std::move(yv), ids = std::move(ids), groups](
                             std::span<const double> g, GradSink& sink) {
                           auto gx = sink(0);
                           Buffer dot(groups, 0.0);
                           for (std::size_t i = 0; i < yv.size(); ++i) dot[ids[i]] += g[i] * yv[i];
                           for (std::size_t i = 0; i < yv.size(); ++i)
                             gx[i] += yv[i] * (g[i] - dot[ids[i]]);
                         });
}

// Unfold -------------------------------------------------------------------

namespace detail {

void unfold_plane(const double* src, double* dst, std::size_t h, std::size_t w, std::size_t k) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t j = 0; j < k * k; ++j) {
    const auto dy = static_cast<std::ptrdiff_t>(j / k) - pad;
    const auto dx = static_cast<std::ptrdiff_t>(j % k) - pad;
    double* out = dst + j * h * w;
    for (std::ptrdiff_t y = 0; y < H; ++y) {
      double* row = out + y * W;
      const std::ptrdiff_t sy = y + dy;
      if (sy < 0 || sy >= H) {
        std::fill(row, row + W, 0.0);
        continue;
      }
      const double* srow = src + sy * W;
      const std::ptrdiff_t x0 = std::min(W, std::max<std::ptrdiff_t>(0, -dx));
      const std::ptrdiff_t x1 = std::max(x0, std::min<std::ptrdiff_t>(W, W - dx));
      std::fill(row, row + x0, 0.0);
      for (std::ptrdiff_t x = x0; x < x1; ++x) row[x] = srow[x + dx];
      std::fill(row + x1, row + W, 0.0);
    }
  }
}

void fold_plane_add(const double* src, double* dst, std::size_t h, std::size_t w, std::size_t k) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  for (std::size_t j = 0; j < k * k; ++j) {
    const auto dy = static_cast<std::ptrdiff_t>(j / k) - pad;
    const auto dx = static_cast<std::ptrdiff_t>(j % k) - pad;
    const double* in = src + j * h * w;
    for (std::ptrdiff_t y = 0; y < H; ++y) {
      const std::ptrdiff_t sy = y + dy;
      if (sy < 0 || sy >= H) continue;
      const double* row = in + y * W;
      double* drow = dst + sy * W;
      const std::ptrdiff_t x0 = std::min(W, std::max<std::ptrdiff_t>(0, -dx));
      const std::ptrdiff_t x1 = std::max(x0, std::min<std::ptrdiff_t>(W, W - dx));
      for (std::ptrdiff_t x = x0; x < x1; ++x) drow[x + dx] += row[x];
    }
  }
}

}  // namespace detail

Tensor unfold(const Tensor& x, std::size_t k) {
  if (k % 2 == 0) throw ValueError("unfold: kernel size must be odd, got " + std::to_string(k));
  if (x.rank() != 3 && x.rank() != 4)
    throw ShapeError("unfold expects [C,H,W] or [N,C,H,W], got " + to_string(x.shape()));
  const Shape& s = x.shape();
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  const std::size_t planes = x.numel() / (h * w);
  const std::size_t kk = k * k;
  Shape out_shape(s.begin(), s.end() - 2);
  out_shape.insert(out_shape.end(), {kk, h, w});
  Buffer out(planes * kk * h * w);
  const auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    detail::unfold_plane(xv.data() + p * h * w, out.data() + p * kk * h * w, h, w, k);
  return Tensor::from_op(std::move(out_shape), std::move(out), "unfold", {x},
                         [planes, kk, h, w, k](std::span<const double> g, GradSink& sink) {
                           auto gx = sink(0);
                           for (std::size_t p = 0; p < planes; ++p)
                             detail::fold_plane_add(g.data() + p * kk * h * w,
                                                    gx.data() + p * h * w, h, w, k);
                         });
}

// Pointwise / pooling ------------------------------------------------------

Tensor relu(const Tensor& x) {
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return Tensor::from_op(x.shape(), std::move(out), "relu", {x},
                         [x](std::span<const double> g, GradSink& sink) {
                           auto gx = sink(0);
                           auto xv = x.data();
                           for (std::size_t i = 0; i < gx.size(); ++i)
                             if (xv[i] > 0.0) gx[i] += g[i];
                         });
}

Tensor maxpool2(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("maxpool2 needs at least two axes");
  const Shape& s = x.shape();
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  const std::size_t planes = x.numel() / (h * w);
  Shape out_shape = s;
  out_shape[s.size() - 2] = oh;
  out_shape[s.size() - 1] = ow;
  const auto xv = x.data();
  Buffer out(planes * oh * ow);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t y = 2 * oy + dy, xx = 2 * ox + dx;
            if (y >= h || xx >= w) continue;
            if (src[y * w + xx] > src[best]) best = y * w + xx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = src[best];
        arg[o] = p * h * w + best;
      }
  }
  return Tensor::from_op(std::move(out_shape), std::move(out), "maxpool2", {x},
                         [arg = std::move(arg)](std::span<const double> g, GradSink& sink) {
                           auto gx = sink(0);
                           for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += g[o];
                         });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  const double inv = 1.0 / static_cast<double>(hw);
  const auto xv = x.data();
  Buffer out(n * c);
  for (std::size_t p = 0; p < n * c; ++p)
    out[p] = std::accumulate(xv.begin() + p * hw, xv.begin() + (p + 1) * hw, 0.0) * inv;
  return Tensor::from_op({n, c}, std::move(out), "global_avg_pool", {x},
                         [hw, inv](std::span<const double> g, GradSink& sink) {
                           auto gx = sink(0);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i / hw] * inv;
                         });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy expects logits [N,L]");
  const std::size_t n = logits.size(0), l = logits.size(1);
  if (labels.size() != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= l)
      throw ValueError("cross_entropy: label " + std::to_string(y) + " outside [0," +
                       std::to_string(l) + ")");
  const auto z = logits.data();
  Buffer prob(n * l);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * l;
    const double mx = *std::max_element(row, row + l);
    double tot = 0.0;
    for (std::size_t j = 0; j < l; ++j) tot += std::exp(row[j] - mx);
    const double log_tot = std::log(tot);
    for (std::size_t j = 0; j < l; ++j) prob[i * l + j] = std::exp(row[j] - mx - log_tot);
    loss += -(row[labels[i]] - mx - log_tot);
  }
  loss /= static_cast<double>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  return Tensor::from_op({}, {loss}, "cross_entropy", {logits},
                         [prob = std::move(prob), ys = std::move(ys), n, l](
                             std::span<const double> g, GradSink& sink) {
                           auto gz = sink(0);
                           const double s = g[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i)
                             for (std::size_t j = 0; j < l; ++j) {
                               double d = prob[i * l + j] - (static_cast<int>(j) == ys[i] ? 1.0 : 0.0);
                               gz[i * l + j] += s * d;
                             }
                         });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ValueError("concat of nothing");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& t : parts) {
    const Shape& s = t.shape();
    if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t ax = 0; ax < s.size(); ++ax)
      if (ax != axis && s[ax] != shape[ax])
        throw ShapeError("concat: " + to_string(s) + " vs " + to_string(shape));
    total += s[axis];
  }
  shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t ax = 0; ax < axis; ++ax) outer *= shape[ax];
  for (std::size_t ax = axis + 1; ax < shape.size(); ++ax) inner *= shape[ax];

  Buffer out(numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : parts) {
    offsets.push_back(off);
    const std::size_t chunk = t.size(axis) * inner;
    const auto tv = t.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(tv.data() + o * chunk, chunk, out.data() + o * total * inner + off * inner);
    off += t.size(axis);
  }
  std::vector<std::size_t> extents;
  for (const auto& t : parts) extents.push_back(t.size(axis));
  return Tensor::from_op(std::move(shape), std::move(out), "concat", parts,
                         [offsets, extents, outer, inner, total](std::span<const double> g,
                                                                 GradSink& sink) {
                           for (std::size_t p = 0; p < offsets.size(); ++p) {
                             auto gp = sink(p);
                             if (gp.empty()) continue;
                             const std::size_t chunk = extents[p] * inner;
                             for (std::size_t o = 0; o < outer; ++o) {
                               const double* src = g.data() + o * total * inner + offsets[p] * inner;
                               double* dst = gp.data() + o * chunk;
                               for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                             }
                           }
                         });
}

}  // namespace ses
