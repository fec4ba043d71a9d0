#include "ses/nn.hpp"

#include "ses/error.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace ses {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;
using RowMap = Eigen::Map<RowMatrix>;

// [outer, axis, inner] factorisation of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  AxisSplit r;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i < axis) r.outer *= s[i];
    else if (i == axis) r.len = s[i];
    else r.inner *= s[i];
  }
  return r;
}

}  // namespace

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  if (in == 0 || out == 0) throw ValueError("linear layer needs positive extents");
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = Tensor::uniform({out, in}, rng, -bound, bound).set_requires_grad();
  if (with_bias) l.bias = Tensor::uniform({out}, rng, -bound, bound).set_requires_grad();
  return l;
}

void Linear::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", &weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", &bias, true});
}

Tensor linear_forward(const Linear& layer, const Tensor& x, std::size_t feature_axis) {
  const auto sp = split_at(x.shape(), feature_axis);
  const auto in = static_cast<Eigen::Index>(layer.in());
  const auto out_f = static_cast<Eigen::Index>(layer.out());
  if (sp.len != layer.in())
    throw ShapeError("linear: feature axis has " + std::to_string(sp.len) + " entries, layer expects " +
                     std::to_string(layer.in()));
  const bool has_bias = layer.bias.defined();
  Shape shape = x.shape();
  shape[feature_axis] = layer.out();
  const auto inner = static_cast<Eigen::Index>(sp.inner);
  const auto outer = static_cast<Eigen::Index>(sp.outer);

  Buffer y(numel(shape));
  ConstRowMap W(layer.weight.data().data(), out_f, in);
  const auto xv = x.data();
  if (inner == 1) {
    RowMap Y(y.data(), outer, out_f);
    Y.noalias() = ConstRowMap(xv.data(), outer, in) * W.transpose();
    if (has_bias) Y.rowwise() += layer.bias.vec().transpose();
  } else {
    for (Eigen::Index o = 0; o < outer; ++o) {
      RowMap Y(y.data() + o * out_f * inner, out_f, inner);
      Y.noalias() = W * ConstRowMap(xv.data() + o * in * inner, in, inner);
      if (has_bias) Y.colwise() += layer.bias.vec();
    }
  }

  std::vector<Tensor> inputs{x, layer.weight};
  if (has_bias) inputs.push_back(layer.bias);
  Tensor weight = layer.weight;
  return Tensor::from_op(
      std::move(shape), std::move(y), "linear", std::move(inputs),
      [x, weight, has_bias, in, out_f, inner, outer](std::span<const double> g, GradSink& sink) {
        ConstRowMap W(weight.data().data(), out_f, in);
        auto gx = sink(0);
        auto gw = sink(1);
        std::span<double> gb = has_bias ? sink(2) : std::span<double>{};
        const auto xv = x.data();
        if (inner == 1) {
          ConstRowMap G(g.data(), outer, out_f);
          if (!gx.empty()) RowMap(gx.data(), outer, in).noalias() += G * W;
          if (!gw.empty())
            RowMap(gw.data(), out_f, in).noalias() += G.transpose() * ConstRowMap(xv.data(), outer, in);
          if (!gb.empty())
            Eigen::Map<Eigen::VectorXd>(gb.data(), out_f) += G.colwise().sum().transpose();
          return;
        }
        for (Eigen::Index o = 0; o < outer; ++o) {
          ConstRowMap G(g.data() + o * out_f * inner, out_f, inner);
          if (!gx.empty()) RowMap(gx.data() + o * in * inner, in, inner).noalias() += W.transpose() * G;
          if (!gw.empty())
            RowMap(gw.data(), out_f, in).noalias() +=
                G * ConstRowMap(xv.data() + o * in * inner, in, inner).transpose();
          if (!gb.empty()) Eigen::Map<Eigen::VectorXd>(gb.data(), out_f) += G.rowwise().sum();
        }
      });
}

BatchNorm BatchNorm::init(std::size_t channels) {
  if (channels == 0) throw ValueError("batch norm needs at least one channel");
  BatchNorm bn;
  bn.gamma = Tensor::ones({channels}).set_requires_grad();
  bn.beta = Tensor::zeros({channels}).set_requires_grad();
  bn.running_mean = Tensor::zeros({channels});
  bn.running_var = Tensor::ones({channels});
  return bn;
}

void BatchNorm::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".gamma", &gamma, true});
  out.push_back({prefix + ".beta", &beta, true});
  out.push_back({prefix + ".running_mean", &running_mean, false});
  out.push_back({prefix + ".running_var", &running_var, false});
}

static void check_bn_shapes(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                            std::size_t channel_axis) {
  if (channel_axis >= x.rank()) throw ShapeError("batch norm: channel axis out of range");
  const std::size_t c = x.size(channel_axis);
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("batch norm: input has " + std::to_string(c) + " channels, layer has " +
                     std::to_string(gamma.numel()));
}

Tensor batch_norm_batch_stats(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                              std::size_t channel_axis, BatchStats* stats) {
  check_bn_shapes(x, gamma, beta, channel_axis);
  const auto sp = split_at(x.shape(), channel_axis);
  const std::size_t C = sp.len, inner = sp.inner, outer = sp.outer;
  const double count = static_cast<double>(outer * inner);
  const auto xv = x.data();

  Buffer mu(C, 0.0), var(C, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = xv.data() + (o * C + c) * inner;
      double s = 0.0;
      for (std::size_t i = 0; i < inner; ++i) s += p[i];
      mu[c] += s;
    }
  for (auto& m : mu) m /= count;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = xv.data() + (o * C + c) * inner;
      double s = 0.0;
      for (std::size_t i = 0; i < inner; ++i) {
        const double d = p[i] - mu[c];
        s += d * d;
      }
      var[c] += s;
    }
  Buffer inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    var[c] = std::max(0.0, var[c] / count);
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  }

  const auto gv = gamma.data(), bv = beta.data();
  Buffer y(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (o * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i)
        y[base + i] = gv[c] * ((xv[base + i] - mu[c]) * inv_std[c]) + bv[c];
    }
  if (stats) *stats = {std::vector<double>(mu.begin(), mu.end()), std::vector<double>(var.begin(), var.end())};

  // x-hat is recomputed from the saved input during the backward sweep.
  return Tensor::from_op(
      x.shape(), std::move(y), "batch_norm", {x, gamma, beta},
      [x, mu = std::move(mu), inv_std = std::move(inv_std), gamma, outer, C, inner, count](
          std::span<const double> g, GradSink& sink) {
        const auto xv = x.data();
        auto xhat = [&](std::size_t idx, std::size_t c) { return (xv[idx] - mu[c]) * inv_std[c]; };
        Buffer sum_g(C, 0.0), sum_gx(C, 0.0);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (o * C + c) * inner;
            double sg = 0.0, sgx = 0.0;
            for (std::size_t i = 0; i < inner; ++i) {
              sg += g[base + i];
              sgx += g[base + i] * xhat(base + i, c);
            }
            sum_g[c] += sg;
            sum_gx[c] += sgx;
          }
        if (auto gg = sink(1); !gg.empty())
          for (std::size_t c = 0; c < C; ++c) gg[c] += sum_gx[c];
        if (auto gb = sink(2); !gb.empty())
          for (std::size_t c = 0; c < C; ++c) gb[c] += sum_g[c];
        auto gx = sink(0);
        if (gx.empty()) return;
        const auto gv = gamma.data();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (o * C + c) * inner;
            const double k = gv[c] * inv_std[c];
            const double mg = sum_g[c] / count, mgx = sum_gx[c] / count;
            for (std::size_t i = 0; i < inner; ++i)
              gx[base + i] += k * (g[base + i] - mg - xhat(base + i, c) * mgx);
          }
      });
}

Tensor batch_norm_fixed_stats(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              std::span<const double> mean, std::span<const double> var, double eps,
                              std::size_t channel_axis) {
  check_bn_shapes(x, gamma, beta, channel_axis);
  const auto sp = split_at(x.shape(), channel_axis);
  const std::size_t C = sp.len, inner = sp.inner, outer = sp.outer;
  if (mean.size() != C || var.size() != C) throw ShapeError("batch norm: statistics size mismatch");
  Buffer inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(std::max(0.0, var[c]) + eps);
  const auto xv = x.data();
  const auto gv = gamma.data(), bv = beta.data();
  Buffer y(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (o * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i)
        y[base + i] = gv[c] * ((xv[base + i] - mean[c]) * inv_std[c]) + bv[c];
    }
  Buffer mu(mean.begin(), mean.end());
  return Tensor::from_op(
      x.shape(), std::move(y), "batch_norm_eval", {x, gamma, beta},
      [x, gamma, mu = std::move(mu), inv_std = std::move(inv_std), outer, C, inner](
          std::span<const double> g, GradSink& sink) {
        const auto xv = x.data();
        const auto gv = gamma.data();
        auto gx = sink(0);
        auto gg = sink(1);
        auto gb = sink(2);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (o * C + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const double gi = g[base + i];
              if (!gx.empty()) gx[base + i] += gi * gv[c] * inv_std[c];
              if (!gg.empty()) gg[c] += gi * (xv[base + i] - mu[c]) * inv_std[c];
              if (!gb.empty()) gb[c] += gi;
            }
          }
      });
}

void update_running_stats(BatchNorm& layer, const BatchStats& stats) {
  auto rm = layer.running_mean.mutable_data();
  auto rv = layer.running_var.mutable_data();
  for (std::size_t c = 0; c < rm.size(); ++c) {
    rm[c] += layer.momentum * (stats.mean[c] - rm[c]);
    rv[c] += layer.momentum * (stats.var[c] - rv[c]);
  }
}

Tensor batchnorm_forward(BatchNorm& layer, const Tensor& x, Mode mode, std::size_t channel_axis) {
  if (mode == Mode::eval)
    return batch_norm_fixed_stats(x, layer.gamma, layer.beta, layer.running_mean.data(),
                                  layer.running_var.data(), layer.eps, channel_axis);
  BatchStats stats;
  Tensor y = batch_norm_batch_stats(x, layer.gamma, layer.beta, layer.eps, channel_axis, &stats);
  update_running_stats(layer, stats);
  return y;
}

}  // namespace ses
