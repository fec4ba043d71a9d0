#include "ses/gradcheck.hpp"

#include "ses/error.hpp"
#include "ses/nn.hpp"
#include "ses/ops.hpp"
#include "ses/rnm.hpp"
#include "ses/ses_layer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace ses {

GradcheckResult gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                          const GradcheckOptions& opts) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor l = loss();
  if (l.numel() != 1) throw ShapeError("gradcheck: loss must be a scalar");
  l.backward();

  std::vector<std::vector<double>> analytic(inputs.size()), numeric(inputs.size());
  std::vector<std::vector<std::size_t>> probes(inputs.size());
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    const std::size_t n = t.numel();
    analytic[ti].assign(n, 0.0);
    if (t.has_grad()) std::copy(t.grad_data().begin(), t.grad_data().end(), analytic[ti].begin());

    auto& idx = probes[ti];
    const std::size_t step = (opts.max_entries == 0 || n <= opts.max_entries) ? 1 : n / opts.max_entries;
    for (std::size_t i = 0; i < n && (opts.max_entries == 0 || idx.size() < opts.max_entries); i += step)
      idx.push_back(i);

    NoGradGuard ng;
    auto data = t.mutable_data();
    for (std::size_t i : idx) {
      const double orig = data[i];
      data[i] = orig + opts.h;
      const double up = loss().item();
      data[i] = orig - opts.h;
      const double down = loss().item();
      data[i] = orig;
      numeric[ti].push_back((up - down) / (2.0 * opts.h));
    }
  }

  std::vector<double> tensor_scale(inputs.size(), 0.0);
  double global_scale = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    for (std::size_t p = 0; p < probes[ti].size(); ++p)
      tensor_scale[ti] = std::max({tensor_scale[ti], std::abs(numeric[ti][p]), std::abs(analytic[ti][probes[ti][p]])});
    global_scale = std::max(global_scale, tensor_scale[ti]);
  }

  GradcheckResult res;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti)
    for (std::size_t p = 0; p < probes[ti].size(); ++p) {
      const double a = analytic[ti][probes[ti][p]], nm = numeric[ti][p];
      const double denom =
          std::max({std::abs(a), std::abs(nm), 1e-2 * tensor_scale[ti], 1e-3 * global_scale, 1e-12});
      const double err = std::abs(a - nm) / denom;
      if (res.worst.empty() || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = std::to_string(ti) + "[" + std::to_string(probes[ti][p]) + "]";
      }
      ++res.probed;
    }
  for (auto& t : inputs) t.zero_grad();
  return res;
}


namespace {

// Scalar loss sum(y * r) with a fixed random r, so every output entry
// contributes with its own weight.
Tensor project(const Tensor& y, Rng& rng_for_shape, std::vector<Tensor>& cache) {
  if (cache.empty()) cache.push_back(Tensor::randn(y.shape(), rng_for_shape));
  return sum(mul(y, cache.front()));
}

struct Case {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor()> loss;
};

}  // namespace

std::vector<SuiteEntry> gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  auto randn = [&](Shape s) { return Tensor::randn(std::move(s), rng); };
  auto positive = [&](Shape s) { return Tensor::uniform(std::move(s), rng, 0.1, 1.0); };
  std::vector<Case> cases;

  auto projected = [&](const std::string& name, std::vector<Tensor> inputs, std::function<Tensor()> f) {
    auto cache = std::make_shared<std::vector<Tensor>>();
    auto prng = std::make_shared<Rng>(rng());
    cases.push_back({name, std::move(inputs), [f, cache, prng] { return project(f(), *prng, *cache); }});
  };

  {
    Tensor a = randn({3, 4}), b = randn({3, 4});
    projected("add", {a, b}, [a, b] { return add(a, b); });
    projected("sub", {a, b}, [a, b] { return sub(a, b); });
    projected("mul", {a, b}, [a, b] { return mul(a, b); });
    Tensor big = randn({2, 3, 4});
    projected("mul_broadcast", {big, b}, [big, b] { return mul(big, b); });
    projected("scale", {a}, [a] { return scale(a, -1.7); });
    cases.push_back({"sum", {a}, [a] { return sum(mul(a, a)); }});
    cases.push_back({"mean", {a}, [a] { return mean(mul(a, a)); }});
  }
  {
    Tensor a = randn({4, 5}), b = randn({5, 3});
    projected("matmul", {a, b}, [a, b] { return matmul(a, b); });
  }
  {
    Tensor x = randn({3, 5, 2});
    projected("softmax_axis1", {x}, [x] { return softmax(x, {1}); });
    projected("softmax_axes12", {x}, [x] { return softmax(x, {1, 2}); });
  }
  {
    Tensor x = randn({2, 4, 5});
    projected("unfold", {x}, [x] { return unfold(x, 3); });
    projected("relu", {x}, [x] { return relu(x); });
    projected("reshape", {x}, [x] { return x.reshape({8, 5}); });
    Tensor y = randn({2, 2, 5});
    projected("concat", {x, y}, [x, y] { return concat({x, y}, 1); });
  }
  {
    Tensor x = randn({2, 5, 5});
    projected("maxpool2", {x}, [x] { return maxpool2(x); });
    Tensor g = randn({2, 3, 4, 4});
    projected("global_avg_pool", {g}, [g] { return global_avg_pool(g); });
  }
  {
    Tensor logits = randn({4, 5});
    auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0, 3, 4, 1});
    cases.push_back({"cross_entropy", {logits}, [logits, labels] { return cross_entropy(logits, *labels); }});
  }
  {
    auto lin = std::make_shared<Linear>(Linear::init(3, 4, rng));
    Tensor x = randn({2, 3, 3, 3});
    projected("linear", {x, lin->weight, lin->bias}, [x, lin] { return linear_forward(*lin, x, 1); });
  }
  {
    Tensor x = randn({3, 4, 3, 3});
    Tensor g = positive({4}), b = randn({4});
    projected("batchnorm_train", {x, g, b}, [x, g, b] { return batch_norm_batch_stats(x, g, b, 1e-5, 1); });
    auto mu = std::make_shared<std::vector<double>>(std::vector<double>{0.1, -0.2, 0.3, 0.0});
    auto var = std::make_shared<std::vector<double>>(std::vector<double>{1.0, 0.5, 2.0, 0.8});
    projected("batchnorm_eval", {x, g, b},
              [x, g, b, mu, var] { return batch_norm_fixed_stats(x, g, b, *mu, *var, 1e-5, 1); });
  }
  {
    Tensor q = randn({2, 3, 4, 5}), k = randn({2, 3, 4, 5});
    projected("pairwise_relation", {q, k}, [q, k] { return pairwise_relation(q, k, 3); });
    Tensor logits = randn({2, 2, 9, 4, 5});
    projected("footprint_softmax", {logits}, [logits] { return footprint_softmax(logits); });
    Tensor v = randn({2, 4, 4, 5}), w = positive({2, 2, 9, 4, 5});
    projected("aggregate", {v, w}, [v, w] { return aggregate(v, w, 3, 2); });
    auto zeta = std::make_shared<Linear>(Linear::init(10, 1, rng));
    projected("embed_transformation", {v, w, zeta->weight, zeta->bias},
              [v, w, zeta] { return embed_transformation(v, w, *zeta, 2); });
  }
  {
    auto bn = std::make_shared<BatchNorm>(BatchNorm::init(3));
    bn->gamma = positive({3}).set_requires_grad();
    bn->beta = randn({3}).set_requires_grad();
    Tensor x = randn({2, 3, 4, 4});
    const std::uint64_t noise_seed = rng();
    projected("rnm_train", {x, bn->gamma, bn->beta}, [x, bn, noise_seed] {
      Rng noise(noise_seed);
      RNMConfig cfg;
      cfg.r = 0.05;
      RNMOutput o = rnm_forward(*bn, x, cfg, Mode::train, noise, 1);
      return concat({o.clean, o.perturbed}, 1);
    });
  }
  {
    SESLayerConfig cfg;
    cfg.c_in = cfg.c_out = 16;
    cfg.k = 7;
    cfg.r1 = 1;
    cfg.r2 = 4;
    cfg.r3 = 4;
    auto layer = std::make_shared<SESLayer>(SESLayer::init(cfg, rng));
    auto bn = std::make_shared<BatchNorm>(BatchNorm::init(16));
    Tensor x = randn({2, 16, 6, 6});
    std::vector<Tensor> inputs{x, bn->gamma, bn->beta};
    ParamList params;
    layer->collect("ses", params);
    for (const auto& p : params)
      if (p.trainable) inputs.push_back(*p.tensor);
    const std::uint64_t noise_seed = rng();
    projected("ses_block", inputs, [x, bn, layer, noise_seed] {
      Rng noise(noise_seed);
      RNMOutput o = rnm_forward(*bn, x, RNMConfig{}, Mode::train, noise, 1);
      Tensor v = relu(o.clean), qk = relu(o.perturbed);
      return add(x, ses_forward(*layer, v, qk, qk, Mode::train));
    });
  }

  std::vector<SuiteEntry> out;
  for (auto& c : cases) out.push_back({c.name, gradcheck(c.loss, c.inputs)});
  return out;
}

}  // namespace ses
