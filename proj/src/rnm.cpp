#include "ses/rnm.hpp"

#include "ses/error.hpp"
#include "ses/ops.hpp"

#include <cmath>

namespace ses {

Routing Routing::parse(const std::string& text) {
  if (text == "none") return {false, false, false};
  Routing r{false, false, false};
  if (text.empty()) throw ValueError("empty RNM routing");
  for (char ch : text) {
    bool* slot = ch == 'q' ? &r.q : ch == 'k' ? &r.k : ch == 'v' ? &r.v : nullptr;
    if (!slot || *slot)
      throw ValueError("RNM routing must be one of qk|q|k|v|qv|kv|qkv|none, got '" + text + "'");
    *slot = true;
  }
  return r;
}

std::string Routing::str() const {
  if (!any()) return "none";
  std::string s;
  if (q) s += 'q';
  if (k) s += 'k';
  if (v) s += 'v';
  return s;
}

void RNMConfig::validate() const {
  if (!(r >= 0.0) || !std::isfinite(r)) throw ValueError("RNM noise variance r must be >= 0");
}

RNMOutput rnm_forward(BatchNorm& layer, const Tensor& x, const RNMConfig& cfg, Mode mode, Rng& rng,
                      std::size_t channel_axis) {
  cfg.validate();
  if (mode == Mode::eval) {
    Tensor y = batchnorm_forward(layer, x, Mode::eval, channel_axis);
    return {y, y};
  }
  Tensor clean = batchnorm_forward(layer, x, Mode::train, channel_axis);
  if (cfg.r == 0.0) return {clean, clean};
  Tensor noise = Tensor::randn(x.shape(), rng, std::sqrt(cfg.r));
  Tensor perturbed = batch_norm_batch_stats(add(x, noise), layer.gamma, layer.beta, layer.eps, channel_axis);
  return {clean, perturbed};
}

}  // namespace ses
