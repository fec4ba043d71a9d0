#pragma once

#include "ses/nn.hpp"
#include "ses/tensor.hpp"

#include <string>
#include <utility>

namespace ses {

/// Which SES inputs receive the noise-perturbed branch.
struct Routing {
  bool q = true;
  bool k = true;
  bool v = false;

  /// "qk", "q", "k", "v", "qv", "kv", "qkv" or "none".
  static Routing parse(const std::string& text);
  std::string str() const;
  bool any() const { return q || k || v; }
  bool operator==(const Routing&) const = default;
};

struct RNMConfig {
  double r = 0.005;  // noise variance
  Routing routing;
  void validate() const;
};

struct RNMOutput {
  Tensor clean;
  Tensor perturbed;
};

/// Randomized normalization. In train mode `clean` is batch norm of x and
/// `perturbed` is batch norm of x + N(0, r), standardised with its own batch
/// statistics; only the clean branch updates the running statistics. In eval
/// mode both outputs are the batch-norm eval output and no noise is drawn.
RNMOutput rnm_forward(BatchNorm& layer, const Tensor& x, const RNMConfig& cfg, Mode mode, Rng& rng,
                      std::size_t channel_axis = 1);

}  // namespace ses
