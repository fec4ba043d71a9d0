#pragma once

#include "ses/tensor.hpp"

#include <string>
#include <vector>

namespace ses {

enum class Mode { train, eval };

/// A named slot in a model. Buffers (running statistics) are saved with the
/// model but never touched by the optimizer.
struct NamedTensor {
  std::string name;
  Tensor* tensor;
  bool trainable;
};
using ParamList = std::vector<NamedTensor>;

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out], may be undefined

  /// Weights and bias ~ U(-1/sqrt(in), 1/sqrt(in)).
  static Linear init(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  std::size_t in() const { return weight.size(1); }
  std::size_t out() const { return weight.size(0); }
  std::size_t parameter_count() const { return weight.numel() + bias.numel(); }
  void collect(const std::string& prefix, ParamList& out);
};

/// Applies the layer along `feature_axis` independently at every other index.
/// The default axis is the channel axis of [N,C,...] and the last axis of [N,in].
Tensor linear_forward(const Linear& layer, const Tensor& x, std::size_t feature_axis = 1);

struct BatchNorm {
  Tensor gamma;         // [C]
  Tensor beta;          // [C]
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm init(std::size_t channels);
  std::size_t channels() const { return gamma.numel(); }
  std::size_t parameter_count() const { return gamma.numel() + beta.numel(); }
  void collect(const std::string& prefix, ParamList& out);
};

/// Per-channel batch statistics (population variance, clamped at zero).
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

/// gamma * (x - mean_B) / sqrt(var_B + eps) + beta with statistics taken over
/// every axis except `channel_axis`. Fills `stats` when non-null.
Tensor batch_norm_batch_stats(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                              std::size_t channel_axis, BatchStats* stats = nullptr);

/// Same map with fixed statistics; gradients reach x, gamma and beta only.
Tensor batch_norm_fixed_stats(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              std::span<const double> mean, std::span<const double> var, double eps,
                              std::size_t channel_axis);

/// Train mode normalises with batch statistics and moves the running
/// statistics toward them by `momentum`; eval mode uses the running statistics.
Tensor batchnorm_forward(BatchNorm& layer, const Tensor& x, Mode mode, std::size_t channel_axis = 1);

/// running <- running + momentum * (batch - running)
void update_running_stats(BatchNorm& layer, const BatchStats& stats);

}  // namespace ses
