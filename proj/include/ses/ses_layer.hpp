#pragma once

#include "ses/nn.hpp"
#include "ses/tensor.hpp"

namespace ses {

/// Hyperparameters of one sampling-equivariant self-attention layer.
///
/// r1 and r2 shrink the value and query/key widths; r3 is the number of
/// consecutive value channels that share one sampling mask.
struct SESLayerConfig {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t k = 7;
  std::size_t r1 = 1;
  std::size_t r2 = 1;
  std::size_t r3 = 1;
  /// Ablation switches. The SES layer itself runs with neither positional
  /// encoding nor ζ disabled; the pairwise-SAN baseline flips both.
  bool positional_encoding = false;
  bool transformation_embedding = true;

  std::size_t c_v() const { return c_in / r1; }
  std::size_t c_qk() const { return c_in / r2; }
  std::size_t c_w() const { return c_v() / r3; }
  std::size_t footprint() const { return k * k; }
  /// Throws ValueError naming the violated constraint.
  void validate() const;
};

struct SESLayer {
  SESLayerConfig cfg;
  Linear lin_v;  // c_in -> c_v
  Linear lin_q;  // c_in -> c_qk
  Linear lin_k;  // c_in -> c_qk
  // Mask regressor: BN, ReLU, Linear, BN, ReLU, Linear along the feature axis.
  BatchNorm gamma_bn1;
  Linear gamma_fc1;  // c_qk (+2 with positional encoding) -> c_qk
  BatchNorm gamma_bn2;
  Linear gamma_fc2;  // c_qk -> c_w
  Linear zeta;       // 1 + k*k -> 1, shared by every channel and position
  Linear lin_out;    // c_v -> c_out

  static SESLayer init(const SESLayerConfig& cfg, Rng& rng);
  std::size_t parameter_count() const;
  void collect(const std::string& prefix, ParamList& out);
};

/// Parameters of a k x k convolution c_in -> c_out, for size comparisons.
std::size_t conv_parameter_count(std::size_t c_in, std::size_t c_out, std::size_t k, bool bias = true);

/// rel[n,c,j,y,x] = q[n,c,y,x] - k[n,c,y+dy_j,x+dx_j] with zero padding:
/// the centre query minus the unfolded keys. [N,C,H,W] x2 -> [N,C,k*k,H,W].
Tensor pairwise_relation(const Tensor& q, const Tensor& k, std::size_t ksize);

/// Relative footprint offsets (dy, dx) / ((k-1)/2) as a constant
/// [N,2,k*k,H,W] tensor; the positional encoding of the SAN baseline.
Tensor relative_position_encoding(std::size_t n, std::size_t k, std::size_t h, std::size_t w);

/// softmax over the footprint axis of [N,C,k*k,H,W] logits.
Tensor footprint_softmax(const Tensor& logits);

/// Sampling masks w = softmax(γ(q - unfold(k))) of shape [N,c_w,k*k,H,W]
/// ([c_w,k*k,H,W] for unbatched [C,H,W] inputs). γ's batch norms use batch
/// statistics in train mode.
Tensor regress_masks(SESLayer& layer, const Tensor& q_src, const Tensor& k_src, Mode mode);

/// The same masks built from the individual ops (relation, batch norm, ReLU,
/// linear, softmax). Slower and far heavier on memory; kept as a reference.
Tensor regress_masks_composed(SESLayer& layer, const Tensor& q_src, const Tensor& k_src, Mode mode);

/// γ and the footprint softmax fused into one op on projected queries and
/// keys [N,c_qk,H,W]. Works block by block and recomputes in backward.
Tensor mask_regressor(SESLayer& layer, const Tensor& q, const Tensor& k, Mode mode);

/// Mask-weighted aggregation V'[c] = Σ_j w[c / r3, j] * unfold(v)[c, j].
Tensor aggregate(const Tensor& v, const Tensor& w, std::size_t k, std::size_t r3);

/// out[c,p] = ζ([v'[c,p], w[c / r3, :, p]]) with one (1 + k*k) -> 1 map.
Tensor embed_transformation(const Tensor& v_prime, const Tensor& w, const Linear& zeta, std::size_t r3);

/// Full layer: lin_out(ζ(aggregate(lin_v(v_src), w), w)) with
/// w = regress_masks(q_src, k_src). Writes the masks to `masks` if given.
Tensor ses_forward(SESLayer& layer, const Tensor& v_src, const Tensor& q_src, const Tensor& k_src,
                   Mode mode, Tensor* masks = nullptr);

inline Tensor ses_forward(SESLayer& layer, const Tensor& v_src, const Tensor& qk_src, Mode mode,
                          Tensor* masks = nullptr) {
  return ses_forward(layer, v_src, qk_src, qk_src, mode, masks);
}

}  // namespace ses
