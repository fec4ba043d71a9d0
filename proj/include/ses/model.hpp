#pragma once

#include "ses/nn.hpp"
#include "ses/rnm.hpp"
#include "ses/ses_layer.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace ses {

struct StageConfig {
  std::size_t width = 32;
  std::size_t blocks = 2;
};

/// Toy classifier: pointwise stem, stages of residual SES blocks separated by
/// 2x2 max pooling (a pointwise transition adapts widths between stages),
/// final BN + ReLU, global average pooling and a linear head.
struct NetworkConfig {
  std::size_t in_channels = 1;
  std::size_t num_classes = 4;
  std::vector<StageConfig> stages{{32, 2}, {64, 2}};
  std::size_t k = 7;
  std::size_t r1 = 1;
  std::size_t r2 = 4;
  std::size_t r3 = 4;
  bool positional_encoding = false;
  bool transformation_embedding = true;
  RNMConfig rnm;

  SESLayerConfig layer_config(std::size_t width) const;
  void validate() const;
  bool operator==(const NetworkConfig&) const;

  /// The pairwise-SAN style ablation: positional encoding into the mask
  /// regressor and no transformation embedding.
  NetworkConfig san_ablation() const;
};

/// Strict: unknown keys and wrong types raise ConfigError naming the key.
void to_json(nlohmann::json& j, const NetworkConfig& cfg);
void from_json(const nlohmann::json& j, NetworkConfig& cfg);

/// One residual block: x + SES(relu(RNM(x))) with RNM outputs routed to
/// the value, query and key inputs per the routing flags.
struct SESBlock {
  BatchNorm rnm_bn;
  SESLayer ses;
  std::size_t stage = 0;
  Rng noise;  // seeded from the network seed plus the block index
};

class Network {
 public:
  static Network init(const NetworkConfig& cfg, std::uint64_t seed);

  /// x: [N,C,H,W] -> logits [N,classes]. When `masks` is given it receives
  /// each block's sampling masks [N,c_w,k*k,h,w] in block order.
  Tensor forward(const Tensor& x, Mode mode, std::vector<Tensor>* masks = nullptr);

  const NetworkConfig& config() const { return cfg_; }
  std::size_t num_blocks() const { return blocks_.size(); }
  /// Input pixels per feature cell seen by block b.
  std::size_t block_stride(std::size_t b) const;
  std::size_t parameter_count();
  ParamList parameters();

  /// Changes the RNM settings used by subsequent forward passes.
  void set_rnm(const RNMConfig& rnm);

 private:
  NetworkConfig cfg_;
  std::uint64_t seed_ = 0;
  Linear stem_;
  std::vector<Linear> transitions_;  // one per stage boundary
  std::vector<SESBlock> blocks_;
  BatchNorm final_bn_;
  Linear head_;

  friend Network load_checkpoint(const std::string& dir);
};

/// Checkpoint directory: manifest.json (config and ordered parameter list)
/// plus params.bin (one tensor record per entry, same order).
void save_checkpoint(const std::string& dir, Network& net, std::uint64_t seed);
Network load_checkpoint(const std::string& dir);

}  // namespace ses
