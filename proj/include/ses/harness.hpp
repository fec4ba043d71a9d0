#pragma once

#include "ses/emd.hpp"
#include "ses/geometry.hpp"
#include "ses/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ses {

/// Where one layer of a sampler draws its mass, for every feature cell.
///
/// Mask mode: `masks` [O,k*k,h,w] holds one normalised k x k footprint per
/// sampling channel and cell. Location mode: every cell samples at the same
/// continuous offsets (in feature cells, x then y) relative to itself, each
/// location carrying a weight; the mass is spread bilinearly over the four
/// neighbouring cells.
struct Probe {
  enum class Kind { mask, location };
  Kind kind = Kind::mask;
  std::size_t stride = 1;  // input pixels per feature cell
  std::size_t height = 0;  // feature map extents
  std::size_t width = 0;
  std::size_t k = 1;  // footprint side (mask mode)
  Tensor masks;
  std::vector<std::vector<Point2>> offsets;  // location mode, per sampling channel
  std::vector<std::vector<double>> offset_weights;

  std::size_t samplings() const;
  /// Cells a probed footprint reaches on either side of its centre.
  std::size_t radius() const;
  /// True when every footprint cell of `(cy, cx)` lies inside the map.
  bool valid_center(long cy, long cx) const;
};

Probe mask_probe(const Tensor& masks, std::size_t stride);
Probe location_probe(std::size_t stride, std::size_t height, std::size_t width,
                     std::vector<std::vector<Point2>> offsets, std::vector<std::vector<double>> weights);

/// Sampling graph of channel `o` at feature cell (cy, cx), lifted to input
/// pixels: cell c sits at stride * (c + 0.5). Throws ValueError for centres
/// whose footprint leaves the map.
SamplingGraph extract_graph(const Probe& probe, std::size_t cy, std::size_t cx, std::size_t o);

/// Support mapped through t, weights unchanged.
SamplingGraph ideal_graph(const SamplingGraph& g, const Affine2D& t);

/// Anything that yields probes for an image, one per sampling layer.
class Sampler {
 public:
  virtual ~Sampler() = default;
  virtual std::vector<Probe> probe(const ImageGrid& img) const = 0;
};

/// Eval-mode masks of every SES block of a network.
class NetworkSampler : public Sampler {
 public:
  explicit NetworkSampler(Network& net) : net_(net) {}
  std::vector<Probe> probe(const ImageGrid& img) const override;

 private:
  Network& net_;
};

/// Fixed uniform k x k masks, the sampling pattern of a plain convolution.
class ConstantSampler : public Sampler {
 public:
  ConstantSampler(std::size_t k, std::size_t stride = 1, std::size_t channels = 1)
      : k_(k), stride_(stride), channels_(channels) {}
  std::vector<Probe> probe(const ImageGrid& img) const override;

 private:
  std::size_t k_, stride_, channels_;
};

/// Stride-1 masks proportional to the image intensity in the footprint
/// (plus a small floor), a sampler that follows the content exactly.
class ContentSampler : public Sampler {
 public:
  explicit ContentSampler(std::size_t k, double floor = 1e-3) : k_(k), floor_(floor) {}
  std::vector<Probe> probe(const ImageGrid& img) const override;

 private:
  std::size_t k_;
  double floor_;
};

struct LayerRecord {
  std::size_t layer = 0;  // index into the sampler's probe list
  std::size_t center_y = 0, center_x = 0;
  std::size_t mapped_y = 0, mapped_x = 0;
  std::vector<double> emd;  // one per sampling channel, in pixels
  double mean_emd = 0.0;
};

struct ImageRecord {
  std::size_t image = 0;  // index into the image list
  TransformParams params;
  std::size_t stride = 1;
  std::size_t attempts = 1;
  std::vector<LayerRecord> layers;
  double mean_emd = 0.0;  // mean over layers of the per-layer means
};

struct AEMDReport {
  TransformKind kind = TransformKind::identity;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  std::vector<ImageRecord> records;
  double aemd = 0.0;

  /// alpha times the mean over images of ImageRecord::mean_emd, recomputed
  /// from the stored per-channel distances.
  double recompute() const;
};

void to_json(nlohmann::json& j, const AEMDReport& r);

struct AEMDOptions {
  TransformKind kind = TransformKind::rotation;
  /// Fixed transform for every image instead of random draws.
  std::optional<TransformParams> fixed;
  std::size_t n = 1;
  std::uint64_t seed = 0;
  /// Transform redraws allowed when an image has no valid centre.
  std::size_t max_attempts = 20;
  /// Worker threads; 0 reads SES_THREADS (default 1).
  std::size_t threads = 0;
};

/// Average earth mover's distance between ideally transformed and observed
/// sampling graphs. Image i of the run is images[i % images.size()]; every
/// image gets its own generator derived from (seed, i), so the report does
/// not depend on the number of threads.
AEMDReport aemd(const Sampler& sampler, const std::vector<ImageGrid>& images, const AEMDOptions& opts);

/// Worker count from SES_THREADS, at least 1.
std::size_t env_threads();

}  // namespace ses
