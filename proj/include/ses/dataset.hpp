#pragma once

#include "ses/geometry.hpp"
#include "ses/tensor.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace ses {

enum class ShapeClass { square = 0, disk = 1, triangle = 2, cross = 3 };
inline constexpr std::size_t kNumShapeClasses = 4;
std::string to_string(ShapeClass c);

/// One drawn shape. Every class is inscribed in the circle of radius
/// `radius` around (cx, cy); `angle_deg` turns it about that centre.
struct ShapeParams {
  ShapeClass cls = ShapeClass::disk;
  double cx = 0.0;
  double cy = 0.0;
  double radius = 1.0;
  double angle_deg = 0.0;
};

/// White shape on black, anti-aliased by 4x4 supersampling per pixel.
ImageGrid render_shape(const ShapeParams& p, std::size_t side);

/// Random pose: rotation in [0, 360), radius = scale * 0.4 * side with scale
/// in [0.5, 1], centre jittered while keeping the shape inside the frame.
ShapeParams random_shape(ShapeClass cls, std::size_t side, Rng& rng);

struct ManifestEntry {
  std::string path;  // relative to the dataset directory
  int label = 0;
  std::string split;  // "train" or "val"
};

struct DatasetOptions {
  std::size_t n_per_class = 500;
  std::size_t side = 32;
  double val_fraction = 0.2;
  std::uint64_t seed = 0;
};

/// Writes img_XXXXX.pgm files and manifest.csv (path,label,split) into `dir`.
/// Within each class the last round(val_fraction * n) images go to "val".
std::vector<ManifestEntry> gen_dataset(const std::string& dir, const DatasetOptions& opts);

std::vector<ManifestEntry> read_manifest(const std::string& dir);

struct Dataset {
  std::vector<Tensor> images;  // [1,H,W] each, values in [0,1]
  std::vector<int> labels;
  std::vector<std::string> paths;
  std::size_t size() const { return images.size(); }
};

/// Loads every image of `split` listed in the manifest, in manifest order.
Dataset load_split(const std::string& dir, const std::string& split);

}  // namespace ses
