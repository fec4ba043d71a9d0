#include "ses/dataset.hpp"

#include "ses/error.hpp"
#include "ses/pnm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace ses {

namespace fs = std::filesystem;

std::string to_string(ShapeClass c) {
  switch (c) {
    case ShapeClass::square: return "square";
    case ShapeClass::disk: return "disk";
    case ShapeClass::triangle: return "triangle";
    case ShapeClass::cross: return "cross";
  }
  return "?";
}

namespace {

// Point in shape-local coordinates (unrotated, unit circumradius r).
bool inside(ShapeClass cls, double u, double v, double r) {
  switch (cls) {
    case ShapeClass::disk: return u * u + v * v <= r * r;
    case ShapeClass::square: {
      const double half = r / std::numbers::sqrt2;
      return std::abs(u) <= half && std::abs(v) <= half;
    }
    case ShapeClass::triangle: {
      // Equilateral, apex up, circumradius r: the edge midpoints lie at
      // distance r/2 opposite each vertex.
      for (double deg : {90.0, 210.0, 330.0}) {
        const double a = deg * std::numbers::pi / 180.0;
        if (u * std::cos(a) + v * std::sin(a) > r / 2) return false;
      }
      return true;
    }
    case ShapeClass::cross: {
      const double arm = r / std::sqrt(1.0 + 1.0 / 9.0);  // corners of the arms touch the circle
      const double half_width = arm / 3.0;
      return (std::abs(u) <= arm && std::abs(v) <= half_width) || (std::abs(v) <= arm && std::abs(u) <= half_width);
    }
  }
  return false;
}

}  // namespace

ImageGrid render_shape(const ShapeParams& p, std::size_t side) {
  constexpr int ss = 4;
  ImageGrid img(1, side, side);
  const double rad = p.angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / ss - p.cx;
          const double py = static_cast<double>(y) + (sy + 0.5) / ss - p.cy;
          // Rotate the sample back into the shape frame.
          const double u = c * px + s * py, v = -s * px + c * py;
          hits += inside(p.cls, u, v, p.radius) ? 1 : 0;
        }
      img.at(0, y, x) = static_cast<double>(hits) / (ss * ss);
    }
  return img;
}

ShapeParams random_shape(ShapeClass cls, std::size_t side, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ShapeParams p;
  p.cls = cls;
  const double n = static_cast<double>(side);
  p.angle_deg = 360.0 * unit(rng);
  p.radius = (0.5 + 0.5 * unit(rng)) * 0.4 * n;
  const double jitter = std::max(0.0, 0.5 * n - p.radius - 1.0);
  p.cx = 0.5 * n + jitter * (2.0 * unit(rng) - 1.0);
  p.cy = 0.5 * n + jitter * (2.0 * unit(rng) - 1.0);
  return p;
}

std::vector<ManifestEntry> gen_dataset(const std::string& dir, const DatasetOptions& opts) {
  if (opts.side < 32) throw ValueError("dataset side must be at least 32, got " + std::to_string(opts.side));
  if (opts.n_per_class == 0) throw ValueError("n_per_class must be positive");
  if (!(opts.val_fraction >= 0.0 && opts.val_fraction < 1.0)) throw ValueError("val_fraction must be in [0, 1)");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

  Rng rng(opts.seed);
  const auto n_val = static_cast<std::size_t>(std::lround(opts.val_fraction * static_cast<double>(opts.n_per_class)));
  std::vector<ManifestEntry> entries;
  std::size_t idx = 0;
  // Interleave classes so a prefix of the manifest stays balanced.
  for (std::size_t i = 0; i < opts.n_per_class; ++i)
    for (std::size_t c = 0; c < kNumShapeClasses; ++c) {
      const auto cls = static_cast<ShapeClass>(c);
      ImageGrid img = render_shape(random_shape(cls, opts.side, rng), opts.side);
      char name[32];
      std::snprintf(name, sizeof name, "img_%05zu.pgm", idx++);
      write_pnm((fs::path(dir) / name).string(), from_grid(img));
      entries.push_back({name, static_cast<int>(c), i + n_val >= opts.n_per_class ? "val" : "train"});
    }

  std::ofstream out(fs::path(dir) / "manifest.csv");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << "path,label,split\n";
  for (const auto& e : entries) out << e.path << ',' << e.label << ',' << e.split << '\n';
  if (!out) throw IoError("manifest write failed in " + dir);
  return entries;
}

std::vector<ManifestEntry> read_manifest(const std::string& dir) {
  const auto path = fs::path(dir) / "manifest.csv";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "path,label,split") throw IoError(path.string() + ": unexpected header '" + line + "'");
  std::vector<ManifestEntry> entries;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    ManifestEntry e;
    std::string label;
    if (!std::getline(ss, e.path, ',') || !std::getline(ss, label, ',') || !std::getline(ss, e.split))
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected path,label,split");
    try {
      e.label = std::stoi(label);
    } catch (const std::exception&) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad label '" + label + "'");
    }
    if (e.label < 0 || e.label >= static_cast<int>(kNumShapeClasses))
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": label out of range");
    entries.push_back(std::move(e));
  }
  return entries;
}

Dataset load_split(const std::string& dir, const std::string& split) {
  Dataset ds;
  for (const auto& e : read_manifest(dir)) {
    if (e.split != split) continue;
    ImageGrid g = to_grid(read_pnm((fs::path(dir) / e.path).string()));
    if (g.channels() != 1) throw IoError(e.path + ": expected a graymap");
    ds.images.push_back(g.pixels);
    ds.labels.push_back(e.label);
    ds.paths.push_back(e.path);
  }
  if (ds.images.empty()) throw IoError("no '" + split + "' images in " + dir);
  return ds;
}

}  // namespace ses
