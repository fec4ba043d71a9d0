#include "ses/export.hpp"

#include "ses/error.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace ses {

namespace fs = std::filesystem;

Image8 mask_overlay(const ImageGrid& img, const Probe& probe, std::size_t cy, std::size_t cx, std::size_t channel) {
  if (probe.kind != Probe::Kind::mask) throw ValueError("overlays need a mask probe");
  if (!probe.valid_center(static_cast<long>(cy), static_cast<long>(cx)))
    throw ValueError("centre (" + std::to_string(cy) + ", " + std::to_string(cx) + ") is too close to the border");
  if (channel >= probe.samplings()) throw ValueError("mask channel out of range");
  const std::size_t h = img.height(), w = img.width();
  Image8 out(w, h, 3);
  auto gray = [&](std::size_t y, std::size_t x) {
    return static_cast<double>(std::lround(std::clamp(img.at(0, y, x), 0.0, 1.0) * 255.0));
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = static_cast<std::uint8_t>(gray(y, x));

  const std::size_t k = probe.k, kk = k * k, hw = probe.height * probe.width;
  const auto m = probe.masks.data();
  auto weight = [&](std::size_t j) { return m[(channel * kk + j) * hw + cy * probe.width + cx]; };
  double wmax = 0.0;
  for (std::size_t j = 0; j < kk; ++j) wmax = std::max(wmax, weight(j));
  if (!(wmax > 0.0)) return out;
  const std::size_t d = probe.stride;
  for (std::size_t j = 0; j < kk; ++j) {
    const double a = weight(j) / wmax;
    const std::size_t row = cy + j / k - k / 2, col = cx + j % k - k / 2;
    for (std::size_t y = row * d; y < std::min(h, (row + 1) * d); ++y)
      for (std::size_t x = col * d; x < std::min(w, (col + 1) * d); ++x) {
        const double g = gray(y, x);
        out.at(y, x, 0) = static_cast<std::uint8_t>(std::lround(g * (1.0 - a) + 255.0 * a));
        out.at(y, x, 1) = out.at(y, x, 2) = static_cast<std::uint8_t>(std::lround(g * (1.0 - a)));
      }
  }
  return out;
}

std::vector<std::string> export_masks(Network& net, const ImageGrid& img, std::size_t layer, std::size_t cy,
                                      std::size_t cx, const std::string& out_dir) {
  const auto probes = NetworkSampler(net).probe(img);
  if (layer >= probes.size())
    throw ValueError("layer " + std::to_string(layer) + " out of range (network has " +
                     std::to_string(probes.size()) + " SES blocks)");
  const Probe& p = probes[layer];
  if (!p.valid_center(static_cast<long>(cy), static_cast<long>(cx)))
    throw ValueError("centre (" + std::to_string(cy) + ", " + std::to_string(cx) + ") of layer " +
                     std::to_string(layer) + " is too close to the border");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
  std::vector<std::string> files;
  for (std::size_t c = 0; c < p.samplings(); ++c) {
    const std::string name = "mask_l" + std::to_string(layer) + "_y" + std::to_string(cy) + "_x" +
                             std::to_string(cx) + "_c" + std::to_string(c) + ".ppm";
    const std::string path = (fs::path(out_dir) / name).string();
    write_pnm(path, mask_overlay(img, p, cy, cx, c));
    files.push_back(path);
  }
  return files;
}

}  // namespace ses
