#pragma once

#include "ses/harness.hpp"
#include "ses/model.hpp"
#include "ses/pnm.hpp"

#include <string>
#include <vector>

namespace ses {

/// Gray copy of channel 0 with one mask channel blended in red over its
/// footprint cells: with a = w / max(w), red = g(1 - a) + 255a and
/// green = blue = g(1 - a), where g is the 8-bit gray value.
Image8 mask_overlay(const ImageGrid& img, const Probe& probe, std::size_t cy, std::size_t cx, std::size_t channel);

/// Writes mask_l<layer>_y<cy>_x<cx>_c<channel>.ppm for every mask channel of
/// SES block `layer` at feature cell (cy, cx). Returns the written paths.
std::vector<std::string> export_masks(Network& net, const ImageGrid& img, std::size_t layer, std::size_t cy,
                                      std::size_t cx, const std::string& out_dir);

}  // namespace ses
