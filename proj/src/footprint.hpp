#pragma once

#include <algorithm>
#include <cstddef>

namespace ses::detail {

struct Offset {
  std::ptrdiff_t dy, dx;
};

/// Footprint index j of a k x k window, row-major, relative to its centre.
inline Offset footprint_offset(std::size_t j, std::size_t k) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  return {static_cast<std::ptrdiff_t>(j / k) - pad, static_cast<std::ptrdiff_t>(j % k) - pad};
}

// Calls body(y, sy, x0, x1, dx) for every output row y whose source row
// sy = y + dy is inside the plane; columns [x0, x1) have in-range sources.
template <typename F>
void for_shifted_rows(std::size_t h, std::size_t w, Offset off, F&& body) {
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  const std::ptrdiff_t x0 = std::min(W, std::max<std::ptrdiff_t>(0, -off.dx));
  const std::ptrdiff_t x1 = std::max(x0, std::min<std::ptrdiff_t>(W, W - off.dx));
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    const std::ptrdiff_t sy = y + off.dy;
    if (sy < 0 || sy >= H) continue;
    body(y, sy, x0, x1, off.dx);
  }
}

}  // namespace ses::detail
