#pragma once

#include "ses/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace ses {

struct GradcheckOptions {
  double h = 1e-6;
  /// Cap on probed entries per tensor (evenly spaced); 0 probes all.
  std::size_t max_entries = 0;
};

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t probed = 0;
  std::string worst;  // "<tensor index>[<flat index>]"
};

/// Compares the reverse-mode gradient of the scalar `loss` with central
/// differences in every entry of `inputs`. The inputs are perturbed in place
/// and restored. The relative error of one entry is
///   |a - n| / max(|a|, |n|, 1e-2 * S_t, 1e-3 * S, 1e-12)
/// where S_t is the largest gradient magnitude within that tensor and S the
/// largest over all inputs. Entries whose true gradient vanishes (a bias
/// followed by batch norm, say) are thereby judged against the problem's own
/// gradient scale rather than against finite-difference rounding noise.
GradcheckResult gradcheck(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                          const GradcheckOptions& opts = {});

struct SuiteEntry {
  std::string name;
  GradcheckResult result;
};

/// Checks every differentiable op and a full residual SES block
/// (k=7, 16 channels, r1=1, r2=4, r3=4, RNM in front) on random inputs drawn
/// from `seed`.
std::vector<SuiteEntry> gradcheck_suite(std::uint64_t seed);

}  // namespace ses
