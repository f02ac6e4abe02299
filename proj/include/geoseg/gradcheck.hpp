#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "geoseg/autodiff.hpp"

namespace geoseg {

struct GradCheckOptions {
  double eps = 1e-4;
  /// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-3;
  /// Entries probed per input tensor; 0 probes every entry.
  std::size_t max_entries_per_input = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t entries = 0;    // compared entries
  std::size_t one_sided = 0;  // compared with a one-sided difference next to a kink
  std::size_t skipped = 0;    // kinks on both sides, not compared
  /// Skipped entries must stay rare, otherwise the check would say little.
  bool passed(double tolerance = 1e-3) const {
    return max_rel_error < tolerance && entries > 0 && skipped * 10 <= entries + skipped;
  }
};

/// Compares the reverse-mode gradient of `loss()` with respect to every
/// `inputs` entry against central finite differences at steps eps and eps / 2,
/// Richardson-combined. Entries whose perturbation switches a leaky ReLU or
/// max branch on one side use a third-order one-sided stencil over the other
/// side; kinks on both sides skip the entry. `loss` must rebuild the graph from the current input values
/// on each call and return a scalar.
GradCheckResult check_gradients(const std::string& name, std::vector<ad::Value> inputs,
                                const std::function<ad::Value()>& loss, const GradCheckOptions& opts = {});

/// Every differentiable op, the layer blocks, the geometry module, the
/// contrastive boundary loss, the multi-stage loss and a 64-point network.
std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 0, const GradCheckOptions& opts = {});

}  // namespace geoseg
