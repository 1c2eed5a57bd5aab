#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "uadi/tensor.hpp"

namespace uadi {

class Rng;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  /// Entries re-measured at a quarter step (see grad_check_leaf).
  std::size_t retried = 0;
};

/// Compares the reverse-mode gradient of the scalar `f(x)` against central
/// differences. Relative error per element is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor), where the floor
/// is 1e5 times the rounding-noise level eps max(1, |f(x)|) / step of the
/// difference quotient. An entry whose error exceeds 1e-5 is re-measured at
/// step / 4 and the smaller error kept, so a quotient that happens to straddle
/// a relu or abs kink does not count as a mismatch.
/// Throws std::invalid_argument if two evaluations of f at x disagree.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step);

/// Same comparison for a leaf tensor that `f` closes over (model parameters).
/// The leaf is perturbed in place and restored. At most `max_entries`
/// elements are checked, drawn with `rng` when the tensor is larger.
GradCheckResult grad_check_leaf(const std::function<Tensor()>& f, Tensor& leaf, double step,
                                std::size_t max_entries = static_cast<std::size_t>(-1),
                                Rng* rng = nullptr);

}  // namespace uadi
