#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uadi/network.hpp"

namespace uadi {

struct SuiteEntry {
  std::string component;
  double max_error = 0.0;
  double threshold = 0.0;
  std::size_t checked = 0;
  std::string worst;  // tensor name holding the worst entry

  bool pass() const { return max_error < threshold; }
};

/// Model used by the suite's whole-network check: 32x32 input, width 8.
ModelConfig tiny_model_config();

struct SuiteOptions {
  std::uint64_t seed = 7;
  /// Difference step for modules and the whole model.
  double step = 1e-6;
  /// Difference step for the isolated losses.
  double loss_step = 1e-6;
  /// Entries sampled per tensor when the tensor is larger than this.
  std::size_t entries_per_tensor = 24;
  /// Tiny network used for the whole-model check (dropout is forced to 0).
  ModelConfig model = tiny_model_config();
  int batch = 2;
};

/// Finite-difference checks over TIM (both directions), UPA, HMSF, the
/// attention gate, the five losses (focal Tversky, boundary, texture, focal
/// CE, composite) and a full tiny model. Module and model thresholds are
/// 1e-3, isolated losses 1e-4.
std::vector<SuiteEntry> run_gradcheck_suite(const SuiteOptions& opts);

}  // namespace uadi
