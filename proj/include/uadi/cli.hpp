#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "uadi/config.hpp"
#include "uadi/data.hpp"
#include "uadi/trainer.hpp"

namespace uadi {

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitRuntime = 2 };

/// Preset bundles for --size: tiny (32 px, width 8), small (64 px, desk
/// default) and paper (224 px, batch 24, 100 epochs).
ConfigMap preset_config(const std::string& size);

DatasetSpec dataset_spec_from_config(const ConfigMap& cfg);
void write_dataset_spec(const DatasetSpec& spec, ConfigMap& cfg);

/// Every key the tools understand (train.*, model.*, loss.*, data.*).
std::vector<std::string> known_config_keys();

struct ConfigSources {
  std::string size = "small";
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // "key=value"
};

/// Preset, then config file, then --set overrides, then --seed (which sets
/// train.seed, model.seed and data.seed). Unknown keys throw ConfigError.
ConfigMap resolve_config(const ConfigSources& src);

/// Synthetic data (or data.dir when set) plus its stratified 70/15/15 split.
struct LoadedData {
  std::vector<Sample> samples;
  Split split;
};
LoadedData load_data(const ConfigMap& cfg);

/// Entry point behind the `uadi` executable. Returns an ExitCode.
int cli_main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace uadi
