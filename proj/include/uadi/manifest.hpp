#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace uadi {

/// SHA-1 of "blob <size>\0" + bytes, as `git hash-object` prints it.
std::string git_blob_hash(std::string_view bytes);

/// Current UTC time as YYYY-MM-DDTHH:MM:SSZ.
std::string utc_timestamp();

struct RunManifest {
  std::string command;
  std::string config_path;  // empty when no --config was given
  std::uint64_t seed = 0;
  std::string config_hash;            // hash of the config file bytes, or of the effective config
  std::string effective_config_hash;  // hash of config.cfg written to the run directory
  std::string out_dir;
  std::string started;
  std::string finished;

  std::string to_text() const;
  /// Writes <out_dir>/manifest.txt.
  void write() const;
};

}  // namespace uadi
