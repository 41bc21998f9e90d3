#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "attdrive/roi.hpp"
#include "attdrive/trainer.hpp"

namespace attdrive::cli {

// Flat key=value run configuration with sections as dotted prefixes
// (model.*, grid.*, train.*, data.*, gen.*, bench.*, explain.*). Every key
// has a built-in default; files and flag overrides may only touch known
// keys (unknown keys are a ConfigError, not a warning). '#' starts a
// comment; blank lines are ignored.
class RunConfig {
 public:
  // Built-in defaults for every known key.
  RunConfig();

  // Parses a config file into the defaults. The literal path "default" (or
  // an empty string) skips file loading and keeps the built-ins.
  static RunConfig load(const std::string& path);

  // Applies one "key=value" override (flag syntax). ConfigError on unknown
  // key or malformed assignment.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  long long get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Full resolved configuration, one sorted "key = value" line each; this
  // is what every run logs.
  std::string resolved_text() const;

  // Assembled module configs.
  roi::GridConfig grid() const;
  policy::ModelConfig model_config() const;    // model.* + grid.*
  train::TrainConfig train_config() const;     // + train.*, data.*, seed

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace attdrive::cli
