#pragma once

// Run configuration read from JSON. Keys may be nested ({"train": {"iterations": 50}})
// or flat with dots ("train.iterations": 50); unknown keys are rejected.

#include <filesystem>
#include <string>
#include <vector>

#include "hdca/model.hpp"
#include "hdca/training.hpp"

namespace hdca {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  void validate() const;
};

/// Applies the settings in `json_text` on top of `base`.
RunConfig parse_run_config(const std::string& json_text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
/// Every recognised key and its current value, one flat dotted object.
std::string dump_run_config(const RunConfig& config);

/// "2,4,8" -> {2,4,8}; "none" or "" -> {} (no hierarchy).
std::vector<int> parse_int_list(const std::string& text, const std::string& flag);
std::vector<double> parse_double_list(const std::string& text, const std::string& flag);

}  // namespace hdca
