#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "aslip/controlsim.hpp"
#include "aslip/datapipe.hpp"
#include "aslip/simulator.hpp"
#include "aslip/streaming.hpp"
#include "aslip/training.hpp"

// Run configuration: an INI-style text file ("[section]" headers, "key = value"
// lines, '#' or ';' comments) plus "section.key=value" overrides. Settings
// resolves every key against the defaults and rejects unknown ones, so the
// resolved text written next to each output names every value that was used.

namespace aslip::config {

class RunConfig {
 public:
  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);

  void set(const std::string& section, const std::string& key, const std::string& value);
  /// "section.key=value".
  void apply_override(const std::string& assignment);
  bool has(const std::string& section, const std::string& key) const;
  const std::string& get(const std::string& section, const std::string& key) const;

  const std::map<std::string, std::map<std::string, std::string>>& sections() const { return sections_; }
  std::string to_text() const;

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

struct AblationGrid {
  std::vector<std::string> layouts{"four", "single"};
  std::vector<double> windows_ms{100.0, 200.0, 300.0};
  std::vector<std::string> regimes{"scratch"};
};

/// Every module's configuration, fully resolved.
struct Settings {
  std::uint64_t master_seed = 0;
  dsp::FeatureConfig features;
  data::WindowConfig windows;
  sim::DatasetSpec pretrain_data = sim::DatasetSpec::pretrain_default();
  sim::DatasetSpec finetune_data = sim::DatasetSpec::finetune_default();
  sim::DatasetSpec test_data = test_default();
  train::TrainConfig pretrain;
  train::TrainConfig finetune;
  std::uint64_t model_seed = 5;
  stream::StreamConfig stream;
  control::TaskConfig task;
  int task_trials = 10;
  AblationGrid ablation;

  Settings();

  /// Defaults overlaid with `raw`. Seeds not set explicitly derive from
  /// run.seed. Throws ConfigError on unknown keys or unparsable values.
  static Settings resolve(const RunConfig& raw);
  RunConfig to_config() const;
  void validate() const;

  static sim::DatasetSpec test_default();
};

/// Writes the resolved configuration as `resolved_config.ini` in `dir`.
void echo_config(const Settings& s, const std::filesystem::path& dir);

}  // namespace aslip::config
