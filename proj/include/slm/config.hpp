#pragma once

// Flat `key = value` run configuration shared by every subcommand.
// Precedence: built-in defaults < SLM_SEED < config file < command line.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "slm/corpus.hpp"
#include "slm/inference.hpp"
#include "slm/model.hpp"
#include "slm/training.hpp"

namespace slm {

struct RunConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  TrainConfig train;
  BeamConfig beam;
  TaskSpec task;

  // Corpus prefixes: <prefix>.src / <prefix>.tgt
  std::string train_data;
  std::string dev_data;
  std::string checkpoint = "model.slmc";
  std::string metrics_out;
  std::string stopwords;
  std::size_t threads = 1;

  RunConfig();
};

using Setting = std::pair<std::string, std::string>;

// Comments start with '#'; blank lines are skipped. Throws ConfigError on
// malformed lines, naming the line number.
std::vector<Setting> parse_config_text(std::string_view text);
std::vector<Setting> read_config_file(const std::filesystem::path& path);

// Throws ConfigError for unknown keys or unparsable values.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);
void apply_settings(RunConfig& cfg, const std::vector<Setting>& settings);

// Reads SLM_SEED when set.
void apply_environment(RunConfig& cfg);

// Every recognized key, for help output and tests.
std::vector<std::string> config_keys();

// Pushes the shared seed into the sub-configs.
void finalize(RunConfig& cfg);

}  // namespace slm
