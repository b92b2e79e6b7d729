#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mstc/data.hpp"
#include "mstc/model.hpp"
#include "mstc/trainer.hpp"

namespace mstc {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

/// One experiment description. Relative paths resolve against the directory
/// of the config file.
struct RunConfig {
  std::filesystem::path data;
  std::filesystem::path out;
  std::uint64_t seed = 1;
  ModelConfig model;
  TrainPlan plan;
  std::size_t folds = 5;
  bool nested_validation = false;
  /// Users held out of `train` and used for the logged validation BA.
  std::vector<std::string> validation_users;
  /// 0 checkpoints at every log step.
  std::uint64_t checkpoint_every = 0;

  // Whether the model section set these; otherwise they come from the dataset.
  bool label_count_given = false;
  bool ps_width_given = false;
};

/// Throws std::invalid_argument on unknown keys, wrong types or invalid values.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& file);

/// Fills label_count / ps_width from the dataset header unless the config set them.
void fit_to_dataset(RunConfig& config, const DatasetHeader& header);

/// Entry point of the `mstc` tool; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mstc
