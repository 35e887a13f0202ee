#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "twinseq/data/synth.hpp"
#include "twinseq/train/trainer.hpp"

namespace twinseq {

// Everything one invocation needs. Text form: "key = value" lines grouped
// under [experiment], [model], [train], [data], [bench] and [synth] headers;
// '#' starts a comment. Only experiment.mode is required.
struct ExperimentConfig {
  std::string id = "experiment";
  TrainMode mode = TrainMode::kUniDir;
  std::vector<std::uint64_t> seeds{1};
  std::string output = "runs";
  Hyperparams hp;  // hp.seed is overwritten per run from `seeds`

  std::string container = "data/synth.twsq";
  std::string manifest = "data/synth.json";
  std::size_t past = 0;    // context frames before t
  std::size_t future = 0;  // look-ahead k

  // bench grid
  std::vector<TrainMode> bench_modes{TrainMode::kUniDir, TrainMode::kUniTwin, TrainMode::kBiDir};
  std::vector<double> bench_lambdas{0.1, 0.3, 0.6, 1.0};
  std::vector<std::size_t> bench_futures{0, 5, 10, 15};

  SynthSpec synth;

  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

// Throws ValidationError naming the line for unknown keys, malformed values,
// duplicate keys and a missing experiment.mode.
ExperimentConfig parse_config(std::string_view text);
// IoError when the file cannot be read.
ExperimentConfig load_config(const std::filesystem::path& path);
// Canonical text form; parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& config);

}  // namespace twinseq
