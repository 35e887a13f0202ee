#pragma once

#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "twinseq/cli/config.hpp"
#include "twinseq/cli/model_io.hpp"
#include "twinseq/core/gradcheck.hpp"
#include "twinseq/data/corpus.hpp"

namespace twinseq {

// One training run of the grid.
struct RunSpec {
  TrainMode mode = TrainMode::kUniDir;
  double lambda = 0;
  std::size_t future = 0;
  std::uint64_t seed = 1;

  // "unitwin_k5_l0.6_s3"
  std::string tag() const;
};

struct RunOutcome {
  RunSpec spec;
  std::vector<EpochRecord> history;
  double dev_fer = 0;   // final epoch
  double test_fer = std::numeric_limits<double>::quiet_NaN();
  double dev_omega = std::numeric_limits<double>::quiet_NaN();
};

// Trains one run on the corpus splits. When `model_path` is given the
// trained model is saved there (twin models keep their backward branch).
RunOutcome run_training(const ExperimentConfig& config, const Corpus& corpus,
                        const RunSpec& spec,
                        const std::optional<std::filesystem::path>& model_path = {});

// Headered per-epoch metrics. The optional first line is "# generated <UTC time>".
std::string metrics_csv(const std::string& experiment_id, const RunOutcome& run,
                        bool timestamp);

struct AggregateRow {
  std::size_t future = 0;
  TrainMode mode = TrainMode::kUniDir;
  double lambda = 0;
  bool selected = false;  // chosen lambda for its (future, mode) cell
  std::size_t seeds = 0;
  double dev_mean = 0, dev_std = 0;
  double test_mean = 0, test_std = 0;
  std::vector<double> dev_fer;   // per seed, seed order
  std::vector<double> test_fer;
};

struct BenchResult {
  std::vector<RunOutcome> runs;
  std::vector<AggregateRow> rows;
};

// All runs of the grid modes x futures x seeds (x lambdas for unitwin; the
// other modes train with lambda 0). Lambda is picked per future by mean dev
// FER. Runs execute on up to `threads` worker threads.
BenchResult run_bench(const ExperimentConfig& config, const Corpus& corpus, std::size_t threads);

std::string aggregate_csv(const BenchResult& bench, bool timestamp);
std::string bench_summary(const BenchResult& bench);

// Sample mean and (n-1) standard deviation; stddev is 0 for one value.
std::pair<double, double> mean_std(const std::vector<double>& values);

// TWINSEQ_THREADS, else the hardware concurrency (at least 1).
std::size_t worker_threads();

// Finite-difference check of the full composite loss of a small twin network
// (2 layers of 8 units, T = 12, K = 5, two utterances with padding).
GradcheckReport toy_gradcheck(CellVariant variant, std::uint64_t seed = 7,
                              double tolerance = 1e-4);

}  // namespace twinseq
