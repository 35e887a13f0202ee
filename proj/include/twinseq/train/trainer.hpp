#pragma once

#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "twinseq/cells/cells.hpp"
#include "twinseq/data/corpus.hpp"
#include "twinseq/train/optimizer.hpp"

namespace twinseq {

enum class TrainMode { kUniDir, kUniTwin, kBiDir };
enum class Precision { kFloat, kDouble };

std::string_view to_string(TrainMode m);
std::string_view to_string(Precision p);
TrainMode parse_train_mode(std::string_view text);
Precision parse_precision(std::string_view text);
StackMode stack_mode(TrainMode m);

struct Hyperparams {
  double learning_rate = 0.002;
  double lambda = 0.0;
  double dropout = 0.0;
  std::vector<std::size_t> hidden_sizes{64};
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  Precision precision = Precision::kFloat;
  bool twin_stop_backward_grad = false;
  std::size_t epochs = 24;
  RmsPropConfig rmsprop;
  double clip_norm = 5.0;  // 0 disables
  CellVariant variant = CellVariant::kLiGru;
  bool batch_norm = true;

  void validate() const;
  friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

StackConfig make_stack_config(TrainMode mode, const Hyperparams& hp, std::size_t input_size,
                              std::size_t num_classes);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double dev_fer = 0;
  double dev_omega = 0;       // NaN outside twin mode
  double learning_rate = 0;   // rate used during this epoch
};

template <typename Scalar>
struct TrainState {
  std::vector<Matrix<Scalar>> accumulators;  // parallel to Network::parameters()
  double learning_rate = 0;
  std::size_t epoch = 0;
  std::vector<double> dev_history;
};

template <typename Scalar>
struct TrainHooks {
  // Called after every optimizer step with the 1-based global step.
  std::function<void(std::size_t, const Network<Scalar>&)> on_step;
  std::function<void(const EpochRecord&, const Network<Scalar>&)> on_epoch;
};

template <typename Scalar>
struct TrainResult {
  Network<Scalar> network;
  std::vector<EpochRecord> history;
  TrainState<Scalar> state;
};

// The full recipe: per epoch shuffle, batch, forward/backward, clip, RMSprop,
// then dev evaluation and the learning-rate schedule. Inputs are expected to
// be context-windowed already.
template <typename Scalar>
TrainResult<Scalar> train_run(TrainMode mode, std::span<const FeatureSequence> train,
                              std::span<const FeatureSequence> dev, std::size_t num_classes,
                              const Hyperparams& hp, const TrainHooks<Scalar>& hooks = {});

}  // namespace twinseq
