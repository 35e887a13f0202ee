#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "twinseq/cells/cells.hpp"
#include "twinseq/data/corpus.hpp"

namespace twinseq {

// Per-row argmax; ties go to the lowest class id.
template <typename Scalar>
std::vector<std::uint32_t> argmax_rows(const Matrix<Scalar>& scores);

// Fraction of valid frames whose prediction differs from the label. An empty
// `valid` marks every frame valid; no valid frames is an error.
double frame_error_rate(std::span<const std::uint32_t> predictions,
                        std::span<const std::uint32_t> labels,
                        std::span<const std::uint8_t> valid = {});

template <typename Scalar>
double frame_error_rate(const Matrix<Scalar>& posteriors, std::span<const std::uint32_t> labels,
                        std::span<const std::uint8_t> valid = {});

// log p(y|x) - log p(y), the scaled likelihoods handed to an HMM decoder.
template <typename Scalar>
Matrix<double> posterior_to_likelihood(const Matrix<Scalar>& posteriors,
                                       std::span<const double> priors);

// Drops the backward branch and its classifier from a twin-mode network.
// The result is a forward-only network whose outputs equal the twin model's
// forward branch exactly.
template <typename Scalar>
Network<Scalar> strip_backward(const Network<Scalar>& twin);

// Offline inference on one utterance (evaluation mode, no graph).
template <typename Scalar>
Matrix<Scalar> predict_offline(Network<Scalar>& net, const Matrix<Scalar>& frames);

struct EvalSummary {
  double fer = 0;
  // Mean twin penalty (twin networks only; NaN otherwise).
  double omega = std::numeric_limits<double>::quiet_NaN();
  std::size_t frames = 0;
};

// Frame error rate of the inference classifier over `utterances` (already
// context-windowed), evaluated in padded batches.
template <typename Scalar>
EvalSummary evaluate(Network<Scalar>& net, std::span<const FeatureSequence> utterances,
                     std::size_t batch_size = 16);

template <typename Scalar>
struct StreamPrediction {
  std::size_t frame = 0;
  std::uint32_t label = 0;
  Matrix<Scalar> posteriors;  // 1 x classes
};

// Online inference with a look-ahead window. The prediction for frame t is
// emitted once frame t+future has been consumed; finalize() flushes the tail
// using the same edge replication as context_window.
template <typename Scalar>
class StreamingSession {
 public:
  // `model` must be forward-only; its input size must equal
  // frame_dim * (past + future + 1).
  StreamingSession(Network<Scalar> model, std::size_t frame_dim, std::size_t past,
                   std::size_t future);

  std::optional<StreamPrediction<Scalar>> push(std::span<const Scalar> frame);
  std::vector<StreamPrediction<Scalar>> finalize();

  std::size_t consumed() const { return consumed_; }
  std::size_t emitted() const { return emitted_; }
  std::size_t look_ahead() const { return future_; }
  bool finalized() const { return finalized_; }
  // Emissions that happened before their look-ahead frames were consumed.
  std::size_t latency_violations() const { return violations_; }

 private:
  StreamPrediction<Scalar> emit(std::size_t last_frame);

  Network<Scalar> model_;
  std::size_t dim_, past_, future_;
  std::deque<std::vector<Scalar>> buffer_;  // frames [buffer_start_, consumed_)
  std::size_t buffer_start_ = 0;
  std::size_t consumed_ = 0;
  std::size_t emitted_ = 0;
  std::size_t violations_ = 0;
  bool finalized_ = false;
  std::vector<CellState<Scalar>> states_;
};

// Per utterance: "id N K" header, then N rows of K tab-separated values with
// 9 significant digits.
void write_likelihoods(std::ostream& os, const std::string& id, const Matrix<double>& scores);

}  // namespace twinseq
