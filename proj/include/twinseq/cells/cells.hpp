#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "twinseq/core/tensor.hpp"
#include "twinseq/train/batch_norm.hpp"

namespace twinseq {

enum class CellVariant { kLstm, kGru, kMGru, kLiGru };
enum class Direction { kForward, kBackward };
enum class StackMode { kForwardOnly, kBackwardOnly, kBidirectional, kTwin };

std::string_view to_string(CellVariant v);
std::string_view to_string(StackMode m);
CellVariant parse_cell_variant(std::string_view text);
StackMode parse_stack_mode(std::string_view text);

// Gate names in storage order: LSTM i,f,o,g; GRU z,r,h; M-GRU and Li-GRU z,h.
std::vector<std::string> gate_names(CellVariant v);

struct StackConfig {
  std::size_t input_size = 0;
  std::vector<std::size_t> hidden_sizes;  // one per layer
  CellVariant variant = CellVariant::kLiGru;
  StackMode mode = StackMode::kForwardOnly;
  double dropout = 0.0;
  std::size_t num_classes = 0;
  bool batch_norm = true;  // on input-to-hidden products only

  std::size_t layers() const { return hidden_sizes.size(); }
  bool has_forward() const { return mode != StackMode::kBackwardOnly; }
  bool has_backward() const { return mode != StackMode::kForwardOnly; }
  void validate() const;
};

// One gate's parameters. W is stored input x hidden so that a batch of row
// vectors multiplies it directly (the transpose of the usual W_* layout).
template <typename Scalar>
struct GateParams {
  Tensor<Scalar> W;                     // input x hidden
  Tensor<Scalar> U;                     // hidden x hidden
  Tensor<Scalar> b;                     // 1 x hidden; absent with batch norm
  std::optional<BatchNorm<Scalar>> bn;  // feed-forward path only
};

template <typename Scalar>
struct CellParams {
  CellVariant variant = CellVariant::kGru;
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  std::vector<GateParams<Scalar>> gates;

  // Zero-initialized parameters (batch norm at identity statistics).
  static CellParams zeros(CellVariant variant, std::size_t input, std::size_t hidden,
                          bool batch_norm);
};

template <typename Scalar>
struct Linear {
  Tensor<Scalar> W;  // input x classes
  Tensor<Scalar> b;  // 1 x classes

  static Linear zeros(std::size_t input, std::size_t outputs);
  Tensor<Scalar> forward(const Tensor<Scalar>& x) const { return add(matmul(x, W), b); }
};

template <typename Scalar>
struct CellState {
  Tensor<Scalar> h;
  Tensor<Scalar> c;  // LSTM only
};

// Hidden states of one layer, one direction, indexed cotemporally
// (hidden[t] is the state at frame t for both directions).
template <typename Scalar>
struct StateTrajectory {
  Direction direction = Direction::kForward;
  std::size_t batch = 1;
  std::vector<Tensor<Scalar>> hidden;  // steps entries of batch x hidden
  std::vector<Tensor<Scalar>> cell;    // LSTM cell states, same indexing
  Tensor<Scalar> stacked;              // (steps * batch) x hidden, time-major

  std::size_t steps() const { return hidden.size(); }
  std::size_t hidden_size() const { return stacked.cols(); }
};

// Layout of a padded, time-major batch: row t * batch + b holds frame t of
// utterance b.
struct SequenceLayout {
  std::size_t steps = 0;
  std::size_t batch = 1;
  std::vector<std::uint8_t> valid;  // steps * batch; empty means all valid

  static SequenceLayout single(std::size_t steps) { return {steps, 1, {}}; }
  bool all_valid() const;
  bool is_valid(std::size_t t, std::size_t b) const {
    return valid.empty() || valid[t * batch + b] != 0;
  }
  template <typename Scalar>
  std::vector<Scalar> row_mask() const;  // empty when all valid
};

template <typename Scalar>
struct RunOptions {
  NormMode norm = NormMode::kEvaluation;
  // Per layer batch x hidden recurrent dropout masks; empty disables dropout.
  std::vector<Tensor<Scalar>> forward_dropout;
  std::vector<Tensor<Scalar>> backward_dropout;
};

template <typename Scalar>
class Network {
 public:
  StackConfig config;
  std::vector<CellParams<Scalar>> forward_layers;
  std::vector<CellParams<Scalar>> backward_layers;
  // Inference classifier: forward states (uni/twin), backward states
  // (backward-only), or concatenated states (bidirectional).
  Linear<Scalar> output;
  // Twin mode only: the backward branch's own classifier (training only).
  std::optional<Linear<Scalar>> backward_output;

  static Network zeros(const StackConfig& config);

  struct Parameter {
    std::string name;  // "fwd.l0.z.W", "bwd.l1.h.U", "out.W", "bwd_out.b", ...
    Tensor<Scalar> tensor;
    bool backward_branch = false;
  };
  std::vector<Parameter> parameters() const;
  std::size_t parameter_count() const;
  // Deep copy: no tensors are shared with the source.
  Network clone() const;
};

// One recurrence step for a batch of inputs x (batch x input).
template <typename Scalar>
CellState<Scalar> cell_step(CellParams<Scalar>& params, const Tensor<Scalar>& x,
                            const CellState<Scalar>& prev,
                            NormMode norm = NormMode::kEvaluation);

// Zero initial state for a batch.
template <typename Scalar>
CellState<Scalar> zero_state(const CellParams<Scalar>& params, std::size_t batch);

// Runs one layer over a whole time-major batch. The backward direction scans
// t = steps-1 .. 0; states of padded frames are forced to zero so each
// utterance's backward scan starts from a zero state at its last frame.
template <typename Scalar>
StateTrajectory<Scalar> run_direction(CellParams<Scalar>& params, const Tensor<Scalar>& inputs,
                                      const SequenceLayout& layout, Direction direction,
                                      NormMode norm = NormMode::kEvaluation,
                                      const Tensor<Scalar>* dropout = nullptr);

// Single-utterance convenience form: frames is steps x input.
template <typename Scalar>
StateTrajectory<Scalar> run_direction(CellParams<Scalar>& params, const Matrix<Scalar>& frames,
                                      Direction direction);

template <typename Scalar>
struct StackOutput {
  std::vector<StateTrajectory<Scalar>> forward;   // per layer; empty if absent
  std::vector<StateTrajectory<Scalar>> backward;  // per layer; empty if absent
  Tensor<Scalar> logits;                          // (steps*batch) x classes
  Tensor<Scalar> posteriors;
  Tensor<Scalar> backward_logits;  // twin mode only
  Tensor<Scalar> backward_posteriors;
};

template <typename Scalar>
StackOutput<Scalar> run_stack(Network<Scalar>& net, const Tensor<Scalar>& inputs,
                              const SequenceLayout& layout,
                              const RunOptions<Scalar>& options = {});

template <typename Scalar>
Tensor<Scalar> combine_bidirectional(const Tensor<Scalar>& forward,
                                     const Tensor<Scalar>& backward);

}  // namespace twinseq
