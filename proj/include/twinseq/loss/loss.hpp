#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "twinseq/cells/cells.hpp"
#include "twinseq/core/labels.hpp"

namespace twinseq {

inline constexpr double kLogFloor = 1e-12;

// Row weights that turn per-frame sums into the per-utterance time average
// followed by an equal-weight mean over the utterances of a batch: frame t of
// utterance b gets valid(t, b) / (N_b * batch). Padded frames get zero.
template <typename Scalar>
std::vector<Scalar> frame_weights(const SequenceLayout& layout);

template <typename Scalar>
struct NllTerm {
  Tensor<Scalar> value;     // scalar
  std::size_t clamped = 0;  // frames whose target probability hit the log floor
};

// -(1/N) sum_t log P(y_t) for a single utterance (posteriors N x K).
template <typename Scalar>
NllTerm<Scalar> nll(const Tensor<Scalar>& posteriors, std::span<const std::uint32_t> labels);

// Weighted form for padded batches; `weights` as produced by frame_weights.
// Labels of padded rows are ignored.
template <typename Scalar>
NllTerm<Scalar> nll(const Tensor<Scalar>& posteriors, std::span<const std::uint32_t> labels,
                    std::span<const Scalar> weights);

// (1/N) sum_t ||fwd_t - bwd_t||^2 for one layer. With `stop_backward_grad`
// the penalty does not propagate into the backward trajectory.
template <typename Scalar>
Tensor<Scalar> twin_penalty(const StateTrajectory<Scalar>& fwd,
                            const StateTrajectory<Scalar>& bwd,
                            bool stop_backward_grad = false);

template <typename Scalar>
Tensor<Scalar> twin_penalty(const StateTrajectory<Scalar>& fwd,
                            const StateTrajectory<Scalar>& bwd,
                            std::span<const Scalar> weights, bool stop_backward_grad = false);

// Arithmetic mean over layers.
template <typename Scalar>
Tensor<Scalar> multi_layer_penalty(std::span<const Tensor<Scalar>> per_layer);

template <typename Scalar>
struct LossBreakdown {
  double nll_forward = 0;
  double nll_backward = 0;  // zero outside twin mode
  double omega = 0;
  double lambda = 0;
  double total = 0;
  std::size_t clamped = 0;
  Tensor<Scalar> objective;  // differentiable total
};

// nll_fwd + nll_bwd + lambda * omega. Pass an undefined nll_bwd / omega for
// single-network modes (total = nll_fwd).
template <typename Scalar>
LossBreakdown<Scalar> composite_loss(const Tensor<Scalar>& nll_fwd,
                                     const Tensor<Scalar>& nll_bwd,
                                     const Tensor<Scalar>& omega, double lambda);

// Mean of per-utterance totals with equal utterance weight.
template <typename Scalar>
double batch_mean_total(std::span<const LossBreakdown<Scalar>> per_utterance);

}  // namespace twinseq
