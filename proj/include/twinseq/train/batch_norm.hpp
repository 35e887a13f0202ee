#pragma once

#include <span>

#include "twinseq/core/tensor.hpp"

namespace twinseq {

enum class NormMode { kTraining, kEvaluation };

// Batch normalization for feed-forward (input-to-hidden) products.
template <typename Scalar>
struct BatchNorm {
  static constexpr Scalar kEps = Scalar(1e-5);
  static constexpr Scalar kMomentum = Scalar(0.1);

  Tensor<Scalar> gamma;  // 1 x n, trainable
  Tensor<Scalar> beta;   // 1 x n, trainable
  Matrix<Scalar> running_mean;
  Matrix<Scalar> running_var;

  explicit BatchNorm(std::size_t features = 1);

  std::size_t features() const { return running_mean.cols(); }

  // Training mode normalizes with the statistics of the rows whose mask
  // entry is nonzero (all rows when the mask is empty) and folds them into
  // the running estimates; evaluation mode uses the running estimates.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, NormMode mode,
                         std::span<const Scalar> row_mask = {});
};

// Free-standing form: normalizes `x` with explicit gamma/beta.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, NormMode mode,
                          Matrix<Scalar>& running_mean, Matrix<Scalar>& running_var,
                          std::span<const Scalar> row_mask = {});

}  // namespace twinseq
