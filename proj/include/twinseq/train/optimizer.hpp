#pragma once

#include <span>
#include <vector>

#include "twinseq/core/tensor.hpp"

namespace twinseq {

struct RmsPropConfig {
  double alpha = 0.95;  // second-moment decay
  double eps = 1e-8;
  friend bool operator==(const RmsPropConfig&, const RmsPropConfig&) = default;
};

// v <- alpha*v + (1-alpha)*g^2;  param <- param - lr * g / (sqrt(v) + eps)
template <typename Scalar>
void rmsprop_step(Matrix<Scalar>& param, const Matrix<Scalar>& grad, Matrix<Scalar>& accumulator,
                  double learning_rate, const RmsPropConfig& config = {});

// Relative dev improvement below which the learning rate is halved.
inline constexpr double kMinRelativeImprovement = 0.001;

// `dev_history` holds one dev frame error rate per finished epoch, oldest
// first. Halves `learning_rate` when (prev - curr) / prev < 0.1%; never
// during the first epoch.
double lr_schedule_update(std::span<const double> dev_history, double learning_rate);

// Scales the gradients of `params` so their joint L2 norm is at most
// `max_norm`. Returns the norm before scaling.
template <typename Scalar>
double clip_grad_norm(std::span<Tensor<Scalar>* const> params, double max_norm);

}  // namespace twinseq
