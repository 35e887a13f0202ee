#include "twinseq/train/batch_norm.hpp"

namespace twinseq {

template <typename Scalar>
BatchNorm<Scalar>::BatchNorm(std::size_t features)
    : gamma(Matrix<Scalar>(1, features, Scalar(1)), true),
      beta(Matrix<Scalar>(1, features, Scalar(0)), true),
      running_mean(1, features, Scalar(0)),
      running_var(1, features, Scalar(1)) {}

template <typename Scalar>
Tensor<Scalar> BatchNorm<Scalar>::forward(const Tensor<Scalar>& x, NormMode mode,
                                          std::span<const Scalar> row_mask) {
  return batch_norm(x, gamma, beta, mode, running_mean, running_var, row_mask);
}

template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, NormMode mode,
                          Matrix<Scalar>& running_mean, Matrix<Scalar>& running_var,
                          std::span<const Scalar> row_mask) {
  constexpr Scalar eps = BatchNorm<Scalar>::kEps;
  if (mode == NormMode::kEvaluation) {
    return batch_norm_eval(x, gamma, beta, running_mean, running_var, eps);
  }
  Matrix<Scalar> mu, var;
  Tensor<Scalar> out = batch_norm_train(x, gamma, beta, row_mask, eps, &mu, &var);
  constexpr Scalar m = BatchNorm<Scalar>::kMomentum;
  for (std::size_t c = 0; c < mu.size(); ++c) {
    running_mean[c] = (Scalar(1) - m) * running_mean[c] + m * mu[c];
    running_var[c] = (Scalar(1) - m) * running_var[c] + m * var[c];
  }
  return out;
}

template struct BatchNorm<float>;
template struct BatchNorm<double>;
template Tensor<float> batch_norm(const Tensor<float>&, const Tensor<float>&,
                                  const Tensor<float>&, NormMode, Matrix<float>&,
                                  Matrix<float>&, std::span<const float>);
template Tensor<double> batch_norm(const Tensor<double>&, const Tensor<double>&,
                                   const Tensor<double>&, NormMode, Matrix<double>&,
                                   Matrix<double>&, std::span<const double>);

}  // namespace twinseq
