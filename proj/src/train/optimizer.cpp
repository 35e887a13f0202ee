#include "twinseq/train/optimizer.hpp"

#include <cmath>

namespace twinseq {

template <typename Scalar>
void rmsprop_step(Matrix<Scalar>& param, const Matrix<Scalar>& grad, Matrix<Scalar>& accumulator,
                  double learning_rate, const RmsPropConfig& config) {
  if (!param.same_shape(grad)) throw ShapeError("rmsprop: gradient shape differs from parameter");
  if (accumulator.empty()) accumulator = Matrix<Scalar>(param.rows(), param.cols());
  if (!accumulator.same_shape(param)) throw ShapeError("rmsprop: accumulator shape differs");
  if (!grad.all_finite()) throw NumericError("rmsprop: non-finite gradient");
  const auto alpha = static_cast<Scalar>(config.alpha);
  const auto eps = static_cast<Scalar>(config.eps);
  const auto lr = static_cast<Scalar>(learning_rate);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const Scalar g = grad[i];
    accumulator[i] = alpha * accumulator[i] + (Scalar(1) - alpha) * g * g;
    param[i] -= lr * g / (std::sqrt(accumulator[i]) + eps);
  }
}

double lr_schedule_update(std::span<const double> dev_history, double learning_rate) {
  if (dev_history.size() < 2) return learning_rate;
  const double prev = dev_history[dev_history.size() - 2];
  const double curr = dev_history.back();
  if (!(prev > 0)) {
    throw ValidationError("lr schedule: previous dev metric must be positive");
  }
  const double relative = (prev - curr) / prev;
  return relative < kMinRelativeImprovement ? learning_rate / 2 : learning_rate;
}

template <typename Scalar>
double clip_grad_norm(std::span<Tensor<Scalar>* const> params, double max_norm) {
  double sq = 0;
  for (const auto* p : params) {
    if (!p->has_grad()) continue;
    for (Scalar g : p->node()->grad.values()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto scale = static_cast<Scalar>(max_norm / norm);
    for (auto* p : params) {
      if (!p->has_grad()) continue;
      for (auto& g : p->node()->grad.values()) g *= scale;
    }
  }
  return norm;
}

template void rmsprop_step(Matrix<float>&, const Matrix<float>&, Matrix<float>&, double,
                           const RmsPropConfig&);
template void rmsprop_step(Matrix<double>&, const Matrix<double>&, Matrix<double>&, double,
                           const RmsPropConfig&);
template double clip_grad_norm(std::span<Tensor<float>* const>, double);
template double clip_grad_norm(std::span<Tensor<double>* const>, double);

}  // namespace twinseq
