#include "twinseq/loss/loss.hpp"

#include <string>

namespace twinseq {

template <typename Scalar>
std::vector<Scalar> frame_weights(const SequenceLayout& layout) {
  const std::size_t steps = layout.steps, batch = layout.batch;
  std::vector<std::size_t> lengths(batch, 0);
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t b = 0; b < batch; ++b)
      if (layout.is_valid(t, b)) ++lengths[b];
  std::vector<Scalar> w(steps * batch, Scalar(0));
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t b = 0; b < batch; ++b)
      if (layout.is_valid(t, b)) {
        w[t * batch + b] =
            Scalar(1) / (static_cast<Scalar>(lengths[b]) * static_cast<Scalar>(batch));
      }
  return w;
}

template <typename Scalar>
NllTerm<Scalar> nll(const Tensor<Scalar>& posteriors, std::span<const std::uint32_t> labels,
                    std::span<const Scalar> weights) {
  const std::size_t rows = posteriors.rows(), classes = posteriors.cols();
  if (labels.size() != rows || weights.size() != rows) {
    throw ShapeError("nll: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " frames");
  }
  std::vector<std::uint32_t> targets(labels.begin(), labels.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] == 0) {
      targets[r] = 0;
    } else if (targets[r] >= classes) {
      throw ValidationError("nll: label " + std::to_string(targets[r]) + " out of range for " +
                            std::to_string(classes) + " classes");
    }
  }
  NllTerm<Scalar> out;
  Tensor<Scalar> picked = gather_cols<Scalar>(posteriors, targets);
  Tensor<Scalar> logp = log_clamped(picked, Scalar(kLogFloor), &out.clamped);
  out.value = affine(sum(scale_rows(logp, weights)), Scalar(-1), Scalar(0));
  return out;
}

template <typename Scalar>
NllTerm<Scalar> nll(const Tensor<Scalar>& posteriors, std::span<const std::uint32_t> labels) {
  if (labels.size() != posteriors.rows()) {
    throw ShapeError("nll: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(posteriors.rows()) + " frames");
  }
  const std::vector<Scalar> w(labels.size(), Scalar(1) / static_cast<Scalar>(labels.size()));
  return nll<Scalar>(posteriors, labels, w);
}

template <typename Scalar>
Tensor<Scalar> twin_penalty(const StateTrajectory<Scalar>& fwd,
                            const StateTrajectory<Scalar>& bwd, std::span<const Scalar> weights,
                            bool stop_backward_grad) {
  if (fwd.hidden_size() != bwd.hidden_size()) {
    throw ShapeError("twin_penalty: hidden sizes differ (" + std::to_string(fwd.hidden_size()) +
                     " vs " + std::to_string(bwd.hidden_size()) + ")");
  }
  if (fwd.steps() != bwd.steps() || fwd.batch != bwd.batch) {
    throw ShapeError("twin_penalty: trajectories cover different timesteps");
  }
  if (weights.size() != fwd.stacked.rows()) throw ShapeError("twin_penalty: weight count");
  const Tensor<Scalar> target = stop_backward_grad ? detach(bwd.stacked) : bwd.stacked;
  return sum(scale_rows(square(sub(fwd.stacked, target)), weights));
}

template <typename Scalar>
Tensor<Scalar> twin_penalty(const StateTrajectory<Scalar>& fwd,
                            const StateTrajectory<Scalar>& bwd, bool stop_backward_grad) {
  const std::vector<Scalar> w(fwd.stacked.rows(),
                              Scalar(1) / static_cast<Scalar>(fwd.stacked.rows()));
  return twin_penalty<Scalar>(fwd, bwd, w, stop_backward_grad);
}

template <typename Scalar>
Tensor<Scalar> multi_layer_penalty(std::span<const Tensor<Scalar>> per_layer) {
  if (per_layer.empty()) throw ValidationError("multi_layer_penalty: no layers");
  if (per_layer.size() == 1) return per_layer[0];
  for (const auto& p : per_layer)
    if (p.rows() != 1 || p.cols() != 1) throw ShapeError("multi_layer_penalty: scalar terms");
  return mean(concat_rows(per_layer));
}

template <typename Scalar>
LossBreakdown<Scalar> composite_loss(const Tensor<Scalar>& nll_fwd,
                                     const Tensor<Scalar>& nll_bwd,
                                     const Tensor<Scalar>& omega, double lambda) {
  if (!(lambda >= 0)) throw ValidationError("composite_loss: lambda must be nonnegative");
  LossBreakdown<Scalar> out;
  out.lambda = lambda;
  out.nll_forward = nll_fwd.item();
  out.objective = nll_fwd;
  if (nll_bwd) {
    out.nll_backward = nll_bwd.item();
    out.objective = add(out.objective, nll_bwd);
  }
  if (omega) {
    out.omega = omega.item();
    out.objective = add(out.objective, affine(omega, static_cast<Scalar>(lambda), Scalar(0)));
  }
  out.total = out.objective.item();
  return out;
}

template <typename Scalar>
double batch_mean_total(std::span<const LossBreakdown<Scalar>> per_utterance) {
  if (per_utterance.empty()) throw ValidationError("batch_mean_total: empty batch");
  double total = 0;
  for (const auto& l : per_utterance) total += l.total;
  return total / static_cast<double>(per_utterance.size());
}

#define TWINSEQ_INSTANTIATE_LOSS(S)                                                        \
  template std::vector<S> frame_weights<S>(const SequenceLayout&);                         \
  template NllTerm<S> nll(const Tensor<S>&, std::span<const std::uint32_t>);               \
  template NllTerm<S> nll(const Tensor<S>&, std::span<const std::uint32_t>,                \
                          std::span<const S>);                                             \
  template Tensor<S> twin_penalty(const StateTrajectory<S>&, const StateTrajectory<S>&,    \
                                  bool);                                                   \
  template Tensor<S> twin_penalty(const StateTrajectory<S>&, const StateTrajectory<S>&,    \
                                  std::span<const S>, bool);                               \
  template Tensor<S> multi_layer_penalty(std::span<const Tensor<S>>);                      \
  template LossBreakdown<S> composite_loss(const Tensor<S>&, const Tensor<S>&,             \
                                           const Tensor<S>&, double);                      \
  template double batch_mean_total(std::span<const LossBreakdown<S>>);

TWINSEQ_INSTANTIATE_LOSS(float)
TWINSEQ_INSTANTIATE_LOSS(double)

}  // namespace twinseq
