#include "twinseq/eval/eval.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "twinseq/loss/loss.hpp"

namespace twinseq {

template <typename Scalar>
std::vector<std::uint32_t> argmax_rows(const Matrix<Scalar>& scores) {
  std::vector<std::uint32_t> out(scores.rows(), 0);
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    auto row = scores.row(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
      if (row[c] > row[best]) best = c;
    out[r] = static_cast<std::uint32_t>(best);
  }
  return out;
}

double frame_error_rate(std::span<const std::uint32_t> predictions,
                        std::span<const std::uint32_t> labels,
                        std::span<const std::uint8_t> valid) {
  if (predictions.size() != labels.size()) {
    throw ShapeError("frame_error_rate: " + std::to_string(predictions.size()) +
                     " predictions for " + std::to_string(labels.size()) + " labels");
  }
  if (!valid.empty() && valid.size() != labels.size()) {
    throw ShapeError("frame_error_rate: mask length differs");
  }
  std::size_t errors = 0, count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!valid.empty() && valid[i] == 0) continue;
    ++count;
    if (predictions[i] != labels[i]) ++errors;
  }
  if (count == 0) throw ValidationError("frame_error_rate: no valid frames");
  return static_cast<double>(errors) / static_cast<double>(count);
}

template <typename Scalar>
double frame_error_rate(const Matrix<Scalar>& posteriors, std::span<const std::uint32_t> labels,
                        std::span<const std::uint8_t> valid) {
  const auto predictions = argmax_rows(posteriors);
  return frame_error_rate(predictions, labels, valid);
}

template <typename Scalar>
Matrix<double> posterior_to_likelihood(const Matrix<Scalar>& posteriors,
                                       std::span<const double> priors) {
  if (priors.size() != posteriors.cols()) {
    throw ShapeError("posterior_to_likelihood: " + std::to_string(priors.size()) +
                     " priors for " + std::to_string(posteriors.cols()) + " classes");
  }
  std::vector<double> log_prior(priors.size());
  for (std::size_t k = 0; k < priors.size(); ++k) {
    if (!(priors[k] > 0)) throw ValidationError("posterior_to_likelihood: zero prior for class " +
                                                std::to_string(k));
    log_prior[k] = std::log(priors[k]);
  }
  Matrix<double> out(posteriors.rows(), posteriors.cols());
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t k = 0; k < out.cols(); ++k) {
      out(r, k) = std::log(std::max(static_cast<double>(posteriors(r, k)), 1e-300)) - log_prior[k];
    }
  return out;
}

template <typename Scalar>
Network<Scalar> strip_backward(const Network<Scalar>& twin) {
  if (twin.config.mode != StackMode::kTwin) {
    throw ValidationError("strip_backward: model is not a twin-mode network");
  }
  Network<Scalar> copy = twin.clone();
  Network<Scalar> out;
  out.config = twin.config;
  out.config.mode = StackMode::kForwardOnly;
  out.forward_layers = std::move(copy.forward_layers);
  out.output = std::move(copy.output);
  return out;
}

template <typename Scalar>
Matrix<Scalar> predict_offline(Network<Scalar>& net, const Matrix<Scalar>& frames) {
  NoGradGuard no_grad;
  auto out = run_stack(net, Tensor<Scalar>(frames), SequenceLayout::single(frames.rows()));
  return out.posteriors.value();
}

template <typename Scalar>
EvalSummary evaluate(Network<Scalar>& net, std::span<const FeatureSequence> utterances,
                     std::size_t batch_size) {
  if (utterances.empty()) throw ValidationError("evaluate: no utterances");
  NoGradGuard no_grad;
  const bool twin = net.config.mode == StackMode::kTwin;
  std::size_t errors = 0, frames = 0;
  double omega_sum = 0;
  for (const Batch& batch : make_batches(utterances, batch_size, 0)) {
    const Matrix<Scalar> inputs = batch_inputs<Scalar>(utterances, batch);
    const LabelSequence labels = batch_labels(utterances, batch);
    auto out = run_stack(net, Tensor<Scalar>(inputs), batch.layout);
    const auto predictions = argmax_rows(out.posteriors.value());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (!batch.layout.is_valid(i / batch.layout.batch, i % batch.layout.batch)) continue;
      ++frames;
      if (predictions[i] != labels[i]) ++errors;
    }
    if (twin) {
      const auto weights = frame_weights<Scalar>(batch.layout);
      std::vector<Tensor<Scalar>> per_layer;
      for (std::size_t l = 0; l < out.forward.size(); ++l)
        per_layer.push_back(twin_penalty<Scalar>(out.forward[l], out.backward[l], weights));
      omega_sum += static_cast<double>(multi_layer_penalty<Scalar>(per_layer).item()) *
                   static_cast<double>(batch.layout.batch);
    }
  }
  EvalSummary summary;
  summary.frames = frames;
  summary.fer = static_cast<double>(errors) / static_cast<double>(frames);
  if (twin) summary.omega = omega_sum / static_cast<double>(utterances.size());
  return summary;
}

// ---------------------------------------------------------------------------
// Streaming

template <typename Scalar>
StreamingSession<Scalar>::StreamingSession(Network<Scalar> model, std::size_t frame_dim,
                                           std::size_t past, std::size_t future)
    : model_(std::move(model)), dim_(frame_dim), past_(past), future_(future) {
  if (model_.config.mode != StackMode::kForwardOnly) {
    throw ValidationError("streaming requires a forward-only model (strip the twin branch)");
  }
  if (frame_dim == 0 || model_.config.input_size != frame_dim * (past + future + 1)) {
    throw ShapeError("streaming: model expects " + std::to_string(model_.config.input_size) +
                     " inputs, window gives " + std::to_string(frame_dim * (past + future + 1)));
  }
  for (const auto& layer : model_.forward_layers) states_.push_back(zero_state(layer, 1));
}

template <typename Scalar>
std::optional<StreamPrediction<Scalar>> StreamingSession<Scalar>::push(
    std::span<const Scalar> frame) {
  if (finalized_) throw Error("streaming: push after finalize");
  if (frame.size() != dim_) {
    throw ShapeError("streaming: frame has " + std::to_string(frame.size()) +
                     " features, expected " + std::to_string(dim_));
  }
  buffer_.emplace_back(frame.begin(), frame.end());
  ++consumed_;
  if (consumed_ < emitted_ + future_ + 1) return std::nullopt;
  return emit(consumed_ - 1);
}

template <typename Scalar>
std::vector<StreamPrediction<Scalar>> StreamingSession<Scalar>::finalize() {
  if (finalized_) throw Error("streaming: finalize called twice");
  finalized_ = true;
  std::vector<StreamPrediction<Scalar>> out;
  while (emitted_ < consumed_) out.push_back(emit(consumed_ - 1));
  return out;
}

template <typename Scalar>
StreamPrediction<Scalar> StreamingSession<Scalar>::emit(std::size_t last_frame) {
  const std::size_t t = emitted_;
  if (!finalized_ && t + future_ >= consumed_) ++violations_;

  const std::size_t width = past_ + future_ + 1;
  Matrix<Scalar> x(1, dim_ * width);
  for (std::size_t j = 0; j < width; ++j) {
    const std::ptrdiff_t src =
        static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(past_);
    const auto s = static_cast<std::size_t>(
        std::clamp<std::ptrdiff_t>(src, 0, static_cast<std::ptrdiff_t>(last_frame)));
    const auto& f = buffer_[s - buffer_start_];
    std::copy(f.begin(), f.end(), x.row(0).begin() + j * dim_);
  }

  NoGradGuard no_grad;
  Tensor<Scalar> h(std::move(x));
  for (std::size_t l = 0; l < states_.size(); ++l) {
    states_[l] = cell_step(model_.forward_layers[l], h, states_[l]);
    h = states_[l].h;
  }
  StreamPrediction<Scalar> pred;
  pred.frame = t;
  pred.posteriors = softmax_rows(model_.output.forward(h)).value();
  pred.label = argmax_rows(pred.posteriors)[0];
  ++emitted_;

  // Keep frames still reachable by a future window (including frame 0 while
  // the left edge is replicated).
  while (buffer_start_ + past_ < emitted_ && buffer_.size() > 1) {
    buffer_.pop_front();
    ++buffer_start_;
  }
  return pred;
}

void write_likelihoods(std::ostream& os, const std::string& id, const Matrix<double>& scores) {
  os << id << ' ' << scores.rows() << ' ' << scores.cols() << '\n';
  char buf[64];
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    for (std::size_t k = 0; k < scores.cols(); ++k) {
      std::snprintf(buf, sizeof buf, "%.9g", scores(r, k));
      if (k) os << '\t';
      os << buf;
    }
    os << '\n';
  }
}

#define TWINSEQ_INSTANTIATE_EVAL(S)                                                          \
  template std::vector<std::uint32_t> argmax_rows(const Matrix<S>&);                         \
  template double frame_error_rate(const Matrix<S>&, std::span<const std::uint32_t>,         \
                                   std::span<const std::uint8_t>);                           \
  template Matrix<double> posterior_to_likelihood(const Matrix<S>&, std::span<const double>); \
  template Network<S> strip_backward(const Network<S>&);                                     \
  template Matrix<S> predict_offline(Network<S>&, const Matrix<S>&);                         \
  template EvalSummary evaluate(Network<S>&, std::span<const FeatureSequence>, std::size_t); \
  template class StreamingSession<S>;

TWINSEQ_INSTANTIATE_EVAL(float)
TWINSEQ_INSTANTIATE_EVAL(double)

}  // namespace twinseq
