#include "twinseq/train/trainer.hpp"

#include <cmath>
#include <limits>

#include "twinseq/eval/eval.hpp"
#include "twinseq/loss/loss.hpp"
#include "twinseq/train/init.hpp"

namespace twinseq {

std::string_view to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kUniDir: return "unidir";
    case TrainMode::kUniTwin: return "unitwin";
    case TrainMode::kBiDir: return "bidir";
  }
  return "?";
}

std::string_view to_string(Precision p) { return p == Precision::kFloat ? "float" : "double"; }

TrainMode parse_train_mode(std::string_view text) {
  if (text == "unidir") return TrainMode::kUniDir;
  if (text == "unitwin" || text == "twin") return TrainMode::kUniTwin;
  if (text == "bidir") return TrainMode::kBiDir;
  throw ValidationError("unknown mode '" + std::string(text) + "' (unidir, unitwin, bidir)");
}

Precision parse_precision(std::string_view text) {
  if (text == "float" || text == "f32") return Precision::kFloat;
  if (text == "double" || text == "f64") return Precision::kDouble;
  throw ValidationError("unknown precision '" + std::string(text) + "' (float, double)");
}

StackMode stack_mode(TrainMode m) {
  switch (m) {
    case TrainMode::kUniDir: return StackMode::kForwardOnly;
    case TrainMode::kUniTwin: return StackMode::kTwin;
    case TrainMode::kBiDir: return StackMode::kBidirectional;
  }
  return StackMode::kForwardOnly;
}

void Hyperparams::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate))
    throw ValidationError("learning rate must be positive");
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw ValidationError("lambda must be >= 0");
  if (!(dropout >= 0 && dropout < 1)) throw ValidationError("dropout must be in [0, 1)");
  if (hidden_sizes.empty()) throw ValidationError("at least one hidden layer is required");
  for (auto h : hidden_sizes)
    if (h == 0) throw ValidationError("hidden sizes must be positive");
  if (batch_size == 0) throw ValidationError("batch size must be >= 1");
  if (epochs == 0) throw ValidationError("epochs must be >= 1");
  if (!(rmsprop.alpha >= 0 && rmsprop.alpha < 1)) throw ValidationError("rmsprop alpha in [0, 1)");
  if (!(rmsprop.eps > 0)) throw ValidationError("rmsprop eps must be positive");
  if (!(clip_norm >= 0)) throw ValidationError("clip norm must be >= 0");
}

StackConfig make_stack_config(TrainMode mode, const Hyperparams& hp, std::size_t input_size,
                              std::size_t num_classes) {
  StackConfig c;
  c.input_size = input_size;
  c.hidden_sizes = hp.hidden_sizes;
  c.variant = hp.variant;
  c.mode = stack_mode(mode);
  c.dropout = hp.dropout;
  c.num_classes = num_classes;
  c.batch_norm = hp.batch_norm;
  c.validate();
  return c;
}

namespace {

template <typename Scalar>
std::vector<Tensor<Scalar>> draw_masks(const std::vector<CellParams<Scalar>>& layers,
                                       std::size_t batch, double p, Rng& rng) {
  std::vector<Tensor<Scalar>> masks;
  for (const auto& layer : layers) {
    Matrix<Scalar> m(batch, layer.hidden_size);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto mask = recurrent_dropout_mask(layer.hidden_size, p, rng);
      for (std::size_t j = 0; j < mask.size(); ++j) m(b, j) = static_cast<Scalar>(mask[j]);
    }
    masks.emplace_back(std::move(m));
  }
  return masks;
}

}  // namespace

template <typename Scalar>
TrainResult<Scalar> train_run(TrainMode mode, std::span<const FeatureSequence> train,
                              std::span<const FeatureSequence> dev, std::size_t num_classes,
                              const Hyperparams& hp, const TrainHooks<Scalar>& hooks) {
  hp.validate();
  if (train.empty()) throw ValidationError("train_run: empty training split");
  if (dev.empty()) throw ValidationError("train_run: empty dev split");
  const std::size_t dim = train.front().dim;
  for (const auto& u : train)
    if (u.dim != dim) throw ShapeError("train_run: utterance " + u.id + " has a different dim");

  const StackConfig config = make_stack_config(mode, hp, dim, num_classes);
  TrainResult<Scalar> result{init_network<Scalar>(config, hp.seed), {}, {}};
  Network<Scalar>& net = result.network;
  TrainState<Scalar>& state = result.state;

  const auto params = net.parameters();
  state.accumulators.resize(params.size());
  state.learning_rate = hp.learning_rate;

  // Gradient clipping works per branch so the forward branch of a twin model
  // sees exactly what a unidirectional model would.
  std::vector<Tensor<Scalar>> handles;
  for (const auto& p : params) handles.push_back(p.tensor);
  std::vector<Tensor<Scalar>*> forward_group, backward_group;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool separate = mode == TrainMode::kUniTwin && params[i].backward_branch;
    (separate ? backward_group : forward_group).push_back(&handles[i]);
  }

  Rng shuffle_rng(derive_seed(hp.seed, SeedStream::kShuffle));
  Rng fwd_drop(derive_seed(hp.seed, SeedStream::kForwardDropout));
  Rng bwd_drop(derive_seed(hp.seed, SeedStream::kBackwardDropout));
  const bool twin = mode == TrainMode::kUniTwin;
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    state.epoch = epoch;
    const auto batches = make_batches(train, hp.batch_size, shuffle_rng());
    double loss_sum = 0;
    std::size_t utterances = 0;

    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& batch = batches[bi];
      const std::size_t B = batch.layout.batch;
      const Tensor<Scalar> inputs(batch_inputs<Scalar>(train, batch));
      const LabelSequence labels = batch_labels(train, batch);
      const auto weights = frame_weights<Scalar>(batch.layout);

      RunOptions<Scalar> options;
      options.norm = NormMode::kTraining;
      if (hp.dropout > 0) {
        options.forward_dropout = draw_masks(net.forward_layers, B, hp.dropout, fwd_drop);
        options.backward_dropout = draw_masks(net.backward_layers, B, hp.dropout, bwd_drop);
      }

      Graph<Scalar> graph;
      GraphScope<Scalar> scope(graph);
      LossBreakdown<Scalar> loss;
      try {
        auto out = run_stack(net, inputs, batch.layout, options);
        const auto nll_f = nll<Scalar>(out.posteriors, labels, weights);
        Tensor<Scalar> nll_b, omega;
        if (twin) {
          nll_b = nll<Scalar>(out.backward_posteriors, labels, weights).value;
          std::vector<Tensor<Scalar>> per_layer;
          for (std::size_t l = 0; l < out.forward.size(); ++l)
            per_layer.push_back(twin_penalty<Scalar>(out.forward[l], out.backward[l], weights,
                                                     hp.twin_stop_backward_grad));
          omega = multi_layer_penalty<Scalar>(per_layer);
        }
        // With lambda = 0 the penalty stays out of the graph entirely.
        loss = composite_loss<Scalar>(nll_f.value, nll_b, hp.lambda > 0 ? omega : Tensor<Scalar>(),
                                      hp.lambda);
        if (omega) loss.omega = omega.item();
        if (!std::isfinite(loss.total)) throw NumericError("non-finite loss");
        graph.backward(loss.objective);
      } catch (const NumericError& e) {
        for (auto& h : handles) h.zero_grad();
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(bi + 1) + " (lr " +
                           std::to_string(state.learning_rate) + "): " + e.what());
      }

      if (hp.clip_norm > 0) {
        clip_grad_norm<Scalar>(forward_group, hp.clip_norm);
        if (!backward_group.empty()) clip_grad_norm<Scalar>(backward_group, hp.clip_norm);
      }
      for (std::size_t i = 0; i < handles.size(); ++i) {
        rmsprop_step(handles[i].mutable_value(), handles[i].grad(), state.accumulators[i],
                     state.learning_rate, hp.rmsprop);
        handles[i].zero_grad();
      }
      ++step;
      if (hooks.on_step) hooks.on_step(step, net);

      loss_sum += loss.total * static_cast<double>(B);
      utterances += B;
    }

    const EvalSummary summary = evaluate(net, dev, hp.batch_size);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(utterances);
    rec.dev_fer = summary.fer;
    rec.dev_omega = summary.omega;
    rec.learning_rate = state.learning_rate;
    result.history.push_back(rec);

    state.dev_history.push_back(summary.fer);
    // A perfect previous epoch leaves nothing to compare against.
    if (state.dev_history.size() >= 2 && state.dev_history[state.dev_history.size() - 2] > 0)
      state.learning_rate = lr_schedule_update(state.dev_history, state.learning_rate);
    if (hooks.on_epoch) hooks.on_epoch(rec, net);
  }
  return result;
}

template TrainResult<float> train_run(TrainMode, std::span<const FeatureSequence>,
                                      std::span<const FeatureSequence>, std::size_t,
                                      const Hyperparams&, const TrainHooks<float>&);
template TrainResult<double> train_run(TrainMode, std::span<const FeatureSequence>,
                                       std::span<const FeatureSequence>, std::size_t,
                                       const Hyperparams&, const TrainHooks<double>&);

}  // namespace twinseq
