#include "twinseq/cells/cells.hpp"

#include <algorithm>

namespace twinseq {

std::string_view to_string(CellVariant v) {
  switch (v) {
    case CellVariant::kLstm: return "lstm";
    case CellVariant::kGru: return "gru";
    case CellVariant::kMGru: return "mgru";
    case CellVariant::kLiGru: return "ligru";
  }
  return "?";
}

std::string_view to_string(StackMode m) {
  switch (m) {
    case StackMode::kForwardOnly: return "forward";
    case StackMode::kBackwardOnly: return "backward";
    case StackMode::kBidirectional: return "bidirectional";
    case StackMode::kTwin: return "twin";
  }
  return "?";
}

CellVariant parse_cell_variant(std::string_view text) {
  if (text == "lstm") return CellVariant::kLstm;
  if (text == "gru") return CellVariant::kGru;
  if (text == "mgru" || text == "m-gru") return CellVariant::kMGru;
  if (text == "ligru" || text == "li-gru") return CellVariant::kLiGru;
  throw ValidationError("unknown cell variant '" + std::string(text) + "'");
}

StackMode parse_stack_mode(std::string_view text) {
  if (text == "forward") return StackMode::kForwardOnly;
  if (text == "backward") return StackMode::kBackwardOnly;
  if (text == "bidirectional") return StackMode::kBidirectional;
  if (text == "twin") return StackMode::kTwin;
  throw ValidationError("unknown stack mode '" + std::string(text) + "'");
}

std::vector<std::string> gate_names(CellVariant v) {
  switch (v) {
    case CellVariant::kLstm: return {"i", "f", "o", "g"};
    case CellVariant::kGru: return {"z", "r", "h"};
    case CellVariant::kMGru:
    case CellVariant::kLiGru: return {"z", "h"};
  }
  return {};
}

void StackConfig::validate() const {
  if (input_size == 0) throw ValidationError("stack: input size must be positive");
  if (hidden_sizes.empty()) throw ValidationError("stack: at least one layer required");
  for (auto h : hidden_sizes)
    if (h == 0) throw ValidationError("stack: hidden sizes must be positive");
  if (num_classes < 2) throw ValidationError("stack: at least two output classes required");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("stack: dropout must be in [0, 1)");
}

bool SequenceLayout::all_valid() const {
  return std::all_of(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; });
}

template <typename Scalar>
std::vector<Scalar> SequenceLayout::row_mask() const {
  if (all_valid()) return {};
  return std::vector<Scalar>(valid.begin(), valid.end());
}

template std::vector<float> SequenceLayout::row_mask<float>() const;
template std::vector<double> SequenceLayout::row_mask<double>() const;

template <typename Scalar>
CellParams<Scalar> CellParams<Scalar>::zeros(CellVariant variant, std::size_t input,
                                             std::size_t hidden, bool batch_norm) {
  CellParams p;
  p.variant = variant;
  p.input_size = input;
  p.hidden_size = hidden;
  for (std::size_t g = 0; g < gate_names(variant).size(); ++g) {
    GateParams<Scalar> gate;
    gate.W = Tensor<Scalar>(Matrix<Scalar>(input, hidden), true);
    gate.U = Tensor<Scalar>(Matrix<Scalar>(hidden, hidden), true);
    if (batch_norm) {
      gate.bn.emplace(hidden);
    } else {
      gate.b = Tensor<Scalar>(Matrix<Scalar>(1, hidden), true);
    }
    p.gates.push_back(std::move(gate));
  }
  return p;
}

template <typename Scalar>
Linear<Scalar> Linear<Scalar>::zeros(std::size_t input, std::size_t outputs) {
  return {Tensor<Scalar>(Matrix<Scalar>(input, outputs), true),
          Tensor<Scalar>(Matrix<Scalar>(1, outputs), true)};
}

// ---------------------------------------------------------------------------
// Recurrence

namespace {

template <typename Scalar>
std::vector<Tensor<Scalar>> project_inputs(CellParams<Scalar>& p, const Tensor<Scalar>& x,
                                           NormMode norm, std::span<const Scalar> mask) {
  if (x.cols() != p.input_size) {
    throw ShapeError("cell: input has " + std::to_string(x.cols()) + " features, expected " +
                     std::to_string(p.input_size));
  }
  std::vector<Tensor<Scalar>> out;
  out.reserve(p.gates.size());
  for (auto& gate : p.gates) {
    Tensor<Scalar> z = matmul(x, gate.W);
    out.push_back(gate.bn ? gate.bn->forward(z, norm, mask) : add(z, gate.b));
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> gate_input(const Tensor<Scalar>& x_proj, const Tensor<Scalar>& h,
                          const GateParams<Scalar>& gate) {
  return add(x_proj, matmul(h, gate.U));
}

// `x` holds one projected input per gate; `dropout` (may be null) masks the
// state entering the hidden-to-hidden products.
template <typename Scalar>
CellState<Scalar> recur(const CellParams<Scalar>& p, std::span<const Tensor<Scalar>> x,
                        const CellState<Scalar>& prev, const Tensor<Scalar>* dropout) {
  if (prev.h.cols() != p.hidden_size) {
    throw ShapeError("cell: previous state has " + std::to_string(prev.h.cols()) +
                     " units, expected " + std::to_string(p.hidden_size));
  }
  const Tensor<Scalar> h = dropout ? mul(prev.h, *dropout) : prev.h;
  const auto& g = p.gates;
  CellState<Scalar> next;
  switch (p.variant) {
    case CellVariant::kLstm: {
      Tensor<Scalar> i = sigmoid(gate_input(x[0], h, g[0]));
      Tensor<Scalar> f = sigmoid(gate_input(x[1], h, g[1]));
      Tensor<Scalar> o = sigmoid(gate_input(x[2], h, g[2]));
      Tensor<Scalar> cand = tanh(gate_input(x[3], h, g[3]));
      next.c = add(mul(f, prev.c), mul(i, cand));
      next.h = mul(o, tanh(next.c));
      return next;
    }
    case CellVariant::kGru: {
      Tensor<Scalar> z = sigmoid(gate_input(x[0], h, g[0]));
      Tensor<Scalar> r = sigmoid(gate_input(x[1], h, g[1]));
      Tensor<Scalar> cand = tanh(gate_input(x[2], mul(r, h), g[2]));
      next.h = add(mul(z, prev.h), mul(affine(z, Scalar(-1), Scalar(1)), cand));
      return next;
    }
    case CellVariant::kMGru:
    case CellVariant::kLiGru: {
      Tensor<Scalar> z = sigmoid(gate_input(x[0], h, g[0]));
      Tensor<Scalar> pre = gate_input(x[1], h, g[1]);
      Tensor<Scalar> cand = p.variant == CellVariant::kMGru ? tanh(pre) : relu(pre);
      next.h = add(mul(z, prev.h), mul(affine(z, Scalar(-1), Scalar(1)), cand));
      return next;
    }
  }
  throw Error("cell: unknown variant");
}

}  // namespace

template <typename Scalar>
CellState<Scalar> zero_state(const CellParams<Scalar>& params, std::size_t batch) {
  CellState<Scalar> s;
  s.h = Tensor<Scalar>::zeros(batch, params.hidden_size);
  if (params.variant == CellVariant::kLstm) s.c = Tensor<Scalar>::zeros(batch, params.hidden_size);
  return s;
}

template <typename Scalar>
CellState<Scalar> cell_step(CellParams<Scalar>& params, const Tensor<Scalar>& x,
                            const CellState<Scalar>& prev, NormMode norm) {
  if (x.rows() != prev.h.rows()) throw ShapeError("cell_step: batch sizes differ");
  auto proj = project_inputs<Scalar>(params, x, norm, {});
  return recur<Scalar>(params, proj, prev, nullptr);
}

template <typename Scalar>
StateTrajectory<Scalar> run_direction(CellParams<Scalar>& params, const Tensor<Scalar>& inputs,
                                      const SequenceLayout& layout, Direction direction,
                                      NormMode norm, const Tensor<Scalar>* dropout) {
  const std::size_t steps = layout.steps, batch = layout.batch;
  if (steps == 0 || batch == 0) throw ShapeError("run_direction: empty sequence");
  if (!inputs || inputs.rows() != steps * batch) {
    throw ShapeError("run_direction: expected " + std::to_string(steps * batch) +
                     " input rows");
  }
  if (dropout && (dropout->rows() != batch || dropout->cols() != params.hidden_size)) {
    throw ShapeError("run_direction: dropout mask must be batch x hidden");
  }
  const std::vector<Scalar> mask = layout.row_mask<Scalar>();
  const auto proj = project_inputs<Scalar>(params, inputs, norm, mask);

  StateTrajectory<Scalar> traj;
  traj.direction = direction;
  traj.batch = batch;
  traj.hidden.resize(steps);
  if (params.variant == CellVariant::kLstm) traj.cell.resize(steps);

  CellState<Scalar> state = zero_state(params, batch);
  std::vector<Tensor<Scalar>> x(proj.size());
  std::vector<Scalar> step_mask(batch);
  for (std::size_t i = 0; i < steps; ++i) {
    const std::size_t t = direction == Direction::kForward ? i : steps - 1 - i;
    for (std::size_t g = 0; g < proj.size(); ++g) x[g] = slice_rows(proj[g], t * batch, batch);
    state = recur<Scalar>(params, x, state, dropout);
    if (!mask.empty()) {
      bool padded = false;
      for (std::size_t b = 0; b < batch; ++b) {
        step_mask[b] = mask[t * batch + b];
        padded = padded || step_mask[b] == 0;
      }
      if (padded) {
        state.h = scale_rows<Scalar>(state.h, step_mask);
        if (state.c) state.c = scale_rows<Scalar>(state.c, step_mask);
      }
    }
    traj.hidden[t] = state.h;
    if (state.c) traj.cell[t] = state.c;
  }
  traj.stacked = steps == 1 ? traj.hidden[0] : concat_rows<Scalar>(traj.hidden);
  return traj;
}

template <typename Scalar>
StateTrajectory<Scalar> run_direction(CellParams<Scalar>& params, const Matrix<Scalar>& frames,
                                      Direction direction) {
  if (frames.rows() == 0) throw ShapeError("run_direction: empty sequence");
  return run_direction(params, Tensor<Scalar>(frames), SequenceLayout::single(frames.rows()),
                       direction);
}

template <typename Scalar>
Tensor<Scalar> combine_bidirectional(const Tensor<Scalar>& forward,
                                     const Tensor<Scalar>& backward) {
  if (forward.rows() != backward.rows()) {
    throw ShapeError("combine_bidirectional: directions cover different timesteps");
  }
  const Tensor<Scalar> parts[] = {forward, backward};
  return concat_cols<Scalar>(parts);
}

template <typename Scalar>
StackOutput<Scalar> run_stack(Network<Scalar>& net, const Tensor<Scalar>& inputs,
                              const SequenceLayout& layout, const RunOptions<Scalar>& options) {
  const StackConfig& cfg = net.config;
  auto dropout_for = [](const std::vector<Tensor<Scalar>>& masks, std::size_t l) {
    return l < masks.size() && masks[l] ? &masks[l] : nullptr;
  };
  StackOutput<Scalar> out;
  Tensor<Scalar> fwd_in = inputs, bwd_in = inputs;
  for (std::size_t l = 0; l < cfg.layers(); ++l) {
    if (cfg.has_forward()) {
      out.forward.push_back(run_direction(net.forward_layers[l], fwd_in, layout,
                                          Direction::kForward, options.norm,
                                          dropout_for(options.forward_dropout, l)));
    }
    if (cfg.has_backward()) {
      out.backward.push_back(run_direction(net.backward_layers[l], bwd_in, layout,
                                           Direction::kBackward, options.norm,
                                           dropout_for(options.backward_dropout, l)));
    }
    if (cfg.mode == StackMode::kBidirectional) {
      fwd_in = bwd_in = combine_bidirectional(out.forward.back().stacked,
                                              out.backward.back().stacked);
    } else {
      if (cfg.has_forward()) fwd_in = out.forward.back().stacked;
      if (cfg.has_backward()) bwd_in = out.backward.back().stacked;
    }
  }
  const Tensor<Scalar>& features = cfg.mode == StackMode::kBackwardOnly ? bwd_in : fwd_in;
  out.logits = net.output.forward(features);
  out.posteriors = softmax_rows(out.logits);
  if (cfg.mode == StackMode::kTwin) {
    out.backward_logits = net.backward_output->forward(bwd_in);
    out.backward_posteriors = softmax_rows(out.backward_logits);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network

template <typename Scalar>
Network<Scalar> Network<Scalar>::zeros(const StackConfig& config) {
  config.validate();
  Network net;
  net.config = config;
  const bool bidir = config.mode == StackMode::kBidirectional;
  std::size_t input = config.input_size;
  for (std::size_t l = 0; l < config.layers(); ++l) {
    const std::size_t hidden = config.hidden_sizes[l];
    if (config.has_forward()) {
      net.forward_layers.push_back(
          CellParams<Scalar>::zeros(config.variant, input, hidden, config.batch_norm));
    }
    if (config.has_backward()) {
      net.backward_layers.push_back(
          CellParams<Scalar>::zeros(config.variant, input, hidden, config.batch_norm));
    }
    input = bidir ? 2 * hidden : hidden;
  }
  net.output = Linear<Scalar>::zeros(input, config.num_classes);
  if (config.mode == StackMode::kTwin) {
    net.backward_output = Linear<Scalar>::zeros(input, config.num_classes);
  }
  return net;
}

template <typename Scalar>
std::vector<typename Network<Scalar>::Parameter> Network<Scalar>::parameters() const {
  std::vector<Parameter> params;
  auto add_layers = [&](const std::vector<CellParams<Scalar>>& layers, const std::string& prefix,
                        bool backward) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto names = gate_names(layers[l].variant);
      for (std::size_t g = 0; g < layers[l].gates.size(); ++g) {
        const auto& gate = layers[l].gates[g];
        const std::string base = prefix + ".l" + std::to_string(l) + "." + names[g] + ".";
        params.push_back({base + "W", gate.W, backward});
        params.push_back({base + "U", gate.U, backward});
        if (gate.b) params.push_back({base + "b", gate.b, backward});
        if (gate.bn) {
          params.push_back({base + "bn.gamma", gate.bn->gamma, backward});
          params.push_back({base + "bn.beta", gate.bn->beta, backward});
        }
      }
    }
  };
  add_layers(forward_layers, "fwd", false);
  add_layers(backward_layers, "bwd", true);
  const bool output_is_backward = config.mode == StackMode::kBackwardOnly;
  params.push_back({"out.W", output.W, output_is_backward});
  params.push_back({"out.b", output.b, output_is_backward});
  if (backward_output) {
    params.push_back({"bwd_out.W", backward_output->W, true});
    params.push_back({"bwd_out.b", backward_output->b, true});
  }
  return params;
}

template <typename Scalar>
std::size_t Network<Scalar>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.value().size();
  return n;
}

template <typename Scalar>
Network<Scalar> Network<Scalar>::clone() const {
  auto copy = [](const Tensor<Scalar>& t) {
    return t ? Tensor<Scalar>(t.value(), t.requires_grad()) : Tensor<Scalar>();
  };
  auto copy_layers = [&](const std::vector<CellParams<Scalar>>& layers) {
    std::vector<CellParams<Scalar>> out = layers;
    for (auto& layer : out)
      for (auto& gate : layer.gates) {
        gate.W = copy(gate.W);
        gate.U = copy(gate.U);
        gate.b = copy(gate.b);
        if (gate.bn) {
          gate.bn->gamma = copy(gate.bn->gamma);
          gate.bn->beta = copy(gate.bn->beta);
        }
      }
    return out;
  };
  Network net;
  net.config = config;
  net.forward_layers = copy_layers(forward_layers);
  net.backward_layers = copy_layers(backward_layers);
  net.output = {copy(output.W), copy(output.b)};
  if (backward_output) net.backward_output = Linear<Scalar>{copy(backward_output->W),
                                                            copy(backward_output->b)};
  return net;
}

#define TWINSEQ_INSTANTIATE_CELLS(S)                                                         \
  template struct CellParams<S>;                                                             \
  template struct Linear<S>;                                                                 \
  template class Network<S>;                                                                 \
  template CellState<S> zero_state(const CellParams<S>&, std::size_t);                       \
  template CellState<S> cell_step(CellParams<S>&, const Tensor<S>&, const CellState<S>&,     \
                                  NormMode);                                                 \
  template StateTrajectory<S> run_direction(CellParams<S>&, const Tensor<S>&,                \
                                            const SequenceLayout&, Direction, NormMode,      \
                                            const Tensor<S>*);                               \
  template StateTrajectory<S> run_direction(CellParams<S>&, const Matrix<S>&, Direction);    \
  template Tensor<S> combine_bidirectional(const Tensor<S>&, const Tensor<S>&);              \
  template StackOutput<S> run_stack(Network<S>&, const Tensor<S>&, const SequenceLayout&,    \
                                    const RunOptions<S>&);

TWINSEQ_INSTANTIATE_CELLS(float)
TWINSEQ_INSTANTIATE_CELLS(double)

}  // namespace twinseq
