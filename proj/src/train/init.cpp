#include "twinseq/train/init.hpp"

#include <cmath>

#include <Eigen/Dense>

namespace twinseq {

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x7477696eU};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

Matrix<double> glorot_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  if (fan_in == 0 || fan_out == 0) throw ValidationError("glorot_init: fans must be positive");
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Matrix<double> m(fan_in, fan_out);
  for (auto& v : m.values()) {
    do {
      v = dist(rng);
    } while (v == -a);
  }
  return m;
}

Matrix<double> orthogonal_init(std::size_t n, Rng& rng) {
  if (n == 0) throw ValidationError("orthogonal_init: size must be positive");
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) a(r, c) = gauss(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < q.cols(); ++c)
    if (r(c, c) < 0) q.col(c) *= -1.0;
  Matrix<double> out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out(i, j) = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return out;
}

namespace {

template <typename Scalar>
void assign(Tensor<Scalar>& t, const Matrix<double>& m) {
  t.mutable_value() = m.cast<Scalar>();
}

template <typename Scalar>
void init_layers(std::vector<CellParams<Scalar>>& layers, Rng& rng) {
  for (auto& layer : layers)
    for (auto& gate : layer.gates) {
      assign(gate.W, glorot_init(layer.input_size, layer.hidden_size, rng));
      assign(gate.U, orthogonal_init(layer.hidden_size, rng));
    }
}

template <typename Scalar>
void init_linear(Linear<Scalar>& linear, Rng& rng) {
  assign(linear.W, glorot_init(linear.W.rows(), linear.W.cols(), rng));
}

}  // namespace

template <typename Scalar>
Network<Scalar> init_network(const StackConfig& config, std::uint64_t seed) {
  Network<Scalar> net = Network<Scalar>::zeros(config);
  Rng fwd(derive_seed(seed, SeedStream::kForwardInit));
  Rng bwd(derive_seed(seed, SeedStream::kBackwardInit));
  init_layers(net.forward_layers, fwd);
  init_layers(net.backward_layers, bwd);
  init_linear(net.output, config.mode == StackMode::kBackwardOnly ? bwd : fwd);
  if (net.backward_output) init_linear(*net.backward_output, bwd);
  return net;
}

template Network<float> init_network<float>(const StackConfig&, std::uint64_t);
template Network<double> init_network<double>(const StackConfig&, std::uint64_t);

std::vector<double> recurrent_dropout_mask(std::size_t hidden, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ValidationError("dropout probability must be in [0, 1)");
  std::vector<double> mask(hidden, 1.0);
  if (p == 0.0) return mask;
  const double keep_scale = 1.0 / (1.0 - p);
  std::bernoulli_distribution keep(1.0 - p);
  for (auto& m : mask) m = keep(rng) ? keep_scale : 0.0;
  return mask;
}

}  // namespace twinseq
