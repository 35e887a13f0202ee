#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "twinseq/cells/cells.hpp"

namespace twinseq {

using Rng = std::mt19937_64;

// Independent random streams derived from one run seed. The forward and
// backward networks draw from disjoint streams so that adding a twin branch
// leaves the forward branch's initialization and dropout untouched.
enum class SeedStream : std::uint64_t {
  kForwardInit = 1,
  kBackwardInit = 2,
  kForwardDropout = 3,
  kBackwardDropout = 4,
  kShuffle = 5,
  kSynthTable = 10,
  kSynthUtterances = 11,
};

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream);

// fan_in x fan_out matrix with entries uniform on (-a, a),
// a = sqrt(6 / (fan_in + fan_out)).
Matrix<double> glorot_init(std::size_t fan_in, std::size_t fan_out, Rng& rng);

// Q factor of a Gaussian matrix, columns sign-corrected by diag(R).
Matrix<double> orthogonal_init(std::size_t n, Rng& rng);

// Glorot feed-forward weights, orthogonal recurrent weights, zero biases,
// identity batch norm.
template <typename Scalar>
Network<Scalar> init_network(const StackConfig& config, std::uint64_t seed);

// Variational recurrent dropout mask: entries 0 or 1/(1-p).
std::vector<double> recurrent_dropout_mask(std::size_t hidden, double p, Rng& rng);

}  // namespace twinseq
