#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "twinseq/data/corpus.hpp"

namespace twinseq {

// Generator for a corpus whose frame labels depend on the next latent symbol.
//
// Each utterance is a piecewise-constant latent symbol sequence. Frame t mixes
// the embeddings of symbols t-1, t and t+1 (edges reuse the boundary symbol)
// plus Gaussian noise, and its label is a context class of that triple.
struct SynthSpec {
  std::string name = "synthetic";
  std::size_t symbols = 8;
  std::size_t classes = 64;  // symbols * per-symbol context classes
  std::array<double, 3> mix = {0.25, 0.5, 0.25};  // weights of s[t-1], s[t], s[t+1]
  double noise = 0.5;
  // Labels depend on the previous symbol too (triphone-style) when set;
  // otherwise only on the current and next symbols.
  bool left_context = true;
  std::size_t feature_dim = 16;
  std::size_t min_length = 30;
  std::size_t max_length = 60;
  std::size_t min_segment = 3;
  std::size_t max_segment = 8;
  std::size_t train_utterances = 400;
  std::size_t dev_utterances = 100;
  std::size_t test_utterances = 100;
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

struct SyntheticCorpus {
  Corpus corpus;
  std::vector<std::vector<std::uint32_t>> latents;  // per utterance, per frame
  Matrix<double> embeddings;                        // symbols x feature_dim
  double ambiguity_rate = 0;
};

// Triple-to-class map: symbol s owns classes [s*C, (s+1)*C), C = classes /
// symbols, and the offset is (3*prev + 5*next) mod C, which makes the label
// of every frame preceding a symbol change depend on the next symbol. Without
// left context the prev term is dropped.
std::uint32_t context_class(std::uint32_t prev, std::uint32_t cur, std::uint32_t next,
                            std::size_t symbols, std::size_t classes, bool left_context = true);

// Fraction of frames whose label would differ had the current symbol
// continued (i.e. the label is not determined by the latent past).
double ambiguity_rate(const std::vector<std::vector<std::uint32_t>>& latents,
                      std::size_t symbols, std::size_t classes, bool left_context = true);

SyntheticCorpus generate_synthetic_corpus(const SynthSpec& spec);

}  // namespace twinseq
