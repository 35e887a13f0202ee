#include "twinseq/data/synth.hpp"

#include <cmath>
#include <cstdio>
#include <random>

#include "twinseq/train/init.hpp"

namespace twinseq {

void SynthSpec::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("synth: " + m); };
  if (symbols < 2) fail("at least two latent symbols required");
  if (classes % symbols != 0) fail("class count must be a multiple of the symbol count");
  const std::size_t per_symbol = classes / symbols;
  if (per_symbol < symbols || per_symbol % 5 == 0) {
    fail("classes / symbols must be >= symbols and not a multiple of 5");
  }
  double total = 0;
  for (double w : mix) {
    if (!(w >= 0)) fail("mix weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) fail("mix weights must sum to 1");
  if (!(mix[2] > 0)) fail("the next-symbol weight must be positive");
  if (!(noise >= 0) || !std::isfinite(noise)) fail("noise stddev must be finite and >= 0");
  if (feature_dim == 0) fail("feature dimension must be positive");
  if (min_length == 0 || min_length > max_length) fail("invalid utterance length range");
  if (min_segment == 0 || min_segment > max_segment) fail("invalid segment length range");
  if (train_utterances == 0 || dev_utterances == 0) fail("train and dev splits must be nonempty");
}

std::uint32_t context_class(std::uint32_t prev, std::uint32_t cur, std::uint32_t next,
                            std::size_t symbols, std::size_t classes, bool left_context) {
  const std::size_t per_symbol = classes / symbols;
  const std::size_t left = left_context ? 3 * prev : 0;
  return static_cast<std::uint32_t>(cur * per_symbol + (left + 5 * next) % per_symbol);
}

double ambiguity_rate(const std::vector<std::vector<std::uint32_t>>& latents,
                      std::size_t symbols, std::size_t classes, bool left_context) {
  std::size_t ambiguous = 0, total = 0;
  for (const auto& s : latents) {
    const std::size_t n = s.size();
    for (std::size_t t = 0; t < n; ++t) {
      const auto prev = s[t == 0 ? 0 : t - 1];
      const auto next = s[t + 1 < n ? t + 1 : n - 1];
      if (context_class(prev, s[t], next, symbols, classes, left_context) !=
          context_class(prev, s[t], s[t], symbols, classes, left_context)) {
        ++ambiguous;
      }
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(ambiguous) / static_cast<double>(total);
}

SyntheticCorpus generate_synthetic_corpus(const SynthSpec& spec) {
  spec.validate();
  SyntheticCorpus out;
  const std::size_t d = spec.feature_dim;

  std::mt19937_64 table_rng(derive_seed(spec.seed, SeedStream::kSynthTable));
  std::normal_distribution<double> gauss(0.0, 1.0);
  out.embeddings = Matrix<double>(spec.symbols, d);
  for (auto& v : out.embeddings.values()) v = gauss(table_rng);

  std::mt19937_64 rng(derive_seed(spec.seed, SeedStream::kSynthUtterances));
  auto uniform_int = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  Corpus& corpus = out.corpus;
  corpus.name = spec.name;
  corpus.feature_dim = d;
  corpus.num_classes = spec.classes;
  const std::size_t total =
      spec.train_utterances + spec.dev_utterances + spec.test_utterances;
  for (std::size_t u = 0; u < total; ++u) {
    const std::size_t n = uniform_int(spec.min_length, spec.max_length);
    std::vector<std::uint32_t> s;
    s.reserve(n);
    auto symbol = static_cast<std::uint32_t>(uniform_int(0, spec.symbols - 1));
    while (s.size() < n) {
      const std::size_t seg = uniform_int(spec.min_segment, spec.max_segment);
      for (std::size_t i = 0; i < seg && s.size() < n; ++i) s.push_back(symbol);
      // Next segment uses a different symbol.
      const auto shift = static_cast<std::uint32_t>(uniform_int(1, spec.symbols - 1));
      symbol = static_cast<std::uint32_t>((symbol + shift) % spec.symbols);
    }

    FeatureSequence utt;
    char id[32];
    std::snprintf(id, sizeof id, "utt%05zu", u);
    utt.id = id;
    utt.dim = d;
    utt.frames.resize(n * d);
    utt.labels.resize(n);
    for (std::size_t t = 0; t < n; ++t) {
      const auto prev = s[t == 0 ? 0 : t - 1];
      const auto next = s[t + 1 < n ? t + 1 : n - 1];
      for (std::size_t j = 0; j < d; ++j) {
        const double x = spec.mix[0] * out.embeddings(prev, j) +
                         spec.mix[1] * out.embeddings(s[t], j) +
                         spec.mix[2] * out.embeddings(next, j) + spec.noise * gauss(rng);
        utt.frames[t * d + j] = static_cast<float>(x);
      }
      utt.labels[t] = context_class(prev, s[t], next, spec.symbols, spec.classes, spec.left_context);
    }
    corpus.utterances.push_back(std::move(utt));
    corpus.splits.push_back(u < spec.train_utterances ? Split::kTrain
                            : u < spec.train_utterances + spec.dev_utterances ? Split::kDev
                                                                               : Split::kTest);
    out.latents.push_back(std::move(s));
  }
  corpus.priors = compute_label_priors(corpus.split(Split::kTrain), spec.classes);
  out.ambiguity_rate =
      ambiguity_rate(out.latents, spec.symbols, spec.classes, spec.left_context);
  corpus.ambiguity_ceiling = 1.0 - out.ambiguity_rate;
  return out;
}

}  // namespace twinseq
