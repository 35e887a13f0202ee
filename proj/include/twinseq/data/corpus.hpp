#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "twinseq/cells/cells.hpp"
#include "twinseq/core/labels.hpp"
#include "twinseq/core/matrix.hpp"

namespace twinseq {

// One utterance: N frames of `dim` features (row-major) and N labels.
struct FeatureSequence {
  std::string id;
  std::size_t dim = 0;
  std::vector<float> frames;
  LabelSequence labels;

  std::size_t length() const { return labels.size(); }
  std::span<const float> frame(std::size_t t) const { return {frames.data() + t * dim, dim}; }
  template <typename Scalar>
  Matrix<Scalar> matrix() const {
    return Matrix<Scalar>(length(), dim, std::vector<Scalar>(frames.begin(), frames.end()));
  }
  void validate() const;
  friend bool operator==(const FeatureSequence&, const FeatureSequence&) = default;
};

enum class Split : std::uint8_t { kTrain, kDev, kTest };

std::string_view to_string(Split s);
Split parse_split(std::string_view text);

struct Corpus {
  std::string name;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 0;
  std::vector<FeatureSequence> utterances;
  std::vector<Split> splits;  // parallel to utterances
  std::vector<double> priors;
  // Best frame accuracy achievable knowing the latent past but not the next
  // symbol (synthetic corpora only; NaN otherwise).
  double ambiguity_ceiling = std::numeric_limits<double>::quiet_NaN();

  std::vector<FeatureSequence> split(Split s) const;
  void validate() const;
};

// Concatenates frames t-past .. t+future for each t; out-of-range indices
// replicate the first / last frame.
template <typename Scalar>
Matrix<Scalar> context_window(const Matrix<Scalar>& frames, std::size_t past, std::size_t future);
FeatureSequence context_window(const FeatureSequence& utterance, std::size_t past,
                               std::size_t future);
std::vector<FeatureSequence> context_window(std::span<const FeatureSequence> utterances,
                                            std::size_t past, std::size_t future);

inline constexpr double kPriorFloor = 1e-8;

// Class frame frequencies, floored at kPriorFloor and renormalized.
std::vector<double> compute_label_priors(std::span<const FeatureSequence> utterances,
                                         std::size_t num_classes);

// ---------------------------------------------------------------------------
// Batching

struct Batch {
  std::vector<std::size_t> utterances;  // indices into the split
  SequenceLayout layout;
  std::vector<std::size_t> lengths;
};

// Length-bucketed batches of at most `batch_size` utterances. Utterances are
// ordered by length (ties broken by a seeded random key), cut into batches,
// and the batch order is shuffled with the same seed.
std::vector<Batch> make_batches(std::span<const FeatureSequence> utterances,
                                std::size_t batch_size, std::uint64_t seed);

// Time-major padded inputs (steps*batch x dim); padded rows are zero.
template <typename Scalar>
Matrix<Scalar> batch_inputs(std::span<const FeatureSequence> utterances, const Batch& batch);
// Labels in the same row order; padded rows hold 0.
LabelSequence batch_labels(std::span<const FeatureSequence> utterances, const Batch& batch);

// ---------------------------------------------------------------------------
// Container + manifest

inline constexpr char kCorpusMagic[4] = {'T', 'W', 'S', 'Q'};
inline constexpr std::uint32_t kCorpusVersion = 1;

// Writes the binary container and its JSON manifest.
void write_corpus(const Corpus& corpus, const std::filesystem::path& container,
                  const std::filesystem::path& manifest);
Corpus read_corpus(const std::filesystem::path& container,
                   const std::filesystem::path& manifest);

}  // namespace twinseq
