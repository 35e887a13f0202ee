#include "twinseq/data/corpus.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

namespace twinseq {

std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::kTrain;
  if (text == "dev") return Split::kDev;
  if (text == "test") return Split::kTest;
  throw ValidationError("unknown split '" + std::string(text) + "'");
}

void FeatureSequence::validate() const {
  if (labels.empty()) throw ValidationError("utterance '" + id + "' has no frames");
  if (dim == 0) throw ValidationError("utterance '" + id + "' has zero feature dimension");
  if (frames.size() != labels.size() * dim) {
    throw ValidationError("utterance '" + id + "': frame values do not match " +
                          std::to_string(labels.size()) + " x " + std::to_string(dim));
  }
}

std::vector<FeatureSequence> Corpus::split(Split s) const {
  std::vector<FeatureSequence> out;
  for (std::size_t i = 0; i < utterances.size(); ++i)
    if (splits[i] == s) out.push_back(utterances[i]);
  return out;
}

void Corpus::validate() const {
  if (feature_dim == 0) throw ValidationError("corpus: feature dimension must be positive");
  if (num_classes < 2) throw ValidationError("corpus: at least two classes required");
  if (splits.size() != utterances.size()) throw ValidationError("corpus: split tags missing");
  std::set<std::string> ids;
  for (const auto& u : utterances) {
    u.validate();
    if (u.dim != feature_dim) {
      throw ValidationError("corpus: utterance '" + u.id + "' has dimension " +
                            std::to_string(u.dim) + ", corpus has " +
                            std::to_string(feature_dim));
    }
    for (auto y : u.labels) {
      if (y >= num_classes) {
        throw ValidationError("corpus: utterance '" + u.id + "' has label " + std::to_string(y) +
                              " but the class count is " + std::to_string(num_classes));
      }
    }
    if (!ids.insert(u.id).second) throw ValidationError("corpus: duplicate id '" + u.id + "'");
  }
  if (!priors.empty()) {
    if (priors.size() != num_classes) throw ValidationError("corpus: prior count mismatch");
    double total = 0;
    for (double p : priors) {
      if (!(p >= 0)) throw ValidationError("corpus: negative prior");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ValidationError("corpus: priors do not sum to 1");
  }
}

template <typename Scalar>
Matrix<Scalar> context_window(const Matrix<Scalar>& frames, std::size_t past, std::size_t future) {
  const std::size_t n = frames.rows(), d = frames.cols();
  const std::size_t width = past + future + 1;
  Matrix<Scalar> out(n, d * width);
  for (std::size_t t = 0; t < n; ++t) {
    auto row = out.row(t);
    for (std::size_t j = 0; j < width; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(past);
      const std::size_t s = static_cast<std::size_t>(
          std::clamp<std::ptrdiff_t>(src, 0, static_cast<std::ptrdiff_t>(n) - 1));
      auto in = frames.row(s);
      std::copy(in.begin(), in.end(), row.begin() + j * d);
    }
  }
  return out;
}

template Matrix<float> context_window(const Matrix<float>&, std::size_t, std::size_t);
template Matrix<double> context_window(const Matrix<double>&, std::size_t, std::size_t);

FeatureSequence context_window(const FeatureSequence& utterance, std::size_t past,
                               std::size_t future) {
  FeatureSequence out = utterance;
  if (past == 0 && future == 0) return out;
  const Matrix<float> windowed = context_window(
      Matrix<float>(utterance.length(), utterance.dim, utterance.frames), past, future);
  out.dim = windowed.cols();
  out.frames.assign(windowed.values().begin(), windowed.values().end());
  return out;
}

std::vector<FeatureSequence> context_window(std::span<const FeatureSequence> utterances,
                                            std::size_t past, std::size_t future) {
  std::vector<FeatureSequence> out;
  out.reserve(utterances.size());
  for (const auto& u : utterances) out.push_back(context_window(u, past, future));
  return out;
}

std::vector<double> compute_label_priors(std::span<const FeatureSequence> utterances,
                                         std::size_t num_classes) {
  if (num_classes == 0) throw ValidationError("priors: class count must be positive");
  std::vector<double> counts(num_classes, 0.0);
  double total = 0;
  for (const auto& u : utterances)
    for (auto y : u.labels) {
      if (y >= num_classes) throw ValidationError("priors: label out of range");
      counts[y] += 1;
      total += 1;
    }
  if (total == 0) throw ValidationError("priors: empty corpus");
  double norm = 0;
  for (auto& c : counts) {
    c = std::max(c / total, kPriorFloor);
    norm += c;
  }
  for (auto& c : counts) c /= norm;
  return counts;
}

std::vector<Batch> make_batches(std::span<const FeatureSequence> utterances,
                                std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ValidationError("batch size must be at least 1");
  std::mt19937_64 rng(seed);
  std::vector<std::pair<std::size_t, std::uint64_t>> keyed;
  keyed.reserve(utterances.size());
  for (std::size_t i = 0; i < utterances.size(); ++i) keyed.emplace_back(i, rng());
  std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
    const auto la = utterances[a.first].length(), lb = utterances[b.first].length();
    return la != lb ? la < lb : a.second < b.second;
  });

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < keyed.size(); start += batch_size) {
    Batch batch;
    const std::size_t end = std::min(keyed.size(), start + batch_size);
    for (std::size_t i = start; i < end; ++i) batch.utterances.push_back(keyed[i].first);
    std::size_t steps = 0;
    for (auto u : batch.utterances) {
      batch.lengths.push_back(utterances[u].length());
      steps = std::max(steps, utterances[u].length());
    }
    const std::size_t b = batch.utterances.size();
    batch.layout.steps = steps;
    batch.layout.batch = b;
    batch.layout.valid.assign(steps * b, 0);
    for (std::size_t j = 0; j < b; ++j)
      for (std::size_t t = 0; t < batch.lengths[j]; ++t) batch.layout.valid[t * b + j] = 1;
    batches.push_back(std::move(batch));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

template <typename Scalar>
Matrix<Scalar> batch_inputs(std::span<const FeatureSequence> utterances, const Batch& batch) {
  const std::size_t b = batch.layout.batch, steps = batch.layout.steps;
  const std::size_t dim = utterances[batch.utterances.front()].dim;
  Matrix<Scalar> out(steps * b, dim);
  for (std::size_t j = 0; j < b; ++j) {
    const auto& u = utterances[batch.utterances[j]];
    if (u.dim != dim) throw ShapeError("batch: feature dimensions differ");
    for (std::size_t t = 0; t < u.length(); ++t) {
      auto src = u.frame(t);
      std::copy(src.begin(), src.end(), out.row(t * b + j).begin());
    }
  }
  return out;
}

template Matrix<float> batch_inputs(std::span<const FeatureSequence>, const Batch&);
template Matrix<double> batch_inputs(std::span<const FeatureSequence>, const Batch&);

LabelSequence batch_labels(std::span<const FeatureSequence> utterances, const Batch& batch) {
  const std::size_t b = batch.layout.batch;
  LabelSequence out(batch.layout.steps * b, 0);
  for (std::size_t j = 0; j < b; ++j) {
    const auto& u = utterances[batch.utterances[j]];
    for (std::size_t t = 0; t < u.length(); ++t) out[t * b + j] = u.labels[t];
  }
  return out;
}

}  // namespace twinseq
