#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "twinseq/cells/cells.hpp"
#include "twinseq/train/trainer.hpp"

namespace twinseq {

// What a model file carries besides its parameters.
struct ModelMeta {
  StackConfig config;
  Precision precision = Precision::kFloat;
  std::size_t feature_dim = 0;  // raw frame dim before context windowing
  std::size_t past = 0;
  std::size_t future = 0;
  std::vector<double> priors;  // training label priors, for likelihood scaling
};

// "TWMD" container: magic, u32 version, u32 header length, JSON header, then
// every parameter followed by every batch-norm running statistic as f64.
inline constexpr char kModelMagic[4] = {'T', 'W', 'M', 'D'};
inline constexpr std::uint32_t kModelVersion = 1;

template <typename Scalar>
void save_model(const std::filesystem::path& path, const Network<Scalar>& net,
                const ModelMeta& meta);

ModelMeta read_model_meta(const std::filesystem::path& path);

// Loads into the requested precision regardless of the stored one.
template <typename Scalar>
Network<Scalar> load_model(const std::filesystem::path& path, ModelMeta* meta = nullptr);

}  // namespace twinseq
