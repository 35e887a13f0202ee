#pragma once

#include <functional>
#include <string>
#include <vector>

#include "twinseq/core/tensor.hpp"

namespace twinseq {

struct NamedTensor {
  std::string name;
  Tensor<double> tensor;
};

struct GradcheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0;
  double tolerance = 0;
  bool passed = false;

  const GradcheckEntry* worst() const;
};

using Objective = std::function<Tensor<double>()>;

// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

// Central-difference check of the gradients `f` produces for `params`.
// Throws NumericError when two evaluations of `f` disagree.
GradcheckReport gradcheck(const Objective& f, const std::vector<NamedTensor>& params,
                          double tolerance, double step = 1e-5);

// Same comparison against caller-supplied analytic gradients (one matrix per
// parameter, in order).
GradcheckReport compare_gradients(const Objective& f, const std::vector<NamedTensor>& params,
                                  const std::vector<Matrix<double>>& analytic,
                                  double tolerance, double step = 1e-5);

}  // namespace twinseq
