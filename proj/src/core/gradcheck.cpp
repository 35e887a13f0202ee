#include "twinseq/core/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace twinseq {

namespace {

double evaluate(const Objective& f) {
  NoGradGuard no_grad;
  return f().item();
}

}  // namespace

const GradcheckEntry* GradcheckReport::worst() const {
  if (entries.empty()) return nullptr;
  return &*std::max_element(entries.begin(), entries.end(),
                            [](const auto& a, const auto& b) { return a.rel_error < b.rel_error; });
}

double relative_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / scale;
}

GradcheckReport compare_gradients(const Objective& f, const std::vector<NamedTensor>& params,
                                  const std::vector<Matrix<double>>& analytic,
                                  double tolerance, double step) {
  if (analytic.size() != params.size()) {
    throw ShapeError("compare_gradients: one analytic gradient per parameter required");
  }
  const double reference = evaluate(f);
  if (evaluate(f) != reference) {
    throw NumericError("gradcheck: objective is not deterministic (two evaluations differ)");
  }

  GradcheckReport report;
  report.tolerance = tolerance;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<double> param = params[p].tensor;
    Matrix<double>& values = param.mutable_value();
    if (!analytic[p].same_shape(values)) {
      throw ShapeError("compare_gradients: gradient shape differs for " + params[p].name);
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + step;
      const double up = evaluate(f);
      values[i] = original - step;
      const double down = evaluate(f);
      values[i] = original;
      GradcheckEntry entry;
      entry.param = params[p].name;
      entry.index = i;
      entry.analytic = analytic[p][i];
      entry.numeric = (up - down) / (2 * step);
      entry.rel_error = relative_error(entry.analytic, entry.numeric);
      report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
      report.entries.push_back(std::move(entry));
    }
  }
  report.passed = report.max_rel_error <= tolerance;
  return report;
}

GradcheckReport gradcheck(const Objective& f, const std::vector<NamedTensor>& params,
                          double tolerance, double step) {
  for (const auto& p : params) {
    if (!p.tensor.is_leaf()) throw Error("gradcheck: parameter " + p.name + " is not a leaf");
    p.tensor.node()->grad = Matrix<double>();
  }
  std::vector<Matrix<double>> analytic;
  {
    Graph<double> graph;
    GraphScope<double> scope(graph);
    Tensor<double> loss = f();
    if (loss.requires_grad()) graph.backward(loss);
  }
  for (const auto& p : params) analytic.push_back(p.tensor.grad());
  return compare_gradients(f, params, analytic, tolerance, step);
}

}  // namespace twinseq
