#pragma once

// Reverse-mode automatic differentiation over dense 2-D tensors.
//
// Every differentiable operation whose inputs require gradients records a
// node on the thread's active Graph. Creation order is a topological order,
// so backward() replays the record in reverse and then clears it. Leaf
// tensors (parameters) keep their accumulated gradients until zero_grad().

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "twinseq/core/matrix.hpp"

namespace twinseq {

template <typename Scalar>
class Graph;

enum class OpKind {
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kSigmoid,
  kTanh,
  kRelu,
  kConcat,
  kSlice,
  kSum,
  kMean,
  kSquare,
  kLog,
  kSoftmaxRows,
};

std::string_view op_name(OpKind kind);

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until the first accumulation
  bool requires_grad = false;
  const Graph<Scalar>* graph = nullptr;
  // Propagates this node's grad into its parents. Released by Graph::clear().
  std::function<void(const Matrix<Scalar>&)> backward;

  void accumulate(const Matrix<Scalar>& g);
};

template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix<Scalar> value, bool requires_grad = false);

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor(Matrix<Scalar>(rows, cols));
  }
  static Tensor scalar(Scalar v) { return Tensor(Matrix<Scalar>(1, 1, v)); }

  explicit operator bool() const { return node_ != nullptr; }

  const Matrix<Scalar>& value() const { return node_->value; }
  // Leaf parameters only: optimizers update values between graphs.
  Matrix<Scalar>& mutable_value();

  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::vector<std::size_t> shape() const { return {rows(), cols()}; }
  Scalar item() const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Zero-filled matrix of the value's shape when nothing has accumulated.
  Matrix<Scalar> grad() const;
  void zero_grad() { node_->grad = Matrix<Scalar>(); }
  bool is_leaf() const { return node_ && !node_->backward && node_->graph == nullptr; }

  Node<Scalar>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Scalar>>& shared() const { return node_; }
  explicit Tensor(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

// Ordered record of executed differentiable operations.
template <typename Scalar>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  ~Graph() { clear(); }

  void record(std::shared_ptr<Node<Scalar>> node);
  std::size_t size() const { return nodes_.size(); }
  void clear();

  // Replays recorded nodes in reverse creation order starting from `loss`.
  void backward(const Tensor<Scalar>& loss);

  static Graph& active();

 private:
  template <typename>
  friend class GraphScope;
  std::vector<std::shared_ptr<Node<Scalar>>> nodes_;
};

// Makes `graph` the active graph of this thread for the scope's lifetime.
template <typename Scalar>
class GraphScope {
 public:
  explicit GraphScope(Graph<Scalar>& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph<Scalar>* previous_;
};

// Disables graph recording on this thread (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool enabled();

 private:
  bool previous_;
};

// Per-thread instrumentation of forward operations.
struct OpCounts {
  std::uint64_t ops = 0;
  std::uint64_t multiply_adds = 0;
  friend bool operator==(const OpCounts&, const OpCounts&) = default;
};

class OpCounter {
 public:
  static OpCounts& current();
  static void reset() { current() = OpCounts{}; }
};

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  Graph<Scalar>::active().backward(loss);
}

// ---------------------------------------------------------------------------
// Operations. Shapes must conform exactly except where noted; every output is
// checked for NaN/Inf.

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
// `b` may also be a single row broadcast over the rows of `a`.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
// alpha * a + beta, elementwise.
template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& a, Scalar alpha, Scalar beta);
template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a);
template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& a);
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a);
template <typename Scalar>
Tensor<Scalar> concat_cols(std::span<const Tensor<Scalar>> parts);
template <typename Scalar>
Tensor<Scalar> concat_rows(std::span<const Tensor<Scalar>> parts);
template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& a, std::size_t begin, std::size_t count);
template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& a, std::size_t begin, std::size_t count);
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a);
template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a);
template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a);
template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& a);

// Multiplies row i by the constant weights[i]; no gradient flows to weights.
template <typename Scalar>
Tensor<Scalar> scale_rows(const Tensor<Scalar>& a, std::span<const Scalar> weights);
// Column vector of a(i, columns[i]).
template <typename Scalar>
Tensor<Scalar> gather_cols(const Tensor<Scalar>& a, std::span<const std::uint32_t> columns);
// log(max(a, floor)); entries below the floor get zero gradient and are
// counted in *clamped.
template <typename Scalar>
Tensor<Scalar> log_clamped(const Tensor<Scalar>& a, Scalar floor, std::size_t* clamped);
// Same value, no gradient path back to `a`.
template <typename Scalar>
Tensor<Scalar> detach(const Tensor<Scalar>& a);

// Batch normalization over rows. Rows with zero weight in `row_mask` (when
// given) are normalized but excluded from the statistics. The batch mean and
// biased variance are written to the out-parameters when non-null.
template <typename Scalar>
Tensor<Scalar> batch_norm_train(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                                const Tensor<Scalar>& beta,
                                std::span<const Scalar> row_mask, Scalar eps,
                                Matrix<Scalar>* batch_mean, Matrix<Scalar>* batch_var);
// (x - mean) * gamma / sqrt(var + eps) + beta with fixed statistics.
template <typename Scalar>
Tensor<Scalar> batch_norm_eval(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                               const Tensor<Scalar>& beta, const Matrix<Scalar>& mean,
                               const Matrix<Scalar>& var, Scalar eps);

// Generic dispatch for the argument-free kinds. kConcat joins columns;
// kSlice is rejected here (use slice_rows / slice_cols).
template <typename Scalar>
Tensor<Scalar> apply(OpKind kind, std::span<const Tensor<Scalar>> inputs);

}  // namespace twinseq
