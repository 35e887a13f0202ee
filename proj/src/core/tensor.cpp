#include "twinseq/core/tensor.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace twinseq {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kRelu: return "relu";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSquare: return "square";
    case OpKind::kLog: return "log";
    case OpKind::kSoftmaxRows: return "softmax-rows";
  }
  return "unknown";
}

template <typename Scalar>
void Node<Scalar>::accumulate(const Matrix<Scalar>& g) {
  if (!requires_grad) return;
  if (grad.empty()) {
    grad = g;
    return;
  }
  Scalar* dst = grad.data();
  const Scalar* src = g.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Matrix<Scalar> value, bool requires_grad)
    : node_(std::make_shared<Node<Scalar>>()) {
  if (value.empty()) throw ShapeError("tensor extents must be positive");
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Matrix<Scalar>& Tensor<Scalar>::mutable_value() {
  if (!is_leaf()) throw Error("only leaf tensors may be modified in place");
  return node_->value;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (rows() != 1 || cols() != 1) {
    throw ShapeError("item() on non-scalar tensor of shape " + shape_string(value()));
  }
  return node_->value[0];
}

template <typename Scalar>
Matrix<Scalar> Tensor<Scalar>::grad() const {
  if (node_->grad.empty()) return Matrix<Scalar>(rows(), cols());
  return node_->grad;
}

// ---------------------------------------------------------------------------
// Graph

namespace {

template <typename Scalar>
struct ThreadGraphs {
  Graph<Scalar> fallback;
  Graph<Scalar>* active = nullptr;
};

template <typename Scalar>
ThreadGraphs<Scalar>& thread_graphs() {
  thread_local ThreadGraphs<Scalar> graphs;
  return graphs;
}

thread_local bool grad_enabled = true;

}  // namespace

template <typename Scalar>
Graph<Scalar>& Graph<Scalar>::active() {
  auto& g = thread_graphs<Scalar>();
  return g.active ? *g.active : g.fallback;
}

template <typename Scalar>
void Graph<Scalar>::record(std::shared_ptr<Node<Scalar>> node) {
  node->graph = this;
  nodes_.push_back(std::move(node));
}

template <typename Scalar>
void Graph<Scalar>::clear() {
  for (auto& node : nodes_) {
    node->backward = nullptr;
    node->graph = nullptr;
  }
  nodes_.clear();
}

template <typename Scalar>
void Graph<Scalar>::backward(const Tensor<Scalar>& loss) {
  if (!loss) throw Error("backward: undefined loss tensor");
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.value()));
  }
  if (!loss.requires_grad() || loss.node()->graph != this) {
    clear();
    throw Error("backward: loss is detached from the graph");
  }
  loss.node()->accumulate(Matrix<Scalar>(1, 1, Scalar(1)));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<Scalar>& node = **it;
    if (node.backward && !node.grad.empty()) node.backward(node.grad);
  }
  clear();
}

template <typename Scalar>
GraphScope<Scalar>::GraphScope(Graph<Scalar>& graph) {
  auto& g = thread_graphs<Scalar>();
  previous_ = g.active;
  g.active = &graph;
}

template <typename Scalar>
GraphScope<Scalar>::~GraphScope() {
  thread_graphs<Scalar>().active = previous_;
}

NoGradGuard::NoGradGuard() : previous_(grad_enabled) { grad_enabled = false; }
NoGradGuard::~NoGradGuard() { grad_enabled = previous_; }
bool NoGradGuard::enabled() { return grad_enabled; }

OpCounts& OpCounter::current() {
  thread_local OpCounts counts;
  return counts;
}

// ---------------------------------------------------------------------------
// Operation plumbing

namespace {

template <typename Scalar>
using NodePtr = std::shared_ptr<Node<Scalar>>;

template <typename Scalar>
bool tracks(std::initializer_list<const Tensor<Scalar>*> inputs) {
  if (!grad_enabled) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <typename Scalar>
void require_defined(const Tensor<Scalar>& t, const char* op) {
  if (!t) throw Error(std::string(op) + ": undefined input tensor");
}

// Finalizes an op result: finiteness check, instrumentation, and recording.
// `make_backward` is only invoked when the result is tracked; it receives the
// raw output node so closures can read the output value without a cycle.
template <typename Scalar, typename MakeBackward>
Tensor<Scalar> emit(const char* op, Matrix<Scalar> value, bool track,
                    MakeBackward&& make_backward) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite output");
  ++OpCounter::current().ops;
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  if (track) {
    node->requires_grad = true;
    node->backward = make_backward(node.get());
    Graph<Scalar>::active().record(node);
  }
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
void same_shape_or_throw(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.value()) +
                     " vs " + shape_string(b.value()));
  }
}

// c = a * b; each entry accumulated over k in ascending order, so a row of the
// result does not depend on how many rows `a` has.
template <typename Scalar>
void gemm(const Matrix<Scalar>& a, const Matrix<Scalar>& b, Matrix<Scalar>& c) {
  const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    Scalar* out = c.data() + i * m;
    const Scalar* arow = a.data() + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
      const Scalar aik = arow[k];
      const Scalar* brow = b.data() + k * m;
      for (std::size_t j = 0; j < m; ++j) out[j] += aik * brow[j];
    }
  }
}

// c += a * b^T
template <typename Scalar>
void gemm_bt(const Matrix<Scalar>& a, const Matrix<Scalar>& b, Matrix<Scalar>& c) {
  const std::size_t n = a.rows(), inner = a.cols(), m = b.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar* arow = a.data() + i * inner;
    Scalar* out = c.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const Scalar* brow = b.data() + j * inner;
      Scalar acc = 0;
      for (std::size_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
      out[j] += acc;
    }
  }
}

// c += a^T * b
template <typename Scalar>
void gemm_at(const Matrix<Scalar>& a, const Matrix<Scalar>& b, Matrix<Scalar>& c) {
  const std::size_t n = a.rows(), ac = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar* arow = a.data() + i * ac;
    const Scalar* brow = b.data() + i * m;
    for (std::size_t k = 0; k < ac; ++k) {
      const Scalar aik = arow[k];
      Scalar* out = c.data() + k * m;
      for (std::size_t j = 0; j < m; ++j) out[j] += aik * brow[j];
    }
  }
}

template <typename Scalar, typename F>
Matrix<Scalar> map(const Matrix<Scalar>& x, F&& f) {
  Matrix<Scalar> y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Operations

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner extents differ " + shape_string(a.value()) + " * " +
                     shape_string(b.value()));
  }
  Matrix<Scalar> out(a.rows(), b.cols());
  gemm(a.value(), b.value(), out);
  OpCounter::current().multiply_adds += a.rows() * a.cols() * b.cols();
  return emit("matmul", std::move(out), tracks<Scalar>({&a, &b}), [&](Node<Scalar>*) {
    return [an = a.shared(), bn = b.shared()](const Matrix<Scalar>& g) {
      if (an->requires_grad) {
        Matrix<Scalar> da(an->value.rows(), an->value.cols());
        gemm_bt(g, bn->value, da);
        an->accumulate(da);
      }
      if (bn->requires_grad) {
        Matrix<Scalar> db(bn->value.rows(), bn->value.cols());
        gemm_at(an->value, g, db);
        bn->accumulate(db);
      }
    };
  });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  const bool broadcast = b.rows() == 1 && a.rows() != 1 && a.cols() == b.cols();
  if (!broadcast) same_shape_or_throw(a, b, "add");
  Matrix<Scalar> out = a.value();
  const std::size_t cols = a.cols();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] += broadcast ? b.value()[i % cols] : b.value()[i];
  return emit("add", std::move(out), tracks<Scalar>({&a, &b}), [&](Node<Scalar>*) {
    return [an = a.shared(), bn = b.shared(), broadcast](const Matrix<Scalar>& g) {
      an->accumulate(g);
      if (!bn->requires_grad) return;
      if (!broadcast) {
        bn->accumulate(g);
        return;
      }
      Matrix<Scalar> db(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) db[c] += g(r, c);
      bn->accumulate(db);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  same_shape_or_throw(a, b, "sub");
  Matrix<Scalar> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return emit("sub", std::move(out), tracks<Scalar>({&a, &b}), [&](Node<Scalar>*) {
    return [an = a.shared(), bn = b.shared()](const Matrix<Scalar>& g) {
      an->accumulate(g);
      if (bn->requires_grad) bn->accumulate(map(g, [](Scalar v) { return -v; }));
    };
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  same_shape_or_throw(a, b, "mul");
  Matrix<Scalar> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return emit("mul", std::move(out), tracks<Scalar>({&a, &b}), [&](Node<Scalar>*) {
    return [an = a.shared(), bn = b.shared()](const Matrix<Scalar>& g) {
      if (an->requires_grad) {
        Matrix<Scalar> da = g;
        for (std::size_t i = 0; i < da.size(); ++i) da[i] *= bn->value[i];
        an->accumulate(da);
      }
      if (bn->requires_grad) {
        Matrix<Scalar> db = g;
        for (std::size_t i = 0; i < db.size(); ++i) db[i] *= an->value[i];
        bn->accumulate(db);
      }
    };
  });
}

template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& a, Scalar alpha, Scalar beta) {
  require_defined(a, "affine");
  Matrix<Scalar> out = map(a.value(), [=](Scalar v) { return alpha * v + beta; });
  return emit("affine", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>*) {
    return [an = a.shared(), alpha](const Matrix<Scalar>& g) {
      an->accumulate(map(g, [=](Scalar v) { return alpha * v; }));
    };
  });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  require_defined(a, "sigmoid");
  Matrix<Scalar> out = map(a.value(), [](Scalar v) { return stable_sigmoid(v); });
  return emit("sigmoid", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>* self) {
    return [an = a.shared(), self](const Matrix<Scalar>& g) {
      Matrix<Scalar> d = g;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const Scalar y = self->value[i];
        d[i] *= y * (Scalar(1) - y);
      }
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& a) {
  require_defined(a, "tanh");
  Matrix<Scalar> out = map(a.value(), [](Scalar v) { return std::tanh(v); });
  return emit("tanh", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>* self) {
    return [an = a.shared(), self](const Matrix<Scalar>& g) {
      Matrix<Scalar> d = g;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const Scalar y = self->value[i];
        d[i] *= Scalar(1) - y * y;
      }
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  require_defined(a, "relu");
  Matrix<Scalar> out = map(a.value(), [](Scalar v) { return v > 0 ? v : Scalar(0); });
  return emit("relu", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>*) {
    return [an = a.shared()](const Matrix<Scalar>& g) {
      Matrix<Scalar> d = g;
      for (std::size_t i = 0; i < d.size(); ++i)
        if (!(an->value[i] > 0)) d[i] = 0;
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> concat_cols(std::span<const Tensor<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_defined(p, "concat");
    if (p.rows() != rows) throw ShapeError("concat: row counts differ");
    cols += p.cols();
    track = track || (grad_enabled && p.requires_grad());
  }
  Matrix<Scalar> out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r) {
      auto src = p.value().row(r);
      std::copy(src.begin(), src.end(), out.row(r).begin() + offset);
    }
    offset += p.cols();
  }
  return emit("concat", std::move(out), track, [&](Node<Scalar>*) {
    std::vector<NodePtr<Scalar>> nodes;
    for (const auto& p : parts) nodes.push_back(p.shared());
    return [nodes = std::move(nodes)](const Matrix<Scalar>& g) {
      std::size_t off = 0;
      for (const auto& n : nodes) {
        const std::size_t w = n->value.cols();
        if (n->requires_grad) {
          Matrix<Scalar> d(g.rows(), w);
          for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < w; ++c) d(r, c) = g(r, off + c);
          n->accumulate(d);
        }
        off += w;
      }
    };
  });
}

template <typename Scalar>
Tensor<Scalar> concat_rows(std::span<const Tensor<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_defined(p, "concat_rows");
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
    track = track || (grad_enabled && p.requires_grad());
  }
  std::vector<Scalar> values;
  values.reserve(rows * cols);
  for (const auto& p : parts)
    values.insert(values.end(), p.value().values().begin(), p.value().values().end());
  Matrix<Scalar> out(rows, cols, std::move(values));
  return emit("concat_rows", std::move(out), track, [&](Node<Scalar>*) {
    std::vector<NodePtr<Scalar>> nodes;
    for (const auto& p : parts) nodes.push_back(p.shared());
    return [nodes = std::move(nodes)](const Matrix<Scalar>& g) {
      std::size_t off = 0;
      for (const auto& n : nodes) {
        const std::size_t count = n->value.size();
        if (n->requires_grad) {
          std::vector<Scalar> d(g.data() + off, g.data() + off + count);
          n->accumulate(Matrix<Scalar>(n->value.rows(), n->value.cols(), std::move(d)));
        }
        off += count;
      }
    };
  });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& a, std::size_t begin, std::size_t count) {
  require_defined(a, "slice");
  if (count == 0 || begin + count > a.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_string(a.value()));
  }
  const std::size_t cols = a.cols();
  const Scalar* src = a.value().data() + begin * cols;
  Matrix<Scalar> out(count, cols, std::vector<Scalar>(src, src + count * cols));
  return emit("slice", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>*) {
    return [an = a.shared(), begin, count](const Matrix<Scalar>& g) {
      Matrix<Scalar> d(an->value.rows(), an->value.cols());
      std::copy(g.data(), g.data() + g.size(), d.data() + begin * d.cols());
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& a, std::size_t begin, std::size_t count) {
  require_defined(a, "slice");
  if (count == 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_string(a.value()));
  }
  Matrix<Scalar> out(a.rows(), count);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = a.value()(r, begin + c);
  return emit("slice", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>*) {
    return [an = a.shared(), begin, count](const Matrix<Scalar>& g) {
      Matrix<Scalar> d(an->value.rows(), an->value.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) d(r, begin + c) = g(r, c);
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  require_defined(a, "sum");
  Scalar total = 0;
  for (Scalar v : a.value().values()) total += v;
  return emit("sum", Matrix<Scalar>(1, 1, total), tracks<Scalar>({&a}), [&](Node<Scalar>*) {
    return [an = a.shared()](const Matrix<Scalar>& g) {
      an->accumulate(Matrix<Scalar>(an->value.rows(), an->value.cols(), g[0]));
    };
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  require_defined(a, "mean");
  Scalar total = 0;
  for (Scalar v : a.value().values()) total += v;
  const Scalar n = static_cast<Scalar>(a.value().size());
  return emit("mean", Matrix<Scalar>(1, 1, total / n), tracks<Scalar>({&a}),
              [&](Node<Scalar>*) {
                return [an = a.shared(), n](const Matrix<Scalar>& g) {
                  an->accumulate(Matrix<Scalar>(an->value.rows(), an->value.cols(), g[0] / n));
                };
              });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a) {
  require_defined(a, "square");
  Matrix<Scalar> out = map(a.value(), [](Scalar v) { return v * v; });
  return emit("square", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>*) {
    return [an = a.shared()](const Matrix<Scalar>& g) {
      Matrix<Scalar> d = g;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= Scalar(2) * an->value[i];
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
  require_defined(a, "log");
  Matrix<Scalar> out = map(a.value(), [](Scalar v) { return std::log(v); });
  return emit("log", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>*) {
    return [an = a.shared()](const Matrix<Scalar>& g) {
      Matrix<Scalar> d = g;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] /= an->value[i];
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& a) {
  require_defined(a, "softmax_rows");
  Matrix<Scalar> out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto x = a.value().row(r);
    auto y = out.row(r);
    const Scalar top = *std::max_element(x.begin(), x.end());
    Scalar total = 0;
    for (std::size_t c = 0; c < x.size(); ++c) {
      y[c] = std::exp(x[c] - top);
      total += y[c];
    }
    for (auto& v : y) v /= total;
  }
  return emit("softmax_rows", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>* self) {
    return [an = a.shared(), self](const Matrix<Scalar>& g) {
      const Matrix<Scalar>& p = self->value;
      Matrix<Scalar> d(p.rows(), p.cols());
      for (std::size_t r = 0; r < p.rows(); ++r) {
        Scalar dot = 0;
        for (std::size_t c = 0; c < p.cols(); ++c) dot += g(r, c) * p(r, c);
        for (std::size_t c = 0; c < p.cols(); ++c) d(r, c) = p(r, c) * (g(r, c) - dot);
      }
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> scale_rows(const Tensor<Scalar>& a, std::span<const Scalar> weights) {
  require_defined(a, "scale_rows");
  if (weights.size() != a.rows()) {
    throw ShapeError("scale_rows: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(a.rows()) + " rows");
  }
  Matrix<Scalar> out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (auto& v : out.row(r)) v *= weights[r];
  std::vector<Scalar> w(weights.begin(), weights.end());
  return emit("scale_rows", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>*) {
    return [an = a.shared(), w = std::move(w)](const Matrix<Scalar>& g) {
      Matrix<Scalar> d = g;
      for (std::size_t r = 0; r < d.rows(); ++r)
        for (auto& v : d.row(r)) v *= w[r];
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> gather_cols(const Tensor<Scalar>& a, std::span<const std::uint32_t> columns) {
  require_defined(a, "gather_cols");
  if (columns.size() != a.rows()) throw ShapeError("gather_cols: one column per row required");
  Matrix<Scalar> out(a.rows(), 1);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    if (columns[r] >= a.cols()) {
      throw ShapeError("gather_cols: column " + std::to_string(columns[r]) +
                       " out of range for " + std::to_string(a.cols()) + " columns");
    }
    out[r] = a.value()(r, columns[r]);
  }
  std::vector<std::uint32_t> cols(columns.begin(), columns.end());
  return emit("gather_cols", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>*) {
    return [an = a.shared(), cols = std::move(cols)](const Matrix<Scalar>& g) {
      Matrix<Scalar> d(an->value.rows(), an->value.cols());
      for (std::size_t r = 0; r < cols.size(); ++r) d(r, cols[r]) = g[r];
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> log_clamped(const Tensor<Scalar>& a, Scalar floor, std::size_t* clamped) {
  require_defined(a, "log_clamped");
  std::size_t count = 0;
  Matrix<Scalar> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Scalar v = a.value()[i];
    if (v < floor) ++count;
    out[i] = std::log(std::max(v, floor));
  }
  if (clamped) *clamped += count;
  return emit("log", std::move(out), tracks<Scalar>({&a}), [&](Node<Scalar>*) {
    return [an = a.shared(), floor](const Matrix<Scalar>& g) {
      Matrix<Scalar> d = g;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const Scalar v = an->value[i];
        d[i] = v < floor ? Scalar(0) : d[i] / v;
      }
      an->accumulate(d);
    };
  });
}

template <typename Scalar>
Tensor<Scalar> detach(const Tensor<Scalar>& a) {
  require_defined(a, "detach");
  return Tensor<Scalar>(a.value(), false);
}

template <typename Scalar>
Tensor<Scalar> batch_norm_train(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                                const Tensor<Scalar>& beta,
                                std::span<const Scalar> row_mask, Scalar eps,
                                Matrix<Scalar>* batch_mean, Matrix<Scalar>* batch_var) {
  require_defined(x, "batch_norm");
  const std::size_t n = x.rows(), h = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != h || beta.rows() != 1 || beta.cols() != h) {
    throw ShapeError("batch_norm: gamma/beta must be 1x" + std::to_string(h));
  }
  if (!row_mask.empty() && row_mask.size() != n) throw ShapeError("batch_norm: mask size");
  Scalar count = 0;
  for (std::size_t r = 0; r < n; ++r) count += row_mask.empty() ? Scalar(1) : row_mask[r];
  if (count < Scalar(2)) {
    throw ValidationError("batch_norm: training mode needs at least 2 frames in the batch");
  }
  auto weight = [&](std::size_t r) { return row_mask.empty() ? Scalar(1) : row_mask[r]; };

  Matrix<Scalar> mu(1, h), var(1, h);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < h; ++c) mu[c] += weight(r) * x.value()(r, c);
  for (auto& v : mu.values()) v /= count;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < h; ++c) {
      const Scalar d = x.value()(r, c) - mu[c];
      var[c] += weight(r) * d * d;
    }
  for (auto& v : var.values()) v /= count;

  Matrix<Scalar> inv_std(1, h);
  for (std::size_t c = 0; c < h; ++c) inv_std[c] = Scalar(1) / std::sqrt(var[c] + eps);
  Matrix<Scalar> xhat(n, h), out(n, h);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < h; ++c) {
      xhat(r, c) = (x.value()(r, c) - mu[c]) * inv_std[c];
      out(r, c) = xhat(r, c) * gamma.value()[c] + beta.value()[c];
    }
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;

  std::vector<Scalar> mask(row_mask.begin(), row_mask.end());
  return emit("batch_norm", std::move(out), tracks<Scalar>({&x, &gamma, &beta}),
              [&](Node<Scalar>*) {
                return [xn = x.shared(), gn = gamma.shared(), bn = beta.shared(),
                        xhat = std::move(xhat), inv_std = std::move(inv_std),
                        mask = std::move(mask), count](const Matrix<Scalar>& g) {
                  const std::size_t rows = g.rows(), cols = g.cols();
                  auto w = [&](std::size_t r) { return mask.empty() ? Scalar(1) : mask[r]; };
                  if (gn->requires_grad || bn->requires_grad) {
                    Matrix<Scalar> dg(1, cols), db(1, cols);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t c = 0; c < cols; ++c) {
                        dg[c] += g(r, c) * xhat(r, c);
                        db[c] += g(r, c);
                      }
                    gn->accumulate(dg);
                    bn->accumulate(db);
                  }
                  if (!xn->requires_grad) return;
                  // dxhat over all rows; statistics only see weighted rows.
                  Matrix<Scalar> sum_dxhat(1, cols), sum_dxhat_xhat(1, cols);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) {
                      const Scalar dxh = g(r, c) * gn->value[c];
                      sum_dxhat[c] += dxh;
                      sum_dxhat_xhat[c] += dxh * xhat(r, c);
                    }
                  Matrix<Scalar> dx(rows, cols);
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) {
                      const Scalar dxh = g(r, c) * gn->value[c];
                      Scalar v = dxh;
                      if (w(r) != 0) {
                        v -= w(r) * (sum_dxhat[c] + xhat(r, c) * sum_dxhat_xhat[c]) / count;
                      }
                      dx(r, c) = v * inv_std[c];
                    }
                  xn->accumulate(dx);
                };
              });
}

template <typename Scalar>
Tensor<Scalar> batch_norm_eval(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                               const Tensor<Scalar>& beta, const Matrix<Scalar>& mean,
                               const Matrix<Scalar>& var, Scalar eps) {
  require_defined(x, "batch_norm");
  const std::size_t h = x.cols();
  if (gamma.cols() != h || beta.cols() != h || mean.size() != h || var.size() != h) {
    throw ShapeError("batch_norm: statistics must have " + std::to_string(h) + " entries");
  }
  Matrix<Scalar> scale(1, h);
  for (std::size_t c = 0; c < h; ++c) scale[c] = Scalar(1) / std::sqrt(var[c] + eps);
  Matrix<Scalar> xhat(x.rows(), h), out(x.rows(), h);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < h; ++c) {
      xhat(r, c) = (x.value()(r, c) - mean[c]) * scale[c];
      out(r, c) = xhat(r, c) * gamma.value()[c] + beta.value()[c];
    }
  return emit("batch_norm", std::move(out), tracks<Scalar>({&x, &gamma, &beta}),
              [&](Node<Scalar>*) {
                return [xn = x.shared(), gn = gamma.shared(), bn = beta.shared(),
                        xhat = std::move(xhat), scale](const Matrix<Scalar>& g) {
                  Matrix<Scalar> dg(1, g.cols()), db(1, g.cols()), dx(g.rows(), g.cols());
                  for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) {
                      dg[c] += g(r, c) * xhat(r, c);
                      db[c] += g(r, c);
                      dx(r, c) = g(r, c) * gn->value[c] * scale[c];
                    }
                  gn->accumulate(dg);
                  bn->accumulate(db);
                  xn->accumulate(dx);
                };
              });
}

template <typename Scalar>
Tensor<Scalar> apply(OpKind kind, std::span<const Tensor<Scalar>> inputs) {
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::kMatmul: arity(2); return matmul(inputs[0], inputs[1]);
    case OpKind::kAdd: arity(2); return add(inputs[0], inputs[1]);
    case OpKind::kSub: arity(2); return sub(inputs[0], inputs[1]);
    case OpKind::kMul: arity(2); return mul(inputs[0], inputs[1]);
    case OpKind::kSigmoid: arity(1); return sigmoid(inputs[0]);
    case OpKind::kTanh: arity(1); return tanh(inputs[0]);
    case OpKind::kRelu: arity(1); return relu(inputs[0]);
    case OpKind::kConcat: return concat_cols(inputs);
    case OpKind::kSum: arity(1); return sum(inputs[0]);
    case OpKind::kMean: arity(1); return mean(inputs[0]);
    case OpKind::kSquare: arity(1); return square(inputs[0]);
    case OpKind::kLog: arity(1); return log(inputs[0]);
    case OpKind::kSoftmaxRows: arity(1); return softmax_rows(inputs[0]);
    case OpKind::kSlice: break;
  }
  throw ValidationError("apply: slice needs explicit bounds; use slice_rows/slice_cols");
}

#define TWINSEQ_INSTANTIATE_TENSOR(S)                                                       \
  template struct Node<S>;                                                                  \
  template class Tensor<S>;                                                                 \
  template class Graph<S>;                                                                  \
  template class GraphScope<S>;                                                             \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                            \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> affine(const Tensor<S>&, S, S);                                        \
  template Tensor<S> sigmoid(const Tensor<S>&);                                             \
  template Tensor<S> tanh(const Tensor<S>&);                                                \
  template Tensor<S> relu(const Tensor<S>&);                                                \
  template Tensor<S> concat_cols(std::span<const Tensor<S>>);                               \
  template Tensor<S> concat_rows(std::span<const Tensor<S>>);                               \
  template Tensor<S> slice_rows(const Tensor<S>&, std::size_t, std::size_t);                \
  template Tensor<S> slice_cols(const Tensor<S>&, std::size_t, std::size_t);                \
  template Tensor<S> sum(const Tensor<S>&);                                                 \
  template Tensor<S> mean(const Tensor<S>&);                                                \
  template Tensor<S> square(const Tensor<S>&);                                              \
  template Tensor<S> log(const Tensor<S>&);                                                 \
  template Tensor<S> softmax_rows(const Tensor<S>&);                                        \
  template Tensor<S> scale_rows(const Tensor<S>&, std::span<const S>);                      \
  template Tensor<S> gather_cols(const Tensor<S>&, std::span<const std::uint32_t>);         \
  template Tensor<S> log_clamped(const Tensor<S>&, S, std::size_t*);                        \
  template Tensor<S> detach(const Tensor<S>&);                                              \
  template Tensor<S> batch_norm_train(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, \
                                      std::span<const S>, S, Matrix<S>*, Matrix<S>*);       \
  template Tensor<S> batch_norm_eval(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,  \
                                     const Matrix<S>&, const Matrix<S>&, S);                \
  template Tensor<S> apply(OpKind, std::span<const Tensor<S>>);

TWINSEQ_INSTANTIATE_TENSOR(float)
TWINSEQ_INSTANTIATE_TENSOR(double)

}  // namespace twinseq
