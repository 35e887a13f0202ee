#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "twinseq/loss/loss.hpp"
#include "twinseq/train/init.hpp"

using namespace twinseq;
using testutil::random_matrix;

namespace {

StateTrajectory<double> trajectory(const Matrix<double>& states, bool grad = false) {
  StateTrajectory<double> t;
  t.stacked = Tensor<double>(states, grad);
  for (std::size_t r = 0; r < states.rows(); ++r) t.hidden.push_back(slice_rows(t.stacked, r, 1));
  return t;
}

double omega(const Matrix<double>& a, const Matrix<double>& b) {
  return twin_penalty<double>(trajectory(a), trajectory(b)).item();
}

}  // namespace

TEST_CASE("nll closed forms") {
  const std::uint32_t labels[] = {0, 2, 1};
  const Tensor<double> onehot(Matrix<double>{{1, 0, 0}, {0, 0, 1}, {0, 1, 0}});
  CHECK(nll<double>(onehot, labels).value.item() == 0.0);

  const Tensor<double> uniform(Matrix<double>(3, 3, 1.0 / 3));
  CHECK(nll<double>(uniform, labels).value.item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(std::abs(nll<double>(uniform, labels).value.item() - 1.0986) < 1e-4);

  const Tensor<double> tiny(Matrix<double>{{1e-20, 1 - 1e-20}});
  const std::uint32_t target[] = {0};
  const auto term = nll<double>(tiny, target);
  CHECK(term.value.item() == doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
  CHECK(term.clamped == 1);
}

TEST_CASE("nll errors") {
  const Tensor<double> p(Matrix<double>(2, 3, 1.0 / 3));
  const std::uint32_t short_labels[] = {0};
  CHECK_THROWS_AS(nll<double>(p, short_labels), ShapeError);
  const std::uint32_t bad[] = {0, 3};
  CHECK_THROWS_AS(nll<double>(p, bad), ValidationError);
}

TEST_CASE("twin penalty closed forms") {
  CHECK(omega(Matrix<double>{{1, 0}, {0, 1}}, Matrix<double>{{0, 0}, {0, 3}}) ==
        doctest::Approx(2.5).epsilon(1e-15));
  const Matrix<double> a{{1, 2}, {3, 4}};
  CHECK(omega(a, a) == 0.0);
  CHECK_THROWS_AS(omega(Matrix<double>(3, 4), Matrix<double>(3, 5)), ShapeError);
  CHECK_THROWS_AS(omega(Matrix<double>(3, 4), Matrix<double>(2, 4)), ShapeError);
}

TEST_CASE("twin penalty properties") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_matrix(7, 5, rng), b = random_matrix(7, 5, rng);
    const double w = omega(a, b);
    CHECK(w > 0);
    CHECK(w == doctest::Approx(omega(b, a)).epsilon(1e-14));
    Matrix<double> a3 = a, b3 = b;
    for (auto& v : a3.values()) v *= 3;
    for (auto& v : b3.values()) v *= 3;
    CHECK(omega(a3, b3) == doctest::Approx(9 * w).epsilon(1e-12));
    // direct oracle
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    CHECK(w == doctest::Approx(s / 7).epsilon(1e-12));
  }
}

TEST_CASE("twin penalty gradient is (2/N)(h_fwd - h_bwd)") {
  std::mt19937_64 rng(3);
  const auto a = random_matrix(6, 4, rng), b = random_matrix(6, 4, rng);
  auto fwd = trajectory(a, true);
  auto bwd = trajectory(b, true);
  {
    Graph<double> g;
    GraphScope<double> scope(g);
    g.backward(twin_penalty<double>(fwd, bwd));
  }
  const auto grad = fwd.stacked.grad();
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(grad[i] == doctest::Approx(2.0 / 6 * (a[i] - b[i])).epsilon(1e-12));
  CHECK(bwd.stacked.grad()[0] == doctest::Approx(-grad[0]).epsilon(1e-12));

  std::vector<NamedTensor> params{{"fwd", fwd.stacked}, {"bwd", bwd.stacked}};
  CHECK(gradcheck([&] { return twin_penalty<double>(fwd, bwd); }, params, 1e-4).passed);

  // stop-gradient variant leaves the backward trajectory untouched
  fwd.stacked.zero_grad();
  bwd.stacked.zero_grad();
  {
    Graph<double> g;
    GraphScope<double> scope(g);
    g.backward(twin_penalty<double>(fwd, bwd, true));
  }
  CHECK(fwd.stacked.grad()[0] == doctest::Approx(2.0 / 6 * (a[0] - b[0])));
  CHECK_FALSE(bwd.stacked.has_grad());
}

TEST_CASE("multi-layer penalty is the arithmetic mean") {
  auto ml = [](std::vector<double> v) {
    std::vector<Tensor<double>> t;
    for (double x : v) t.push_back(Tensor<double>::scalar(x));
    return multi_layer_penalty<double>(t).item();
  };
  CHECK(ml({2.0, 4.0}) == 3.0);
  CHECK(ml({1.7}) == 1.7);
  CHECK(ml({0, 0, 0}) == 0.0);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(0, 10);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(1 + trial % 6);
    double s = 0;
    for (auto& x : v) s += (x = d(rng));
    CHECK(std::abs(ml(v) - s / v.size()) <= 1e-12);
  }
  CHECK_THROWS_AS(multi_layer_penalty<double>(std::span<const Tensor<double>>{}), ValidationError);
}

TEST_CASE("composite loss") {
  auto s = [](double v) { return Tensor<double>::scalar(v); };
  auto l = composite_loss<double>(s(1.0), s(1.2), s(2.5), 0.6);
  CHECK(l.total == doctest::Approx(3.7).epsilon(1e-15));
  CHECK(l.nll_forward == 1.0);
  CHECK(l.nll_backward == 1.2);
  CHECK(l.omega == 2.5);
  CHECK(composite_loss<double>(s(1.0), s(1.2), s(2.5), 0.0).total == doctest::Approx(2.2));
  CHECK(composite_loss<double>(s(0), s(0), s(0), 0.6).total == 0.0);
  CHECK(composite_loss<double>(s(0.7), Tensor<double>(), Tensor<double>(), 0.6).total == 0.7);
  CHECK_THROWS_AS(composite_loss<double>(s(1), s(1), s(1), -0.1), ValidationError);
  // monotone in lambda and omega
  double prev = -1;
  for (double lambda : {0.0, 0.1, 0.3, 0.6, 1.0}) {
    const double t = composite_loss<double>(s(1), s(1), s(2), lambda).total;
    CHECK(t >= prev);
    prev = t;
  }
  CHECK(composite_loss<double>(s(1), s(1), s(3), 0.6).total >
        composite_loss<double>(s(1), s(1), s(2), 0.6).total);
}

TEST_CASE("batched composite equals the mean of per-utterance composites") {
  std::mt19937_64 rng(6);
  StackConfig c{2, {5, 4}, CellVariant::kGru, StackMode::kTwin, 0.0, 4, false};
  auto net = init_network<double>(c, 9);
  const std::size_t lengths[] = {5, 3, 4};
  const std::size_t B = 3, T = 5;
  std::vector<Matrix<double>> xs;
  std::vector<LabelSequence> ys;
  SequenceLayout layout{T, B, std::vector<std::uint8_t>(T * B, 0)};
  Matrix<double> x(T * B, 2);
  LabelSequence y(T * B, 0);
  for (std::size_t b = 0; b < B; ++b) {
    xs.push_back(random_matrix(lengths[b], 2, rng));
    ys.emplace_back();
    for (std::size_t t = 0; t < lengths[b]; ++t) {
      ys[b].push_back(static_cast<std::uint32_t>(rng() % 4));
      layout.valid[t * B + b] = 1;
      y[t * B + b] = ys[b][t];
      std::copy(xs[b].row(t).begin(), xs[b].row(t).end(), x.row(t * B + b).begin());
    }
  }
  auto composite = [&](const StackOutput<double>& out, std::span<const std::uint32_t> labels,
                       std::span<const double> w) {
    std::vector<Tensor<double>> per_layer;
    for (std::size_t l = 0; l < out.forward.size(); ++l)
      per_layer.push_back(twin_penalty<double>(out.forward[l], out.backward[l], w));
    return composite_loss<double>(nll<double>(out.posteriors, labels, w).value,
                                  nll<double>(out.backward_posteriors, labels, w).value,
                                  multi_layer_penalty<double>(per_layer), 0.6);
  };
  NoGradGuard guard;
  const auto w = frame_weights<double>(layout);
  const double batched = composite(run_stack(net, Tensor<double>(x), layout), y, w).total;

  std::vector<LossBreakdown<double>> singles;
  for (std::size_t b = 0; b < B; ++b) {
    const std::vector<double> wu(lengths[b], 1.0 / lengths[b]);
    singles.push_back(composite(
        run_stack(net, Tensor<double>(xs[b]), SequenceLayout::single(lengths[b])), ys[b], wu));
  }
  CHECK(batched == doctest::Approx(batch_mean_total<double>(singles)).epsilon(1e-12));

  // frame weights: 1/(N_b * B) on valid frames, zero on padding
  CHECK(w[0] == doctest::Approx(1.0 / 15));
  CHECK(w[4 * B + 1] == 0.0);
  CHECK(w[1] == doctest::Approx(1.0 / 9));
}
