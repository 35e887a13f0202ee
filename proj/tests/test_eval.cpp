#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "twinseq/data/synth.hpp"
#include "twinseq/eval/eval.hpp"
#include "twinseq/train/init.hpp"

using namespace twinseq;

namespace {

// Random weights plus random BN running statistics, so evaluation mode is
// not a no-op normalization.
template <typename Scalar>
Network<Scalar> random_net(StackMode mode, CellVariant variant, std::size_t input,
                           std::uint64_t seed, std::vector<std::size_t> hidden = {7, 5}) {
  StackConfig c;
  c.input_size = input;
  c.hidden_sizes = std::move(hidden);
  c.variant = variant;
  c.mode = mode;
  c.num_classes = 6;
  Network<Scalar> net = init_network<Scalar>(c, seed);
  std::mt19937_64 rng(seed + 100);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto* layers : {&net.forward_layers, &net.backward_layers})
    for (auto& layer : *layers)
      for (auto& gate : layer.gates)
        if (gate.bn) {
          for (auto& v : gate.bn->running_mean.values()) v = static_cast<Scalar>(u(rng) - 1);
          for (auto& v : gate.bn->running_var.values()) v = static_cast<Scalar>(u(rng));
        }
  return net;
}

Matrix<double> random_frames(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Matrix<double> m(n, d);
  for (auto& v : m.values()) v = g(rng);
  return m;
}

template <typename Scalar>
std::vector<StreamPrediction<Scalar>> stream_all(const Network<Scalar>& net,
                                                 const Matrix<Scalar>& frames, std::size_t past,
                                                 std::size_t future, std::size_t* violations) {
  StreamingSession<Scalar> s(net, frames.cols(), past, future);
  std::vector<StreamPrediction<Scalar>> out;
  for (std::size_t t = 0; t < frames.rows(); ++t) {
    const auto row = frames.row(t);
    if (auto p = s.push(std::span<const Scalar>(row.data(), row.size()))) out.push_back(*p);
  }
  for (auto& p : s.finalize()) out.push_back(p);
  if (violations) *violations = s.latency_violations();
  return out;
}

}  // namespace

TEST_CASE("argmax and frame error rate") {
  const Matrix<double> p{{0.2, 0.5, 0.3}, {0.4, 0.4, 0.2}, {0.1, 0.1, 0.8}, {0.5, 0.5, 0}};
  CHECK(argmax_rows(p) == std::vector<std::uint32_t>{1, 0, 2, 0});  // ties -> lowest id
  const std::vector<std::uint32_t> labels{1, 0, 2, 1};
  CHECK(frame_error_rate(p, labels) == 0.25);
  const std::vector<std::uint32_t> correct{1, 0, 2, 0};
  CHECK(frame_error_rate(p, correct) == 0.0);
  const std::vector<std::uint8_t> mask{1, 1, 1, 0};
  CHECK(frame_error_rate(p, labels, mask) == 0.0);
  const std::vector<std::uint8_t> none{0, 0, 0, 0};
  CHECK_THROWS_AS(frame_error_rate(p, labels, none), ValidationError);
  const std::vector<std::uint32_t> short_labels{1, 0};
  CHECK_THROWS_AS(frame_error_rate(p, short_labels), ShapeError);
}

TEST_CASE("prior normalization") {
  const Matrix<double> p{{0.2, 0.5, 0.3}, {0.6, 0.3, 0.1}};
  const std::vector<double> uniform(3, 1.0 / 3);
  const auto s = posterior_to_likelihood(p, uniform);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < 3; ++k)
      CHECK(s(r, k) == doctest::Approx(std::log(p(r, k)) + std::log(3.0)).epsilon(1e-12));
  CHECK(argmax_rows(s) == argmax_rows(p));

  const std::vector<double> skewed{0.8, 0.1, 0.1};
  const auto t = posterior_to_likelihood(p, skewed);
  // class 0 loses ground relative to the uniform case
  CHECK(t(1, 0) - t(1, 1) < s(1, 0) - s(1, 1));
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t k = 0; k < 3; ++k)
      CHECK(std::abs(std::exp(t(r, k)) * skewed[k] - p(r, k)) <= 1e-9);

  CHECK_THROWS_AS(posterior_to_likelihood(p, std::vector<double>{0.5, 0.5, 0.0}), ValidationError);
  CHECK_THROWS_AS(posterior_to_likelihood(p, std::vector<double>{0.5, 0.5}), ShapeError);
}

TEST_CASE("strip_backward keeps the forward branch bit for bit") {
  std::mt19937_64 rng(21);
  for (auto v : {CellVariant::kLstm, CellVariant::kGru, CellVariant::kMGru, CellVariant::kLiGru}) {
    auto twin = random_net<double>(StackMode::kTwin, v, 4, 3);
    auto stripped = strip_backward(twin);
    CHECK(stripped.config.mode == StackMode::kForwardOnly);
    CHECK(stripped.backward_layers.empty());
    CHECK_FALSE(stripped.backward_output.has_value());
    for (const auto& p : stripped.parameters()) {
      CHECK_FALSE(p.backward_branch);
      CHECK(p.name.rfind("bwd", 0) != 0);
    }
    auto uni = random_net<double>(StackMode::kForwardOnly, v, 4, 3);
    CHECK(stripped.parameter_count() == uni.parameter_count());
    CHECK(twin.parameter_count() > uni.parameter_count());

    for (int i = 0; i < 5; ++i) {
      const auto x = random_frames(3 + i * 4, 4, rng);
      const auto out =
          run_stack(twin, Tensor<double>(x), SequenceLayout::single(x.rows()), RunOptions<double>{});
      CHECK(out.posteriors.value() == predict_offline(stripped, x));
    }
    // the copy is independent of the source
    stripped.output.W.mutable_value()(0, 0) += 1;
    CHECK(stripped.output.W.value()(0, 0) != twin.output.W.value()(0, 0));
  }
  auto uni = random_net<double>(StackMode::kForwardOnly, CellVariant::kGru, 4, 3);
  CHECK_THROWS_AS(strip_backward(uni), ValidationError);
  auto bi = random_net<double>(StackMode::kBidirectional, CellVariant::kGru, 4, 3);
  CHECK_THROWS_AS(strip_backward(bi), ValidationError);
}

TEST_CASE("streaming emission schedule") {
  std::mt19937_64 rng(2);
  const auto x = random_frames(12, 3, rng);
  auto net = random_net<double>(StackMode::kForwardOnly, CellVariant::kLiGru, 3 * 6, 1);
  StreamingSession<double> s(net, 3, 0, 5);
  for (std::size_t t = 0; t < 5; ++t) {
    const auto row = x.row(t);
    CHECK_FALSE(s.push(std::span<const double>(row.data(), 3)).has_value());
  }
  CHECK(s.emitted() == 0);
  const auto row = x.row(5);
  const auto p = s.push(std::span<const double>(row.data(), 3));
  REQUIRE(p.has_value());
  CHECK(p->frame == 0);
  CHECK(s.emitted() == 1);
  CHECK(s.consumed() == 6);
  const auto rest = s.finalize();
  CHECK(rest.size() == 5);
  CHECK(s.latency_violations() == 0);
  CHECK_THROWS(s.push(std::span<const double>(row.data(), 3)));
  CHECK_THROWS(s.finalize());

  // k = 0: one prediction per frame, immediately
  auto net0 = random_net<double>(StackMode::kForwardOnly, CellVariant::kLiGru, 3, 1);
  StreamingSession<double> s0(net0, 3, 0, 0);
  for (std::size_t t = 0; t < 12; ++t) {
    const auto r = x.row(t);
    const auto q = s0.push(std::span<const double>(r.data(), 3));
    REQUIRE(q.has_value());
    CHECK(q->frame == t);
  }
  CHECK(s0.finalize().empty());
}

TEST_CASE("streaming equals offline exactly in double precision") {
  std::mt19937_64 rng(8);
  for (std::size_t past : {0, 2})
    for (std::size_t k : {0, 1, 5, 15}) {
      auto net = random_net<double>(StackMode::kForwardOnly, CellVariant::kLstm, 2 * (past + k + 1),
                                    k + 10 * past);
      for (std::size_t n : {1, 4, 23}) {
        const auto x = random_frames(n, 2, rng);
        std::size_t violations = 1;
        const auto preds = stream_all(net, x, past, k, &violations);
        CHECK(violations == 0);
        const auto offline = predict_offline(net, context_window(x, past, k));
        REQUIRE(preds.size() == n);
        for (std::size_t t = 0; t < n; ++t) {
          CHECK(preds[t].frame == t);
          const auto row = offline.row(t);
          CHECK(std::equal(row.begin(), row.end(), preds[t].posteriors.values().begin()));
          CHECK(preds[t].label == argmax_rows(offline)[t]);
        }
      }
    }
}

TEST_CASE("streaming in single precision stays within 1e-6") {
  std::mt19937_64 rng(9);
  auto net = random_net<float>(StackMode::kForwardOnly, CellVariant::kGru, 2 * 4, 5);
  const auto xd = random_frames(30, 2, rng);
  Matrix<float> x(30, 2);
  for (std::size_t i = 0; i < xd.values().size(); ++i) x.values()[i] = static_cast<float>(xd.values()[i]);
  const auto preds = stream_all(net, x, 0, 3, nullptr);
  const auto offline = predict_offline(net, context_window(x, 0, 3));
  for (std::size_t t = 0; t < 30; ++t)
    for (std::size_t c = 0; c < 6; ++c)
      CHECK(std::abs(preds[t].posteriors(0, c) - offline(t, c)) <= 1e-6);
}

TEST_CASE("streaming session preconditions") {
  auto twin = random_net<double>(StackMode::kTwin, CellVariant::kGru, 3, 1);
  CHECK_THROWS_AS(StreamingSession<double>(twin, 3, 0, 0), ValidationError);
  auto net = random_net<double>(StackMode::kForwardOnly, CellVariant::kGru, 6, 1);
  CHECK_THROWS_AS(StreamingSession<double>(net, 3, 0, 0), ShapeError);
  StreamingSession<double> s(net, 3, 0, 1);
  const std::vector<double> bad(4, 0.0);
  CHECK_THROWS_AS(s.push(bad), ShapeError);
}

TEST_CASE("stripped twin costs the same per frame as a unidirectional model") {
  std::mt19937_64 rng(4);
  const auto x = random_frames(40, 3, rng);
  const auto frames = context_window(x, 0, 2);
  auto count = [&](const Network<double>& net) {
    OpCounter::reset();
    stream_all(net, x, 0, 2, nullptr);
    return OpCounter::current();
  };
  for (auto v : {CellVariant::kLstm, CellVariant::kLiGru}) {
    auto twin = random_net<double>(StackMode::kTwin, v, 9, 2);
    auto uni = random_net<double>(StackMode::kForwardOnly, v, 9, 5);
    const auto stripped = strip_backward(twin);
    const auto a = count(stripped), b = count(uni);
    CHECK(a.ops > 0);
    CHECK(a == b);

    OpCounter::reset();
    const auto out = run_stack(twin, Tensor<double>(frames), SequenceLayout::single(40),
                               RunOptions<double>{});
    CHECK(OpCounter::current().multiply_adds > b.multiply_adds);
  }
}

TEST_CASE("evaluate matches per-utterance offline FER") {
  SynthSpec spec;
  spec.feature_dim = 3;
  spec.min_length = 5;
  spec.max_length = 17;
  spec.train_utterances = 11;
  spec.dev_utterances = 1;
  spec.test_utterances = 1;
  const auto corpus = generate_synthetic_corpus(spec).corpus;
  const auto utts = corpus.split(Split::kTrain);

  StackConfig c;
  c.input_size = 3;
  c.hidden_sizes = {6};
  c.mode = StackMode::kTwin;
  c.variant = CellVariant::kGru;
  c.num_classes = corpus.num_classes;
  auto net = init_network<double>(c, 3);

  std::size_t wrong = 0, total = 0;
  for (const auto& u : utts) {
    auto stripped = strip_backward(net);
    const auto pred = argmax_rows(predict_offline(stripped, u.matrix<double>()));
    for (std::size_t t = 0; t < u.length(); ++t) wrong += pred[t] != u.labels[t];
    total += u.length();
  }
  for (std::size_t bs : {1, 4, 16}) {
    const auto summary = evaluate(net, utts, bs);
    CHECK(summary.frames == total);
    CHECK(summary.fer == doctest::Approx(static_cast<double>(wrong) / total).epsilon(1e-12));
    CHECK(summary.omega >= 0);
  }
  auto uni = strip_backward(net);
  CHECK(std::isnan(evaluate(uni, utts).omega));
  CHECK_THROWS_AS(evaluate(uni, std::vector<FeatureSequence>{}), ValidationError);
}

TEST_CASE("likelihood file format") {
  std::ostringstream os;
  write_likelihoods(os, "utt7", Matrix<double>{{-1.25, 0.5}, {1.0 / 3, 2}});
  CHECK(os.str() == "utt7 2 2\n-1.25\t0.5\n0.333333333\t2\n");
}
