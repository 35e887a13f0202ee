#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "twinseq/data/corpus.hpp"
#include "twinseq/data/synth.hpp"

using namespace twinseq;
namespace fs = std::filesystem;

namespace {

SynthSpec small_spec() {
  SynthSpec s;
  s.train_utterances = 20;
  s.dev_utterances = 5;
  s.test_utterances = 5;
  return s;
}

FeatureSequence utt(const std::string& id, std::size_t n, std::size_t dim) {
  FeatureSequence u;
  u.id = id;
  u.dim = dim;
  for (std::size_t i = 0; i < n * dim; ++i) u.frames.push_back(static_cast<float>(i));
  u.labels.assign(n, 0);
  return u;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("twinseq_test_data_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("synthetic corpus is deterministic per seed") {
  const auto a = generate_synthetic_corpus(small_spec());
  const auto b = generate_synthetic_corpus(small_spec());
  REQUIRE(a.corpus.utterances.size() == 30);
  CHECK(a.corpus.utterances == b.corpus.utterances);
  CHECK(a.corpus.priors == b.corpus.priors);
  CHECK(a.latents == b.latents);
  auto other = small_spec();
  other.seed = 2;
  CHECK_FALSE(generate_synthetic_corpus(other).corpus.utterances == a.corpus.utterances);
}

TEST_CASE("synthetic spec validation") {
  auto s = small_spec();
  s.mix = {0.5, 0.5, 0.0};
  CHECK_THROWS_AS(generate_synthetic_corpus(s), ValidationError);
  s = small_spec();
  s.mix = {0.3, 0.3, 0.3};
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = small_spec();
  s.classes = 60;  // not a multiple of 8
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = small_spec();
  s.min_length = 10;
  s.max_length = 5;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = small_spec();
  s.noise = -1;
  CHECK_THROWS_AS(s.validate(), ValidationError);
}

TEST_CASE("synthetic frames follow the mixing rule") {
  auto s = small_spec();
  s.noise = 0;
  const auto out = generate_synthetic_corpus(s);
  const auto& u = out.corpus.utterances[3];
  const auto& lat = out.latents[3];
  const std::size_t n = u.length();
  for (std::size_t t = 0; t < n; ++t) {
    const auto p = lat[t == 0 ? 0 : t - 1], c = lat[t], nx = lat[t + 1 < n ? t + 1 : n - 1];
    for (std::size_t j = 0; j < s.feature_dim; ++j) {
      const double want = 0.25 * out.embeddings(p, j) + 0.5 * out.embeddings(c, j) +
                          0.25 * out.embeddings(nx, j);
      CHECK(u.frames[t * s.feature_dim + j] == static_cast<float>(want));
    }
  }
  // segments respect the length range and change symbol
  std::size_t run = 1;
  for (std::size_t t = 1; t < n; ++t) {
    if (lat[t] == lat[t - 1]) {
      ++run;
    } else {
      CHECK(run >= s.min_segment);
      CHECK(run <= s.max_segment);
      run = 1;
    }
  }
}

TEST_CASE("ambiguity rate matches a boundary-counting oracle") {
  // With 8 classes per symbol, 5 is invertible mod 8, so the label changes
  // exactly when the next symbol differs from the current one.
  for (bool left : {true, false}) {
    auto s = small_spec();
    s.left_context = left;
    const auto out = generate_synthetic_corpus(s);
    std::size_t boundary = 0, total = 0;
    for (const auto& lat : out.latents) {
      for (std::size_t t = 0; t < lat.size(); ++t) {
        boundary += t + 1 < lat.size() && lat[t + 1] != lat[t];
        ++total;
      }
    }
    const double oracle = static_cast<double>(boundary) / static_cast<double>(total);
    CHECK(out.ambiguity_rate == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(out.corpus.ambiguity_ceiling == doctest::Approx(1 - oracle).epsilon(1e-12));
    // roughly one boundary per mean segment length (5.5)
    CHECK(oracle > 0.12);
    CHECK(oracle < 0.25);
  }
}

TEST_CASE("resampling the next symbol changes boundary labels") {
  auto s = small_spec();
  const auto out = generate_synthetic_corpus(s);
  std::mt19937_64 rng(5);
  std::size_t changed = 0, total = 0;
  for (std::size_t u = 0; u < out.latents.size(); ++u) {
    const auto& lat = out.latents[u];
    for (std::size_t t = 0; t + 1 < lat.size(); ++t) {
      const auto prev = lat[t == 0 ? 0 : t - 1];
      CHECK(out.corpus.utterances[u].labels[t] ==
            context_class(prev, lat[t], lat[t + 1], s.symbols, s.classes));
      // a different next symbol
      const auto other = static_cast<std::uint32_t>(
          (lat[t + 1] + std::uniform_int_distribution<std::uint32_t>(1, 7)(rng)) % 8);
      changed += context_class(prev, lat[t], other, 8, 64) != out.corpus.utterances[u].labels[t];
      ++total;
    }
  }
  CHECK(changed == total);
}

TEST_CASE("context class map") {
  // offset (3*prev + 5*next) mod 8 within the block of the current symbol
  CHECK(context_class(1, 2, 3, 8, 64) == 2 * 8 + (3 + 15) % 8);
  CHECK(context_class(1, 2, 3, 8, 64, false) == 2 * 8 + 15 % 8);
  CHECK(context_class(7, 7, 7, 8, 64) == 56 + (21 + 35) % 8);
}

TEST_CASE("context window examples") {
  Matrix<double> x(4, 2);
  for (std::size_t i = 0; i < 8; ++i) x.values()[i] = static_cast<double>(i + 1);
  CHECK(context_window(x, 0, 0) == x);

  const auto w = context_window(x, 0, 2);
  REQUIRE(w.rows() == 4);
  REQUIRE(w.cols() == 6);
  // row 4 = [x4, x4, x4]
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(w(3, 2 * j) == 7);
    CHECK(w(3, 2 * j + 1) == 8);
  }
  // row 1 = [x1, x2, x3]
  CHECK(w(0, 0) == 1);
  CHECK(w(0, 2) == 3);
  CHECK(w(0, 4) == 5);

  const auto both = context_window(x, 2, 1);
  CHECK(both(0, 0) == 1);  // x1 replicated twice
  CHECK(both(0, 2) == 1);
  CHECK(both(0, 6) == 3);
}

TEST_CASE("context window middle block is the frame") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Matrix<double> x(9, 3);
  for (auto& v : x.values()) v = g(rng);
  for (std::size_t p : {0, 1, 4})
    for (std::size_t k : {0, 2, 5, 15}) {
      const auto w = context_window(x, p, k);
      CHECK(w.cols() == 3 * (p + k + 1));
      for (std::size_t t = 0; t < 9; ++t)
        for (std::size_t j = 0; j < 3; ++j) CHECK(w(t, p * 3 + j) == x(t, j));
    }
  const auto u = context_window(utt("a", 5, 2), 1, 2);
  CHECK(u.dim == 8);
  CHECK(u.frames.size() == 40);
}

TEST_CASE("label priors") {
  auto a = utt("a", 4, 1);
  a.labels = {0, 0, 0, 1};
  const std::vector<FeatureSequence> one{a};
  const auto p = compute_label_priors(one, 2);
  CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-12));

  auto b = utt("b", 4, 1);
  b.labels = {0, 1, 2, 3};
  const auto uni = compute_label_priors(std::vector<FeatureSequence>{b}, 4);
  for (double v : uni) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  // unseen class: floor before renormalization
  const auto floored = compute_label_priors(one, 3);
  const double norm = 0.75 + 0.25 + kPriorFloor;
  CHECK(floored[2] == doctest::Approx(kPriorFloor / norm).epsilon(1e-12));
  double total = 0;
  for (double v : floored) {
    CHECK(v >= 0);
    total += v;
  }
  CHECK(std::abs(total - 1) <= 1e-9);

  CHECK_THROWS_AS(compute_label_priors(std::vector<FeatureSequence>{}, 3), ValidationError);
  CHECK_THROWS_AS(compute_label_priors(one, 1), ValidationError);  // label 1 out of range
}

TEST_CASE("synthetic priors are a distribution") {
  const auto c = generate_synthetic_corpus(small_spec()).corpus;
  double total = 0;
  for (double v : c.priors) total += v;
  CHECK(std::abs(total - 1) <= 1e-9);
  CHECK(c.priors.size() == 64);
}

TEST_CASE("batching") {
  std::vector<FeatureSequence> us{utt("a", 3, 2), utt("b", 5, 2), utt("c", 4, 2), utt("d", 2, 2)};
  for (const auto& b : make_batches(us, 1, 1)) {
    CHECK(b.layout.batch == 1);
    for (auto v : b.layout.valid) CHECK(v == 1);
  }

  const std::vector<FeatureSequence> two{utt("a", 3, 2), utt("b", 5, 2)};
  const auto batches = make_batches(two, 2, 9);
  REQUIRE(batches.size() == 1);
  const auto& b = batches[0];
  CHECK(b.layout.steps == 5);
  std::size_t ones_a = 0;
  const std::size_t col_a = b.utterances[0] == 0 ? 0 : 1;
  for (std::size_t t = 0; t < 5; ++t) ones_a += b.layout.valid[t * 2 + col_a];
  CHECK(ones_a == 3);
  const auto x = batch_inputs<double>(two, b);
  CHECK(x.rows() == 10);
  for (std::size_t t = 3; t < 5; ++t)
    for (double v : x.row(t * 2 + col_a)) CHECK(v == 0);
  CHECK(x(2 * 2 + col_a, 1) == 5);  // frame 3 of "a", second feature
  CHECK(batch_labels(two, b).size() == 10);

  // same seed, same order; every utterance exactly once
  const auto b1 = make_batches(us, 2, 4), b2 = make_batches(us, 2, 4);
  REQUIRE(b1.size() == 2);
  std::vector<int> seen(4, 0);
  for (std::size_t i = 0; i < b1.size(); ++i) {
    CHECK(b1[i].utterances == b2[i].utterances);
    for (auto u : b1[i].utterances) ++seen[u];
  }
  CHECK(seen == std::vector<int>{1, 1, 1, 1});
  // bucketing: the two shortest share a batch
  for (const auto& batch : b1) {
    const bool has_d = std::count(batch.utterances.begin(), batch.utterances.end(), 3);
    if (has_d) CHECK(std::count(batch.utterances.begin(), batch.utterances.end(), 0) == 1);
  }
  CHECK_THROWS_AS(make_batches(us, 0, 1), ValidationError);
}

TEST_CASE("container round trip is bit exact") {
  auto c = generate_synthetic_corpus(small_spec()).corpus;
  c.utterances[0].frames[0] = -0.0f;
  c.utterances[0].frames[1] = 1e-40f;  // denormal
  const auto bin = scratch("c.twsq"), man = scratch("c.json");
  write_corpus(c, bin, man);
  const auto r = read_corpus(bin, man);
  CHECK(r.name == c.name);
  CHECK(r.feature_dim == c.feature_dim);
  CHECK(r.num_classes == c.num_classes);
  CHECK(r.splits == c.splits);
  CHECK(r.priors == c.priors);
  CHECK(r.ambiguity_ceiling == c.ambiguity_ceiling);
  REQUIRE(r.utterances.size() == c.utterances.size());
  for (std::size_t i = 0; i < c.utterances.size(); ++i) {
    CHECK(r.utterances[i].id == c.utterances[i].id);
    CHECK(r.utterances[i].labels == c.utterances[i].labels);
    CHECK(std::memcmp(r.utterances[i].frames.data(), c.utterances[i].frames.data(),
                      c.utterances[i].frames.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("container errors") {
  const auto c = generate_synthetic_corpus(small_spec()).corpus;
  const auto bin = scratch("e.twsq"), man = scratch("e.json");
  write_corpus(c, bin, man);

  auto read_bytes = [&] {
    std::ifstream in(bin, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  auto write_bytes = [&](const fs::path& p, const std::string& s) {
    std::ofstream(p, std::ios::binary) << s;
  };
  const std::string good = read_bytes();

  auto bad = good;
  bad[0] = 'X';
  write_bytes(bin, bad);
  CHECK_THROWS_WITH_AS(read_corpus(bin, man), doctest::Contains("magic"), ValidationError);

  write_bytes(bin, good.substr(0, good.size() - 7));
  CHECK_THROWS_WITH_AS(read_corpus(bin, man), doctest::Contains("truncated"), ValidationError);

  write_bytes(bin, good);
  nlohmann::json m;
  std::ifstream(man) >> m;
  const auto original = m;
  m["num_classes"] = 10;  // smaller than max label + 1
  std::ofstream(man) << m.dump();
  CHECK_THROWS_AS(read_corpus(bin, man), ValidationError);

  m = original;
  m["feature_dim"] = 3;
  std::ofstream(man) << m.dump();
  CHECK_THROWS_AS(read_corpus(bin, man), ValidationError);

  std::ofstream(man) << "{not json";
  CHECK_THROWS_AS(read_corpus(bin, man), ValidationError);
  CHECK_THROWS_AS(read_corpus(scratch("missing.twsq"), scratch("missing.json")), IoError);
}

TEST_CASE("corpus validation") {
  Corpus c;
  c.feature_dim = 2;
  c.num_classes = 2;
  c.utterances = {utt("a", 3, 2), utt("a", 2, 2)};
  c.splits = {Split::kTrain, Split::kDev};
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("duplicate"), ValidationError);
  c.utterances[1].id = "b";
  CHECK_NOTHROW(c.validate());
  c.utterances[1].labels[0] = 2;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  CHECK(parse_split("dev") == Split::kDev);
  CHECK_THROWS_AS(parse_split("eval"), ValidationError);
}
