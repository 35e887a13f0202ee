#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "twinseq/cli/config.hpp"
#include "twinseq/cli/experiment.hpp"
#include "twinseq/cli/model_io.hpp"
#include "twinseq/eval/eval.hpp"
#include "twinseq/train/init.hpp"

using namespace twinseq;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  auto dir = fs::temp_directory_path() / ("twinseq_test_cli_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct Run {
  int code;
  std::string output;
};

Run run_cli(const std::string& args) {
  const auto log = scratch_dir() / "cli.log";
  const std::string cmd = std::string(TWINSEQ_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

const char* kTinyConfig = R"(
[experiment]
id = tiny
mode = unitwin
seeds = 3, 4
precision = double

[model]
cell = gru
hidden = 6

[train]
lambda = 0.3
batch_size = 4
epochs = 2
learning_rate = 0.01

[data]
future = 2

[bench]
modes = unidir, unitwin
lambdas = 0.1, 1.0
futures = 0, 1

[synth]
feature_dim = 3
min_length = 6
max_length = 12
train = 10
dev = 4
test = 4
)";

}  // namespace

TEST_CASE("config parses and round-trips") {
  const auto c = parse_config(kTinyConfig);
  CHECK(c.id == "tiny");
  CHECK(c.mode == TrainMode::kUniTwin);
  CHECK(c.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(c.hp.precision == Precision::kDouble);
  CHECK(c.hp.variant == CellVariant::kGru);
  CHECK(c.hp.hidden_sizes == std::vector<std::size_t>{6});
  CHECK(c.hp.lambda == 0.3);
  CHECK(c.future == 2);
  CHECK(c.bench_futures == std::vector<std::size_t>{0, 1});
  CHECK(c.synth.feature_dim == 3);
  CHECK(c.synth.train_utterances == 10);

  const auto text = serialize_config(c);
  CHECK(parse_config(text) == c);
  CHECK(serialize_config(parse_config(text)) == text);

  auto odd = c;
  odd.hp.learning_rate = 0.1 + 0.2;  // needs 17 digits
  odd.synth.mix = {0.2, 0.35, 0.45};
  CHECK(parse_config(serialize_config(odd)) == odd);
}

TEST_CASE("minimal config takes defaults") {
  const auto c = parse_config("[experiment]\nmode = bidir\n");
  CHECK(c.mode == TrainMode::kBiDir);
  ExperimentConfig d;
  d.mode = TrainMode::kBiDir;
  CHECK(c == d);
  CHECK(c.hp.learning_rate == 0.002);
  CHECK(c.hp.lambda == 0);
}

TEST_CASE("config errors name the line") {
  CHECK(parse_config("[experiment]\nmode = unitwin\n[train]\nlambda = 0.6\n").hp.lambda == 0.6);
  CHECK_THROWS_WITH_AS(parse_config("[experiment]\nmode = unitwin\n[train]\nlambda = -1\n"),
                       doctest::Contains("lambda"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("[experiment]\nmode = unitwin\n[train]\nlamda = 1\n"),
                       doctest::Contains("line 4: unknown key 'train.lamda'"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("[experiment]\nmode = unitwin\n[train]\nepochs = many\n"),
                       doctest::Contains("line 4"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("[experiment]\nmode = sideways\n"),
                       doctest::Contains("unidir"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("[experiment]\nid = x\n"),
                       doctest::Contains("experiment.mode"), ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("mode = unidir\n"), doctest::Contains("section"),
                       ValidationError);
  CHECK_THROWS_WITH_AS(parse_config("[experiment]\nmode = unidir\nmode = bidir\n"),
                       doctest::Contains("duplicate"), ValidationError);
  CHECK_THROWS_AS(parse_config("[experiment]\nmode = unidir\n[model]\nbatch_norm = yes\n"),
                  ValidationError);
  CHECK_THROWS_AS(parse_config("[experiment]\nmode = unidir\n[synth]\nmix = 0.5, 0.5\n"),
                  ValidationError);
  CHECK_THROWS_AS(parse_config("[experiment]\nmode = unidir\n[train]\ndropout = 1\n"),
                  ValidationError);
  CHECK_THROWS_WITH_AS(load_config(scratch_dir() / "nope.conf"), doctest::Contains("nope.conf"),
                       IoError);
}

TEST_CASE("model file round trip") {
  StackConfig c;
  c.input_size = 5;
  c.hidden_sizes = {4, 3};
  c.variant = CellVariant::kLstm;
  c.mode = StackMode::kTwin;
  c.num_classes = 7;
  c.dropout = 0.2;
  auto net = init_network<double>(c, 9);
  net.forward_layers[1].gates[2].bn->running_mean(0, 1) = 0.123456789012345;
  net.backward_layers[0].gates[0].bn->running_var(0, 0) = 2.5;
  ModelMeta meta;
  meta.config = c;
  meta.precision = Precision::kDouble;
  meta.feature_dim = 1;
  meta.future = 4;
  meta.priors = {0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2};
  const auto path = scratch_dir() / "m.twmd";
  save_model(path, net, meta);

  ModelMeta back;
  auto loaded = load_model<double>(path, &back);
  CHECK(back.future == 4);
  CHECK(back.feature_dim == 1);
  CHECK(back.priors == meta.priors);
  CHECK(back.precision == Precision::kDouble);
  CHECK(back.config.mode == StackMode::kTwin);
  CHECK(back.config.hidden_sizes == c.hidden_sizes);
  const auto a = net.parameters(), b = loaded.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].tensor.value() == b[i].tensor.value());
  }
  CHECK(loaded.forward_layers[1].gates[2].bn->running_mean ==
        net.forward_layers[1].gates[2].bn->running_mean);
  CHECK(loaded.backward_layers[0].gates[0].bn->running_var ==
        net.backward_layers[0].gates[0].bn->running_var);
  CHECK(read_model_meta(path).config.num_classes == 7);

  // stripped model has no backward-tagged parameters on disk
  ModelMeta sm = meta;
  sm.config.mode = StackMode::kForwardOnly;
  save_model(scratch_dir() / "s.twmd", strip_backward(net), sm);
  const auto stripped = load_model<double>(scratch_dir() / "s.twmd");
  for (const auto& p : stripped.parameters()) CHECK_FALSE(p.backward_branch);

  // corrupted files
  std::string bytes = slurp(path);
  const auto bad = scratch_dir() / "bad.twmd";
  auto write = [&](const std::string& s) { std::ofstream(bad, std::ios::binary) << s; };
  write("XXXX" + bytes.substr(4));
  CHECK_THROWS_AS(load_model<double>(bad), ValidationError);
  write(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(load_model<double>(bad), ValidationError);
  write(bytes + "x");
  CHECK_THROWS_AS(load_model<double>(bad), ValidationError);
  CHECK_THROWS_AS(load_model<double>(scratch_dir() / "absent.twmd"), IoError);
}

TEST_CASE("metrics csv is deterministic without timestamp") {
  auto c = parse_config(kTinyConfig);
  const auto corpus = generate_synthetic_corpus(c.synth).corpus;
  const RunSpec spec{TrainMode::kUniTwin, 0.3, 2, 3};
  const auto a = run_training(c, corpus, spec);
  const auto b = run_training(c, corpus, spec);
  const auto ca = metrics_csv("tiny", a, false);
  CHECK(ca == metrics_csv("tiny", b, false));
  std::istringstream lines(ca);
  std::string header, row;
  std::getline(lines, header);
  CHECK(header == "experiment,seed,epoch,train_loss,dev_fer,omega,learning_rate");
  std::size_t rows = 0;
  while (std::getline(lines, row)) {
    ++rows;
    CHECK(row.rfind("tiny,3,", 0) == 0);
  }
  CHECK(rows == 2);
  CHECK(metrics_csv("tiny", a, true).rfind("# generated ", 0) == 0);
  CHECK_FALSE(std::isnan(a.test_fer));
  CHECK(spec.tag() == "unitwin_k2_l0.3_s3");
  CHECK(RunSpec{TrainMode::kBiDir, 0, 15, 1}.tag() == "bidir_k15_s1");

  // unidir runs leave the omega column empty
  const auto u = run_training(c, corpus, RunSpec{TrainMode::kUniDir, 0, 0, 1});
  CHECK(metrics_csv("tiny", u, false).find(",,") != std::string::npos);
}

TEST_CASE("bench aggregates per-seed runs") {
  auto c = parse_config(kTinyConfig);
  const auto corpus = generate_synthetic_corpus(c.synth).corpus;
  const auto bench = run_bench(c, corpus, 2);
  // futures x (unidir + 2 lambdas) x seeds
  CHECK(bench.runs.size() == 2 * 3 * 2);
  REQUIRE(bench.rows.size() == 6);
  for (const auto& r : bench.rows) {
    double dev = 0, test = 0;
    for (double v : r.dev_fer) dev += v;
    for (double v : r.test_fer) test += v;
    CHECK(std::abs(r.dev_mean - dev / 2) <= 1e-12);
    CHECK(std::abs(r.test_mean - test / 2) <= 1e-12);
    CHECK(r.seeds == 2);
  }
  // exactly one selected row per (future, mode), the lowest dev mean
  for (std::size_t k : {0, 1}) {
    const AggregateRow* best = nullptr;
    std::size_t selected = 0;
    for (const auto& r : bench.rows) {
      if (r.future != k || r.mode != TrainMode::kUniTwin) continue;
      if (!best || r.dev_mean < best->dev_mean) best = &r;
      selected += r.selected;
    }
    CHECK(selected == 1);
    CHECK(best->selected);
  }
  // threads do not change results
  const auto serial = run_bench(c, corpus, 1);
  CHECK(aggregate_csv(serial, false) == aggregate_csv(bench, false));
  CHECK(aggregate_csv(bench, false).rfind("future,mode,lambda,selected,seeds,", 0) == 0);
  CHECK(bench_summary(bench).find("unitwin") != std::string::npos);
}

TEST_CASE("mean and sample standard deviation") {
  const auto [m, s] = mean_std({1, 2, 3, 4});
  CHECK(m == 2.5);
  CHECK(s == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-12));
  CHECK(mean_std({7}).second == 0);
  CHECK_THROWS_AS(mean_std({}), ValidationError);
}

TEST_CASE("toy gradient check passes for every cell") {
  for (auto v : {CellVariant::kLstm, CellVariant::kGru, CellVariant::kMGru, CellVariant::kLiGru}) {
    const auto r = toy_gradcheck(v);
    INFO(to_string(v) << " max rel err " << r.max_rel_error);
    CHECK(r.passed);
    CHECK(r.entries.size() > 500);
  }
}

TEST_CASE("command line end to end") {
  const auto dir = scratch_dir() / "e2e";
  fs::create_directories(dir);
  std::string cfg = kTinyConfig;
  cfg += "\n";
  const auto replace = [&](const std::string& from, const std::string& to) {
    cfg.replace(cfg.find(from), from.size(), to);
  };
  replace("id = tiny", "id = tiny\noutput = " + (dir / "out").string());
  replace("[data]", "[data]\ncontainer = " + (dir / "c.twsq").string() +
                        "\nmanifest = " + (dir / "c.json").string());
  const auto conf = dir / "tiny.conf";
  std::ofstream(conf) << cfg;
  const std::string c = "--config " + conf.string() + " --quiet --no-timestamp";

  auto r = run_cli("synth " + c);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "c.twsq"));
  r = run_cli("train " + c + " --seed 3");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "out" / "models" / "tiny_s3.twmd"));
  const auto metrics = slurp(dir / "out" / "metrics" / "tiny_s3.csv");
  CHECK(metrics.rfind("experiment,seed,epoch", 0) == 0);
  r = run_cli("eval " + c + " --seed 3");
  CHECK(r.code == 0);
  CHECK(r.output.find("test FER") != std::string::npos);
  r = run_cli("infer " + c + " --seed 3");
  CHECK(r.code == 0);
  const auto lik = slurp(dir / "out" / "tiny_likelihoods.txt");
  CHECK(lik.rfind("utt", 0) == 0);

  // missing config file: nonzero, path named
  r = run_cli("train --config " + (dir / "missing.conf").string());
  CHECK(r.code == 2);
  CHECK(r.output.find("missing.conf") != std::string::npos);
  // config error
  std::ofstream(dir / "bad.conf") << "[experiment]\nmode = unitwin\n[train]\nlambda = -1\n";
  r = run_cli("train --config " + (dir / "bad.conf").string());
  CHECK(r.code == 2);
  CHECK(r.output.find("lambda") != std::string::npos);
  // usage error
  CHECK(run_cli("train").code == 1);
  CHECK(run_cli("frobnicate").code == 1);
}
