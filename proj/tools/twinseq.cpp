// twinseq: synth / train / eval / infer / gradcheck / bench
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "twinseq/cli/config.hpp"
#include "twinseq/cli/experiment.hpp"
#include "twinseq/cli/model_io.hpp"
#include "twinseq/data/synth.hpp"
#include "twinseq/eval/eval.hpp"

namespace fs = std::filesystem;
using namespace twinseq;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
  bool no_timestamp = false;
};

ExperimentConfig resolve(const Options& opt) {
  ExperimentConfig c = opt.config.empty() ? parse_config("[experiment]\nmode = unitwin\n")
                                          : load_config(opt.config);
  if (opt.seed) c.seeds = {*opt.seed};
  if (!opt.out.empty()) c.output = opt.out;
  return c;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw IoError("cannot write '" + path.string() + "'");
}

Corpus load_corpus(const ExperimentConfig& c) { return read_corpus(c.container, c.manifest); }

fs::path model_path(const ExperimentConfig& c, std::uint64_t seed) {
  return fs::path(c.output) / "models" / (c.id + "_s" + std::to_string(seed) + ".twmd");
}

int cmd_synth(const Options& opt) {
  const auto c = resolve(opt);
  const auto synth = generate_synthetic_corpus(c.synth);
  for (const auto& p : {fs::path(c.container), fs::path(c.manifest)})
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_corpus(synth.corpus, c.container, c.manifest);
  if (!opt.quiet) {
    std::printf("wrote %zu utterances to %s (manifest %s)\n", synth.corpus.utterances.size(),
                c.container.c_str(), c.manifest.c_str());
    std::printf("ambiguity rate %.4f, latent-past accuracy ceiling %.4f\n", synth.ambiguity_rate,
                synth.corpus.ambiguity_ceiling);
  }
  return 0;
}

int cmd_train(const Options& opt) {
  const auto c = resolve(opt);
  const Corpus corpus = load_corpus(c);
  fs::create_directories(fs::path(c.output) / "models");
  for (auto seed : c.seeds) {
    const RunSpec spec{c.mode, c.hp.lambda, c.future, seed};
    const auto run = run_training(c, corpus, spec, model_path(c, seed));
    write_file(fs::path(c.output) / "metrics" / (c.id + "_s" + std::to_string(seed) + ".csv"),
               metrics_csv(c.id, run, !opt.no_timestamp));
    if (!opt.quiet) {
      for (const auto& r : run.history)
        std::printf("seed %llu epoch %2zu  loss %.4f  dev FER %.4f  lr %.3g\n",
                    static_cast<unsigned long long>(seed), r.epoch, r.train_loss, r.dev_fer,
                    r.learning_rate);
      std::printf("seed %llu: dev FER %.4f  test FER %.4f\n",
                  static_cast<unsigned long long>(seed), run.dev_fer, run.test_fer);
    }
  }
  return 0;
}

template <typename Scalar>
double eval_model(const fs::path& path, const Corpus& corpus) {
  ModelMeta meta;
  auto net = load_model<Scalar>(path, &meta);
  const auto test = context_window(corpus.split(Split::kTest), meta.past, meta.future);
  if (test.empty()) throw ValidationError("corpus has no test split");
  return evaluate(net, test).fer;
}

int cmd_eval(const Options& opt) {
  const auto c = resolve(opt);
  const Corpus corpus = load_corpus(c);
  std::vector<double> fers;
  std::string report = "experiment,seed,test_fer\n";
  for (auto seed : c.seeds) {
    const auto path = model_path(c, seed);
    const auto meta = read_model_meta(path);
    const double fer = meta.precision == Precision::kDouble ? eval_model<double>(path, corpus)
                                                            : eval_model<float>(path, corpus);
    fers.push_back(fer);
    report += c.id + "," + std::to_string(seed) + "," + std::to_string(fer) + "\n";
    if (!opt.quiet) std::printf("seed %llu: test FER %.4f\n", static_cast<unsigned long long>(seed), fer);
  }
  const auto [mean, sd] = mean_std(fers);
  std::printf("%s test FER %.2f%% +- %.2f%% over %zu seed(s)\n", c.id.c_str(), 100 * mean,
              100 * sd, fers.size());
  write_file(fs::path(c.output) / (c.id + "_eval.csv"), report);
  return 0;
}

template <typename Scalar>
int infer_with(const ExperimentConfig& c, const Options& opt, const fs::path& path,
               const Corpus& corpus) {
  ModelMeta meta;
  Network<Scalar> net = load_model<Scalar>(path, &meta);
  if (net.config.mode == StackMode::kTwin) net = strip_backward(net);
  const fs::path out_path = fs::path(c.output) / (c.id + "_likelihoods.txt");
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  std::ofstream out(out_path);
  if (!out) throw IoError("cannot write '" + out_path.string() + "'");
  std::size_t frames = 0, violations = 0, errors = 0;
  for (const auto& utt : corpus.split(Split::kTest)) {
    StreamingSession<Scalar> session(net, meta.feature_dim, meta.past, meta.future);
    Matrix<Scalar> posteriors(utt.length(), meta.config.num_classes);
    auto take = [&](const StreamPrediction<Scalar>& p) {
      std::copy(p.posteriors.values().begin(), p.posteriors.values().end(),
                posteriors.row(p.frame).begin());
      errors += p.label != utt.labels[p.frame];
    };
    std::vector<Scalar> frame(meta.feature_dim);
    for (std::size_t t = 0; t < utt.length(); ++t) {
      const auto f = utt.frame(t);
      std::copy(f.begin(), f.end(), frame.begin());
      if (auto p = session.push(frame)) take(*p);
    }
    for (const auto& p : session.finalize()) take(p);
    violations += session.latency_violations();
    frames += utt.length();
    write_likelihoods(out, utt.id, posterior_to_likelihood(posteriors, meta.priors));
  }
  if (!opt.quiet) {
    std::printf("streamed %zu frames (look-ahead %zu): FER %.4f, latency violations %zu\n",
                frames, meta.future, frames ? static_cast<double>(errors) / frames : 0.0,
                violations);
    std::printf("likelihoods written to %s\n", out_path.string().c_str());
  }
  return violations == 0 ? 0 : 3;
}

int cmd_infer(const Options& opt) {
  const auto c = resolve(opt);
  const Corpus corpus = load_corpus(c);
  const auto path = model_path(c, c.seeds.front());
  return read_model_meta(path).precision == Precision::kDouble
             ? infer_with<double>(c, opt, path, corpus)
             : infer_with<float>(c, opt, path, corpus);
}

int cmd_gradcheck(const Options& opt) {
  const auto c = resolve(opt);
  bool ok = true;
  for (auto v : {CellVariant::kLstm, CellVariant::kGru, CellVariant::kMGru, CellVariant::kLiGru}) {
    const auto report = toy_gradcheck(v, c.seeds.front());
    ok = ok && report.passed;
    std::printf("%-6s %s, max rel err %.3g (tolerance %.0e, %zu entries)\n",
                std::string(to_string(v)).c_str(), report.passed ? "pass" : "FAIL",
                report.max_rel_error, report.tolerance, report.entries.size());
    if (!report.passed && report.worst())
      std::printf("       worst: %s[%zu] analytic %.9g numeric %.9g\n",
                  report.worst()->param.c_str(), report.worst()->index, report.worst()->analytic,
                  report.worst()->numeric);
  }
  return ok ? 0 : 3;
}

int cmd_bench(const Options& opt) {
  const auto c = resolve(opt);
  const Corpus corpus = load_corpus(c);
  const auto bench = run_bench(c, corpus, worker_threads());
  const fs::path dir = fs::path(c.output) / "bench";
  for (const auto& run : bench.runs)
    write_file(dir / "metrics" / (c.id + "_" + run.spec.tag() + ".csv"),
               metrics_csv(c.id, run, !opt.no_timestamp));
  write_file(dir / (c.id + "_aggregate.csv"), aggregate_csv(bench, !opt.no_timestamp));
  const std::string summary = bench_summary(bench);
  write_file(dir / (c.id + "_summary.txt"), summary);
  if (!opt.quiet) std::fputs(summary.c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"twinseq: twin-regularized recurrent sequence labelling"};
  app.require_subcommand(1);
  Options opt;
  int (*handler)(const Options&) = nullptr;

  auto add = [&](const char* name, const char* help, int (*fn)(const Options&),
                 bool needs_config) {
    auto* sub = app.add_subcommand(name, help);
    auto* cfg = sub->add_option("--config", opt.config, "experiment config file");
    if (needs_config) cfg->required();
    sub->add_option("--seed", opt.seed, "run a single seed instead of experiment.seeds");
    sub->add_option("--out", opt.out, "output directory (overrides experiment.output)");
    sub->add_flag("--quiet", opt.quiet, "suppress progress output");
    sub->add_flag("--no-timestamp", opt.no_timestamp, "omit the timestamp line in CSV files");
    sub->callback([&handler, fn] { handler = fn; });
  };
  add("synth", "generate the synthetic corpus", cmd_synth, true);
  add("train", "train one model per seed", cmd_train, true);
  add("eval", "test frame error rate of trained models", cmd_eval, true);
  add("infer", "streaming inference, writes prior-scaled likelihoods", cmd_infer, true);
  add("gradcheck", "finite-difference check of every cell variant", cmd_gradcheck, false);
  add("bench", "modes x windows x seeds comparison", cmd_bench, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    return handler(opt);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
