#include "twinseq/cli/experiment.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "twinseq/eval/eval.hpp"
#include "twinseq/loss/loss.hpp"
#include "twinseq/train/init.hpp"

namespace twinseq {

namespace {

std::string num(double v, const char* format = "%.6f") {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::string timestamp_line() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[64];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  return std::string("# generated ") + buf + "\n";
}

template <typename Scalar>
RunOutcome train_in(const ExperimentConfig& config, const Corpus& corpus, const RunSpec& spec,
                    const std::optional<std::filesystem::path>& model_path) {
  const auto train = context_window(corpus.split(Split::kTrain), config.past, spec.future);
  const auto dev = context_window(corpus.split(Split::kDev), config.past, spec.future);
  const auto test = context_window(corpus.split(Split::kTest), config.past, spec.future);

  Hyperparams hp = config.hp;
  hp.seed = spec.seed;
  hp.lambda = spec.lambda;
  auto result = train_run<Scalar>(spec.mode, train, dev, corpus.num_classes, hp);

  RunOutcome out;
  out.spec = spec;
  out.history = result.history;
  out.dev_fer = result.history.back().dev_fer;
  out.dev_omega = result.history.back().dev_omega;
  if (!test.empty()) out.test_fer = evaluate(result.network, test, hp.batch_size).fer;

  if (model_path) {
    ModelMeta meta;
    meta.config = result.network.config;
    meta.precision = hp.precision;
    meta.feature_dim = corpus.feature_dim;
    meta.past = config.past;
    meta.future = spec.future;
    meta.priors = corpus.priors;
    save_model(*model_path, result.network, meta);
  }
  return out;
}

}  // namespace

std::string RunSpec::tag() const {
  std::string t = std::string(to_string(mode)) + "_k" + std::to_string(future);
  if (mode == TrainMode::kUniTwin) t += "_l" + num(lambda, "%g");
  return t + "_s" + std::to_string(seed);
}

RunOutcome run_training(const ExperimentConfig& config, const Corpus& corpus,
                        const RunSpec& spec,
                        const std::optional<std::filesystem::path>& model_path) {
  if (config.hp.precision == Precision::kDouble)
    return train_in<double>(config, corpus, spec, model_path);
  return train_in<float>(config, corpus, spec, model_path);
}

std::string metrics_csv(const std::string& experiment_id, const RunOutcome& run,
                        bool timestamp) {
  std::string out = timestamp ? timestamp_line() : std::string();
  out += "experiment,seed,epoch,train_loss,dev_fer,omega,learning_rate\n";
  for (const auto& r : run.history) {
    out += experiment_id + "," + std::to_string(run.spec.seed) + "," + std::to_string(r.epoch) +
           "," + num(r.train_loss, "%.9g") + "," + num(r.dev_fer, "%.9g") + "," +
           num(r.dev_omega, "%.9g") + "," + num(r.learning_rate, "%.9g") + "\n";
  }
  return out;
}

std::pair<double, double> mean_std(const std::vector<double>& values) {
  if (values.empty()) throw ValidationError("mean_std: no values");
  double sum = 0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double sq = 0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size() - 1))};
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("TWINSEQ_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n >= 1) return static_cast<std::size_t>(n);
    throw ValidationError("TWINSEQ_THREADS must be a positive integer");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

BenchResult run_bench(const ExperimentConfig& config, const Corpus& corpus, std::size_t threads) {
  std::vector<RunSpec> specs;
  for (std::size_t k : config.bench_futures)
    for (TrainMode mode : config.bench_modes) {
      const std::vector<double> lambdas =
          mode == TrainMode::kUniTwin ? config.bench_lambdas : std::vector<double>{0.0};
      for (double lambda : lambdas)
        for (std::uint64_t seed : config.seeds) specs.push_back({mode, lambda, k, seed});
    }

  BenchResult bench;
  bench.runs.resize(specs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < specs.size(); i = next++) {
      try {
        bench.runs[i] = run_training(config, corpus, specs[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = specs.size();
      }
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, specs.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  // Aggregate in grid order; results are independent of thread scheduling.
  for (std::size_t i = 0; i < specs.size(); i += config.seeds.size()) {
    AggregateRow row;
    row.future = specs[i].future;
    row.mode = specs[i].mode;
    row.lambda = specs[i].lambda;
    row.seeds = config.seeds.size();
    for (std::size_t s = 0; s < config.seeds.size(); ++s) {
      row.dev_fer.push_back(bench.runs[i + s].dev_fer);
      row.test_fer.push_back(bench.runs[i + s].test_fer);
    }
    std::tie(row.dev_mean, row.dev_std) = mean_std(row.dev_fer);
    std::tie(row.test_mean, row.test_std) = mean_std(row.test_fer);
    bench.rows.push_back(row);
  }
  // Lambda selection on dev; ties keep the earlier grid entry.
  std::map<std::pair<std::size_t, int>, std::size_t> best;
  for (std::size_t i = 0; i < bench.rows.size(); ++i) {
    const auto key = std::make_pair(bench.rows[i].future, static_cast<int>(bench.rows[i].mode));
    const auto it = best.find(key);
    if (it == best.end() || bench.rows[i].dev_mean < bench.rows[it->second].dev_mean)
      best[key] = i;
  }
  for (const auto& [key, i] : best) bench.rows[i].selected = true;
  return bench;
}

std::string aggregate_csv(const BenchResult& bench, bool timestamp) {
  std::string out = timestamp ? timestamp_line() : std::string();
  out += "future,mode,lambda,selected,seeds,dev_fer_mean,dev_fer_std,test_fer_mean,test_fer_std\n";
  for (const auto& r : bench.rows) {
    out += std::to_string(r.future) + "," + std::string(to_string(r.mode)) + "," +
           num(r.lambda, "%g") + "," + (r.selected ? "1" : "0") + "," + std::to_string(r.seeds) +
           "," + num(r.dev_mean, "%.9g") + "," + num(r.dev_std, "%.9g") + "," +
           num(r.test_mean, "%.9g") + "," + num(r.test_std, "%.9g") + "\n";
  }
  return out;
}

std::string bench_summary(const BenchResult& bench) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-7s %-8s %-7s %-20s %-20s\n", "future", "mode", "lambda",
                "dev FER %", "test FER %");
  os << line;
  for (const auto& r : bench.rows) {
    if (!r.selected) continue;
    std::snprintf(line, sizeof line, "%-7zu %-8s %-7g %6.2f +- %-10.2f %6.2f +- %-10.2f\n",
                  r.future, std::string(to_string(r.mode)).c_str(), r.lambda, 100 * r.dev_mean,
                  100 * r.dev_std, 100 * r.test_mean, 100 * r.test_std);
    os << line;
  }
  return os.str();
}

GradcheckReport toy_gradcheck(CellVariant variant, std::uint64_t seed, double tolerance) {
  constexpr std::size_t kInput = 3, kClasses = 5, kSteps = 12, kBatch = 2;
  StackConfig config;
  config.input_size = kInput;
  config.hidden_sizes = {8, 8};
  config.variant = variant;
  config.mode = StackMode::kTwin;
  config.num_classes = kClasses;
  config.dropout = 0.25;
  Network<double> net = init_network<double>(config, seed);

  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::uint32_t> label(0, kClasses - 1);
  // Second utterance is 9 frames long, so the last 3 steps are padding.
  SequenceLayout layout{kSteps, kBatch, std::vector<std::uint8_t>(kSteps * kBatch, 1)};
  for (std::size_t t = 9; t < kSteps; ++t) layout.valid[t * kBatch + 1] = 0;
  Matrix<double> x(kSteps * kBatch, kInput);
  LabelSequence labels(kSteps * kBatch, 0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (!layout.valid[r]) continue;
    for (auto& v : x.row(r)) v = gauss(rng);
    labels[r] = label(rng);
  }

  RunOptions<double> options;
  options.norm = NormMode::kTraining;
  for (auto* masks : {&options.forward_dropout, &options.backward_dropout})
    for (std::size_t h : config.hidden_sizes) {
      Matrix<double> m(kBatch, h);
      for (std::size_t b = 0; b < kBatch; ++b) {
        const auto v = recurrent_dropout_mask(h, config.dropout, rng);
        std::copy(v.begin(), v.end(), m.row(b).begin());
      }
      masks->emplace_back(std::move(m));
    }

  const Tensor<double> inputs(x);
  const auto weights = frame_weights<double>(layout);
  Objective f = [&]() {
    auto out = run_stack(net, inputs, layout, options);
    const auto nf = nll<double>(out.posteriors, labels, weights);
    const auto nb = nll<double>(out.backward_posteriors, labels, weights);
    std::vector<Tensor<double>> per_layer;
    for (std::size_t l = 0; l < out.forward.size(); ++l)
      per_layer.push_back(twin_penalty<double>(out.forward[l], out.backward[l], weights));
    return composite_loss<double>(nf.value, nb.value, multi_layer_penalty<double>(per_layer), 0.6)
        .objective;
  };
  std::vector<NamedTensor> params;
  for (const auto& p : net.parameters()) params.push_back({p.name, p.tensor});
  return gradcheck(f, params, tolerance);
}

}  // namespace twinseq
