#include "twinseq/cli/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace twinseq {

void ExperimentConfig::validate() const {
  if (id.empty()) throw ValidationError("experiment.id must not be empty");
  if (seeds.empty()) throw ValidationError("experiment.seeds must list at least one seed");
  hp.validate();
  if (bench_modes.empty() || bench_lambdas.empty() || bench_futures.empty())
    throw ValidationError("bench grids must be nonempty");
  for (double l : bench_lambdas)
    if (!(l >= 0)) throw ValidationError("bench.lambdas must be >= 0");
  synth.validate();
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  if (out.empty()) out.emplace_back();
  return out;
}

struct BadValue {
  std::string expected;
};

double to_double(const std::string& s) {
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) throw BadValue{"a number"};
  return v;
}

std::uint64_t to_uint(const std::string& s) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw BadValue{"a nonnegative integer"};
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw BadValue{"true or false"};
}

template <typename T, typename F>
std::vector<T> to_list(const std::string& s, F conv) {
  std::vector<T> out;
  for (const auto& item : split_list(s)) out.push_back(static_cast<T>(conv(item)));
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Prefer the shortest form that reads back identically.
  for (int prec = 1; prec <= 17; ++prec) {
    char shorter[32];
    std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
    if (std::strtod(shorter, nullptr) == v) return shorter;
  }
  return buf;
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += f(items[i]);
  }
  return out;
}

std::string u(std::uint64_t v) { return std::to_string(v); }
std::string b(bool v) { return v ? "true" : "false"; }

struct Key {
  std::string name;  // "section.key"
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define TW_KEY(name, field, parse, print)                                        \
  Key {                                                                          \
    name, [](ExperimentConfig& c, const std::string& v) { c.field = parse(v); }, \
        [](const ExperimentConfig& c) { return print(c.field); }                 \
  }

std::string mode_str(TrainMode m) { return std::string(to_string(m)); }
std::string variant_str(CellVariant v) { return std::string(to_string(v)); }
std::string precision_str(Precision p) { return std::string(to_string(p)); }
std::string ident(const std::string& s) { return s; }

TrainMode mode_of(const std::string& s) {
  try {
    return parse_train_mode(s);
  } catch (const ValidationError&) {
    throw BadValue{"one of unidir, unitwin, bidir"};
  }
}
CellVariant variant_of(const std::string& s) {
  try {
    return parse_cell_variant(s);
  } catch (const std::exception&) {
    throw BadValue{"one of lstm, gru, mgru, ligru"};
  }
}
Precision precision_of(const std::string& s) {
  try {
    return parse_precision(s);
  } catch (const ValidationError&) {
    throw BadValue{"float or double"};
  }
}
std::string nonempty(const std::string& s) {
  if (s.empty()) throw BadValue{"a nonempty string"};
  return s;
}
std::size_t size_of(const std::string& s) { return static_cast<std::size_t>(to_uint(s)); }

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      TW_KEY("experiment.id", id, nonempty, ident),
      TW_KEY("experiment.mode", mode, mode_of, mode_str),
      Key{"experiment.seeds",
          [](ExperimentConfig& c, const std::string& v) {
            c.seeds = to_list<std::uint64_t>(v, to_uint);
          },
          [](const ExperimentConfig& c) { return join(c.seeds, u); }},
      TW_KEY("experiment.output", output, nonempty, ident),
      TW_KEY("experiment.precision", hp.precision, precision_of, precision_str),

      TW_KEY("model.cell", hp.variant, variant_of, variant_str),
      Key{"model.hidden",
          [](ExperimentConfig& c, const std::string& v) {
            c.hp.hidden_sizes = to_list<std::size_t>(v, to_uint);
          },
          [](const ExperimentConfig& c) { return join(c.hp.hidden_sizes, u); }},
      TW_KEY("model.batch_norm", hp.batch_norm, to_bool, b),

      TW_KEY("train.learning_rate", hp.learning_rate, to_double, fmt),
      TW_KEY("train.lambda", hp.lambda, to_double, fmt),
      TW_KEY("train.dropout", hp.dropout, to_double, fmt),
      TW_KEY("train.batch_size", hp.batch_size, size_of, u),
      TW_KEY("train.epochs", hp.epochs, size_of, u),
      TW_KEY("train.clip_norm", hp.clip_norm, to_double, fmt),
      TW_KEY("train.rmsprop_alpha", hp.rmsprop.alpha, to_double, fmt),
      TW_KEY("train.rmsprop_eps", hp.rmsprop.eps, to_double, fmt),
      TW_KEY("train.twin_stop_backward_grad", hp.twin_stop_backward_grad, to_bool, b),

      TW_KEY("data.container", container, nonempty, ident),
      TW_KEY("data.manifest", manifest, nonempty, ident),
      TW_KEY("data.past", past, size_of, u),
      TW_KEY("data.future", future, size_of, u),

      Key{"bench.modes",
          [](ExperimentConfig& c, const std::string& v) {
            c.bench_modes = to_list<TrainMode>(v, mode_of);
          },
          [](const ExperimentConfig& c) { return join(c.bench_modes, mode_str); }},
      Key{"bench.lambdas",
          [](ExperimentConfig& c, const std::string& v) {
            c.bench_lambdas = to_list<double>(v, to_double);
          },
          [](const ExperimentConfig& c) { return join(c.bench_lambdas, fmt); }},
      Key{"bench.futures",
          [](ExperimentConfig& c, const std::string& v) {
            c.bench_futures = to_list<std::size_t>(v, to_uint);
          },
          [](const ExperimentConfig& c) { return join(c.bench_futures, u); }},

      TW_KEY("synth.name", synth.name, nonempty, ident),
      TW_KEY("synth.symbols", synth.symbols, size_of, u),
      TW_KEY("synth.classes", synth.classes, size_of, u),
      Key{"synth.mix",
          [](ExperimentConfig& c, const std::string& v) {
            const auto w = to_list<double>(v, to_double);
            if (w.size() != 3) throw BadValue{"three comma-separated weights"};
            c.synth.mix = {w[0], w[1], w[2]};
          },
          [](const ExperimentConfig& c) {
            return join(std::vector<double>(c.synth.mix.begin(), c.synth.mix.end()), fmt);
          }},
      TW_KEY("synth.noise", synth.noise, to_double, fmt),
      TW_KEY("synth.left_context", synth.left_context, to_bool, b),
      TW_KEY("synth.feature_dim", synth.feature_dim, size_of, u),
      TW_KEY("synth.min_length", synth.min_length, size_of, u),
      TW_KEY("synth.max_length", synth.max_length, size_of, u),
      TW_KEY("synth.min_segment", synth.min_segment, size_of, u),
      TW_KEY("synth.max_segment", synth.max_segment, size_of, u),
      TW_KEY("synth.train", synth.train_utterances, size_of, u),
      TW_KEY("synth.dev", synth.dev_utterances, size_of, u),
      TW_KEY("synth.test", synth.test_utterances, size_of, u),
      TW_KEY("synth.seed", synth.seed, to_uint, u),
  };
  return keys;
}

#undef TW_KEY

}  // namespace

ExperimentConfig parse_config(std::string_view text) {
  std::map<std::string, const Key*> by_name;
  for (const auto& k : registry()) by_name[k.name] = &k;

  ExperimentConfig config;
  std::set<std::string> seen;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw ValidationError("config line " + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail("malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + line + "'");
    if (section.empty()) fail("key outside of a [section]");
    const std::string name = section + "." + trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = by_name.find(name);
    if (it == by_name.end()) fail("unknown key '" + name + "'");
    if (!seen.insert(name).second) fail("duplicate key '" + name + "'");
    try {
      it->second->set(config, value);
    } catch (const BadValue& bad) {
      fail("'" + name + "' expects " + bad.expected + ", got '" + value + "'");
    }
  }
  if (!seen.count("experiment.mode")) {
    throw ValidationError("config: missing required key 'experiment.mode'");
  }
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& config) {
  std::string out, section;
  for (const auto& key : registry()) {
    const auto dot = key.name.find('.');
    const std::string sec = key.name.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += '\n';
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += key.name.substr(dot + 1) + " = " + key.get(config) + '\n';
  }
  return out;
}

}  // namespace twinseq
