#include "twinseq/cli/model_io.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace twinseq {

namespace {

using nlohmann::json;

template <typename Scalar>
std::vector<Matrix<Scalar>*> running_stats(Network<Scalar>& net) {
  std::vector<Matrix<Scalar>*> out;
  for (auto* layers : {&net.forward_layers, &net.backward_layers})
    for (auto& layer : *layers)
      for (auto& gate : layer.gates)
        if (gate.bn) {
          out.push_back(&gate.bn->running_mean);
          out.push_back(&gate.bn->running_var);
        }
  return out;
}

json header_of(const ModelMeta& meta) {
  const auto& c = meta.config;
  return json{{"format", "twinseq-model"},
              {"mode", std::string(to_string(c.mode))},
              {"variant", std::string(to_string(c.variant))},
              {"input_size", c.input_size},
              {"hidden_sizes", c.hidden_sizes},
              {"num_classes", c.num_classes},
              {"dropout", c.dropout},
              {"batch_norm", c.batch_norm},
              {"precision", std::string(to_string(meta.precision))},
              {"feature_dim", meta.feature_dim},
              {"past", meta.past},
              {"future", meta.future},
              {"priors", meta.priors}};
}

ModelMeta meta_of(const json& h) {
  ModelMeta m;
  m.config.mode = parse_stack_mode(h.at("mode").get<std::string>());
  m.config.variant = parse_cell_variant(h.at("variant").get<std::string>());
  m.config.input_size = h.at("input_size").get<std::size_t>();
  m.config.hidden_sizes = h.at("hidden_sizes").get<std::vector<std::size_t>>();
  m.config.num_classes = h.at("num_classes").get<std::size_t>();
  m.config.dropout = h.at("dropout").get<double>();
  m.config.batch_norm = h.at("batch_norm").get<bool>();
  m.precision = parse_precision(h.at("precision").get<std::string>());
  m.feature_dim = h.at("feature_dim").get<std::size_t>();
  m.past = h.at("past").get<std::size_t>();
  m.future = h.at("future").get<std::size_t>();
  m.priors = h.at("priors").get<std::vector<double>>();
  m.config.validate();
  return m;
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw ValidationError(path + ": truncated model");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

// Host is little-endian on every supported target; doubles go out raw.
void write_values(std::ostream& out, const Matrix<double>& m) {
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
}

json read_header(std::istream& in, const std::string& path) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kModelMagic, 4) != 0)
    throw ValidationError(path + ": not a model file (bad magic)");
  const auto version = read_u32(in, path);
  if (version != kModelVersion)
    throw ValidationError(path + ": unsupported model version " + std::to_string(version));
  const auto len = read_u32(in, path);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw ValidationError(path + ": truncated header");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": malformed header: " + e.what());
  }
}

}  // namespace

template <typename Scalar>
void save_model(const std::filesystem::path& path, const Network<Scalar>& net,
                const ModelMeta& meta) {
  json header = header_of(meta);
  json shapes = json::array();
  for (const auto& p : net.parameters())
    shapes.push_back({{"name", p.name}, {"rows", p.tensor.rows()}, {"cols", p.tensor.cols()}});
  header["parameters"] = shapes;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model file '" + path.string() + "'");
  out.write(kModelMagic, 4);
  write_u32(out, kModelVersion);
  write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : net.parameters()) write_values(out, p.tensor.value().template cast<double>());
  Network<Scalar> alias = net;  // shares tensors; only used to reach the stats
  for (const auto* m : running_stats(alias)) write_values(out, m->template cast<double>());
  if (!out) throw IoError("failed writing model file '" + path.string() + "'");
}

ModelMeta read_model_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file '" + path.string() + "'");
  try {
    return meta_of(read_header(in, path.string()));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": bad header field: " + e.what());
  }
}

template <typename Scalar>
Network<Scalar> load_model(const std::filesystem::path& path, ModelMeta* meta_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file '" + path.string() + "'");
  const std::string where = path.string();
  const json header = read_header(in, where);
  ModelMeta meta;
  try {
    meta = meta_of(header);
  } catch (const json::exception& e) {
    throw ValidationError(where + ": bad header field: " + e.what());
  }
  Network<Scalar> net = Network<Scalar>::zeros(meta.config);
  const auto params = net.parameters();
  const auto& shapes = header.at("parameters");
  if (shapes.size() != params.size())
    throw ValidationError(where + ": parameter count does not match the architecture");

  auto read_into = [&](Matrix<Scalar>& m) {
    Matrix<double> buf(m.rows(), m.cols());
    if (!in.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(double))))
      throw ValidationError(where + ": truncated parameter data");
    m = buf.cast<Scalar>();
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& s = shapes[i];
    if (s.at("name").get<std::string>() != params[i].name ||
        s.at("rows").get<std::size_t>() != params[i].tensor.rows() ||
        s.at("cols").get<std::size_t>() != params[i].tensor.cols())
      throw ValidationError(where + ": parameter '" + params[i].name + "' does not match");
    Tensor<Scalar> t = params[i].tensor;
    read_into(t.mutable_value());
  }
  for (auto* m : running_stats(net)) read_into(*m);
  if (in.peek() != std::char_traits<char>::eof())
    throw ValidationError(where + ": trailing data after parameters");
  if (meta_out) *meta_out = meta;
  return net;
}

template void save_model(const std::filesystem::path&, const Network<float>&, const ModelMeta&);
template void save_model(const std::filesystem::path&, const Network<double>&, const ModelMeta&);
template Network<float> load_model(const std::filesystem::path&, ModelMeta*);
template Network<double> load_model(const std::filesystem::path&, ModelMeta*);

}  // namespace twinseq
