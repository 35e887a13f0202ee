#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "twinseq/data/corpus.hpp"

namespace twinseq {

namespace {

using json = nlohmann::json;

void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}

  void read(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw ValidationError("corpus container '" + path_ + "' is truncated");
    }
  }
  std::uint16_t u16() {
    unsigned char b[2];
    read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    unsigned char b[4];
    read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  float f32() { return std::bit_cast<float>(u32()); }

 private:
  std::istream& is_;
  std::string path_;
};

}  // namespace

void write_corpus(const Corpus& corpus, const std::filesystem::path& container,
                  const std::filesystem::path& manifest) {
  corpus.validate();
  std::ofstream os(container, std::ios::binary);
  if (!os) throw IoError("cannot write corpus container '" + container.string() + "'");
  os.write(kCorpusMagic, 4);
  put_u32(os, kCorpusVersion);
  put_u32(os, static_cast<std::uint32_t>(corpus.feature_dim));
  put_u32(os, static_cast<std::uint32_t>(corpus.num_classes));

  json entries = json::array();
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) {
    const auto& u = corpus.utterances[i];
    if (u.id.size() > 0xffff) throw ValidationError("utterance id too long: " + u.id);
    const auto offset = static_cast<std::uint64_t>(os.tellp());
    put_u16(os, static_cast<std::uint16_t>(u.id.size()));
    os.write(u.id.data(), static_cast<std::streamsize>(u.id.size()));
    put_u32(os, static_cast<std::uint32_t>(u.length()));
    for (float v : u.frames) put_f32(os, v);
    for (auto y : u.labels) put_u32(os, y);
    const auto bytes = static_cast<std::uint64_t>(os.tellp()) - offset;
    entries.push_back({{"id", u.id},
                       {"offset", offset},
                       {"bytes", bytes},
                       {"frames", u.length()},
                       {"split", std::string(to_string(corpus.splits[i]))}});
  }
  if (!os) throw IoError("failed writing '" + container.string() + "'");

  json m;
  m["format"] = "twinseq-corpus";
  m["version"] = kCorpusVersion;
  m["name"] = corpus.name;
  m["container"] = container.filename().string();
  m["feature_dim"] = corpus.feature_dim;
  m["num_classes"] = corpus.num_classes;
  m["priors"] = corpus.priors;
  if (std::isnan(corpus.ambiguity_ceiling)) {
    m["ambiguity_ceiling"] = nullptr;
  } else {
    m["ambiguity_ceiling"] = corpus.ambiguity_ceiling;
  }
  m["utterances"] = std::move(entries);
  std::ofstream ms(manifest);
  if (!ms) throw IoError("cannot write manifest '" + manifest.string() + "'");
  ms << m.dump(2) << '\n';
}

Corpus read_corpus(const std::filesystem::path& container,
                   const std::filesystem::path& manifest) {
  std::ifstream ms(manifest);
  if (!ms) throw IoError("cannot open manifest '" + manifest.string() + "'");
  json m;
  try {
    m = json::parse(ms);
  } catch (const json::exception& e) {
    throw ValidationError("manifest '" + manifest.string() + "' is not valid JSON: " + e.what());
  }

  Corpus corpus;
  std::vector<json> entries;
  try {
    corpus.name = m.at("name").get<std::string>();
    corpus.feature_dim = m.at("feature_dim").get<std::size_t>();
    corpus.num_classes = m.at("num_classes").get<std::size_t>();
    corpus.priors = m.at("priors").get<std::vector<double>>();
    const auto& ceiling = m.at("ambiguity_ceiling");
    if (!ceiling.is_null()) corpus.ambiguity_ceiling = ceiling.get<double>();
    entries = m.at("utterances").get<std::vector<json>>();
  } catch (const json::exception& e) {
    throw ValidationError("manifest '" + manifest.string() + "': " + e.what());
  }

  std::ifstream is(container, std::ios::binary);
  if (!is) throw IoError("cannot open corpus container '" + container.string() + "'");
  Reader in(is, container.string());
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, kCorpusMagic, 4) != 0) {
    throw ValidationError("'" + container.string() + "' is not a corpus container (bad magic)");
  }
  const std::uint32_t version = in.u32();
  if (version != kCorpusVersion) {
    throw ValidationError("unsupported corpus container version " + std::to_string(version));
  }
  const std::uint32_t dim = in.u32();
  const std::uint32_t classes = in.u32();
  if (dim != corpus.feature_dim || classes != corpus.num_classes) {
    throw ValidationError("container header (" + std::to_string(dim) + " features, " +
                          std::to_string(classes) + " classes) disagrees with manifest");
  }

  for (const auto& entry : entries) {
    FeatureSequence u;
    const auto length = in.u16();
    u.id.resize(length);
    in.read(u.id.data(), length);
    const std::uint32_t frames = in.u32();
    u.dim = dim;
    u.frames.resize(static_cast<std::size_t>(frames) * dim);
    for (auto& v : u.frames) v = in.f32();
    u.labels.resize(frames);
    for (auto& y : u.labels) y = in.u32();
    try {
      if (entry.at("id").get<std::string>() != u.id || entry.at("frames").get<std::size_t>() != frames) {
        throw ValidationError("manifest entry '" + entry.at("id").get<std::string>() +
                              "' does not match container utterance '" + u.id + "'");
      }
      corpus.splits.push_back(parse_split(entry.at("split").get<std::string>()));
    } catch (const json::exception& e) {
      throw ValidationError("manifest utterance entry: " + std::string(e.what()));
    }
    corpus.utterances.push_back(std::move(u));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw ValidationError("container '" + container.string() +
                          "' holds more utterances than the manifest lists");
  }
  corpus.validate();
  return corpus;
}

}  // namespace twinseq
