#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "qve/error.hpp"
#include "qve/model.hpp"
#include "qve/serialize.hpp"

namespace qve {

namespace {

constexpr char kMagic[4] = {'Q', 'V', 'E', '1'};
constexpr int kFormatVersion = 1;

Json manifest_json(const ModelWeights& w) {
  Json manifest = Json::array();
  for_each_matrix(w, [&](const std::string& name, const Matrix& m) {
    manifest.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  return manifest;
}

std::string header_text(const ModelWeights& w) {
  Json header = {{"format", "QVE1"},
                 {"version", kFormatVersion},
                 {"config", config_to_json(w.config)},
                 {"manifest", manifest_json(w)}};
  return header.dump();
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }
std::string to_string(Normalization n) { return n == Normalization::none ? "none" : "rms"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "gelu") return Activation::gelu;
  fail(ErrorKind::input, "unknown activation '" + s + "'");
}

Normalization normalization_from_string(const std::string& s) {
  if (s == "none") return Normalization::none;
  if (s == "rms") return Normalization::rms;
  fail(ErrorKind::input, "unknown normalization '" + s + "'");
}

Json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_model", c.d_model},       {"d_ffn", c.d_ffn},
          {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
          {"activation", to_string(c.activation)},
          {"normalization", to_string(c.normalization)},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const Json& j) {
  static const std::set<std::string> keys = {"n_layers", "n_heads",       "d_model",
                                             "d_ffn",    "vocab_size",    "max_seq",
                                             "activation", "normalization", "seed"};
  if (!j.is_object()) fail(ErrorKind::shape_mismatch, "config is not an object");
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) fail(ErrorKind::shape_mismatch, "unknown config key '" + k + "'");
  }
  for (const auto& k : keys) {
    if (!j.contains(k)) fail(ErrorKind::shape_mismatch, "config missing key '" + k + "'");
  }
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ffn = j.at("d_ffn").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq = j.at("max_seq").get<int>();
    c.activation = activation_from_string(j.at("activation").get<std::string>());
    c.normalization = normalization_from_string(j.at("normalization").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const Json::exception& e) {
    fail(ErrorKind::shape_mismatch, std::string("bad config field: ") + e.what());
  }
  return c;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xf];
  return s;
}

std::string json_hash(const Json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return hex64(h);
}

std::size_t header_size(const ModelConfig& config) {
  return sizeof(kMagic) + 4 + header_text(zeros_like(config)).size();
}

std::vector<unsigned char> encode_model(const ModelWeights& w) {
  w.config.validate();
  const std::string header = header_text(w);
  std::vector<unsigned char> out(kMagic, kMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  out.reserve(out.size() + 4 * w.config.parameter_count());
  for_each_matrix(w, [&](const std::string&, const Matrix& m) {
    for (double x : m.storage()) {
      const std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
      put_u32(out, bits);
    }
  });
  return out;
}

ModelWeights decode_model(std::span<const unsigned char> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorKind::version_mismatch, "weight file magic is not QVE1");
  }
  if (bytes.size() < 8) fail(ErrorKind::truncated, "weight file ends inside the preamble");
  const std::uint32_t hlen = get_u32(bytes.data() + 4);
  if (bytes.size() < 8 + static_cast<std::size_t>(hlen)) {
    fail(ErrorKind::truncated, "weight file ends inside the JSON header");
  }
  Json header;
  try {
    header = Json::parse(bytes.begin() + 8, bytes.begin() + 8 + hlen);
  } catch (const Json::exception& e) {
    fail(ErrorKind::shape_mismatch, std::string("weight file header is not valid JSON: ") + e.what());
  }
  if (!header.contains("version") || header["version"] != kFormatVersion ||
      header.value("format", "") != "QVE1") {
    fail(ErrorKind::version_mismatch, "unsupported weight file version");
  }
  if (!header.contains("config") || !header.contains("manifest")) {
    fail(ErrorKind::shape_mismatch, "weight file header lacks config or manifest");
  }
  const ModelConfig config = config_from_json(header["config"]);
  try {
    config.validate();
  } catch (const Error& e) {
    fail(ErrorKind::shape_mismatch, std::string("invalid config in weight file: ") + e.what());
  }
  ModelWeights w = zeros_like(config);
  const Json expected = manifest_json(w);
  if (header["manifest"] != expected) {
    fail(ErrorKind::shape_mismatch, "weight file manifest does not match its configuration");
  }
  const std::size_t need = 8 + hlen + 4 * config.parameter_count();
  if (bytes.size() < need) fail(ErrorKind::truncated, "weight file payload is truncated");
  if (bytes.size() > need) fail(ErrorKind::shape_mismatch, "weight file has trailing bytes");
  const unsigned char* p = bytes.data() + 8 + hlen;
  for_each_matrix(w, [&](const std::string&, Matrix& m) {
    for (double& x : m.storage()) {
      x = static_cast<double>(std::bit_cast<float>(get_u32(p)));
      p += 4;
    }
  });
  return w;
}

void save_model(const ModelWeights& w, const std::string& path) {
  const auto bytes = encode_model(w);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::io, "failed writing '" + path + "'");
}

ModelWeights load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open '" + path + "' for reading");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_model(bytes);
}

}  // namespace qve
