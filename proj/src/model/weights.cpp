#include <bit>
#include <cmath>
#include <string>

#include "qve/error.hpp"
#include "qve/model.hpp"
#include "qve/rng.hpp"

namespace qve {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::input: return "input";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::version_mismatch: return "version-mismatch";
    case ErrorKind::truncated: return "truncated";
    case ErrorKind::shape_mismatch: return "shape-mismatch";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

void ModelConfig::validate() const {
  require(n_layers >= 1, "n_layers must be >= 1");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(d_model >= 1, "d_model must be >= 1");
  require(d_ffn >= 1, "d_ffn must be >= 1");
  require(vocab_size >= 2, "vocab_size must be >= 2");
  require(max_seq >= 1, "max_seq must be >= 1");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t d = d_model, b = vocab_size, t = max_seq, n = d_ffn;
  const std::size_t per_layer = 4 * d * d + 2 * n * d;
  return 2 * b * d + t * d + n_layers * per_layer;
}

ModelWeights zeros_like(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model, dh = config.head_dim();
  ModelWeights w;
  w.config = config;
  w.embed = Matrix(config.vocab_size, d);
  w.pos = Matrix(config.max_seq, d);
  w.unembed = Matrix(config.vocab_size, d);
  w.layers.resize(config.n_layers);
  for (auto& layer : w.layers) {
    layer.heads.resize(config.n_heads);
    for (auto& h : layer.heads) {
      h.wq = Matrix(dh, d);
      h.wk = Matrix(dh, d);
      h.wv = Matrix(dh, d);
      h.wo = Matrix(d, dh);
    }
    layer.fc1 = Matrix(config.d_ffn, d);
    layer.fc2 = Matrix(d, config.d_ffn);
  }
  return w;
}

ModelWeights initialize(const ModelConfig& config) {
  ModelWeights w = zeros_like(config);
  Rng rng(config.seed);
  const double d = config.d_model, dh = config.head_dim(), n = config.d_ffn;
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  auto fill = [&](Matrix& m, double stddev) {
    for (double& x : m.storage()) x = stddev * rng.normal();
  };
  fill(w.embed, 1.0 / std::sqrt(d));
  fill(w.pos, 0.5 / std::sqrt(d));
  fill(w.unembed, 1.0 / std::sqrt(d));
  for (auto& layer : w.layers) {
    for (auto& h : layer.heads) {
      fill(h.wq, 1.0 / std::sqrt(d));
      fill(h.wk, 1.0 / std::sqrt(d));
      fill(h.wv, 1.0 / std::sqrt(d));
      fill(h.wo, residual_scale / std::sqrt(dh));
    }
    fill(layer.fc1, 1.0 / std::sqrt(d));
    fill(layer.fc2, residual_scale * std::sqrt(2.0 / n));
  }
  return w;
}

namespace {

template <typename W, typename F>
void visit_matrices(W& w, F&& f) {
  f(std::string("embed"), w.embed);
  f(std::string("pos"), w.pos);
  f(std::string("unembed"), w.unembed);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& layer = w.layers[l];
    const std::string lp = "layers." + std::to_string(l) + ".";
    for (std::size_t j = 0; j < layer.heads.size(); ++j) {
      auto& h = layer.heads[j];
      const std::string hp = lp + "heads." + std::to_string(j) + ".";
      f(hp + "wq", h.wq);
      f(hp + "wk", h.wk);
      f(hp + "wv", h.wv);
      f(hp + "wo", h.wo);
    }
    f(lp + "fc1", layer.fc1);
    f(lp + "fc2", layer.fc2);
  }
}

}  // namespace

void for_each_matrix(ModelWeights& w, const std::function<void(const std::string&, Matrix&)>& f) {
  visit_matrices(w, f);
}

void for_each_matrix(const ModelWeights& w,
                     const std::function<void(const std::string&, const Matrix&)>& f) {
  visit_matrices(w, f);
}

std::uint64_t weights_digest(const ModelWeights& w) {
  // FNV-1a over config fields and raw parameter bits.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  const auto& c = w.config;
  for (int v : {c.n_layers, c.n_heads, c.d_model, c.d_ffn, c.vocab_size, c.max_seq,
                static_cast<int>(c.activation), static_cast<int>(c.normalization)}) {
    mix(static_cast<std::uint64_t>(v));
  }
  mix(c.seed);
  for_each_matrix(w, [&](const std::string&, const Matrix& m) {
    mix(m.rows());
    mix(m.cols());
    for (double x : m.storage()) mix(std::bit_cast<std::uint64_t>(x));
  });
  return h;
}

void round_to_storage_precision(ModelWeights& w) {
  for_each_matrix(w, [](const std::string&, Matrix& m) {
    for (double& x : m.storage()) x = static_cast<double>(static_cast<float>(x));
  });
}

}  // namespace qve
