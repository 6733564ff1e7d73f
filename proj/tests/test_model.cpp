#include <cmath>
#include <vector>

#include "doctest.h"
#include "oracle.hpp"
#include "qve/error.hpp"
#include "qve/model.hpp"

using namespace qve;

namespace {

double rel_diff(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

LogitLoss cross_entropy(int target) {
  return [target](std::span<const double> logits) {
    LossEval e;
    e.grad = softmax(logits);
    e.value = -std::log(e.grad[target]);
    e.grad[target] -= 1.0;
    return e;
  };
}

double loss_at(const ModelWeights& w, const std::vector<int>& tokens, const Injection& inj,
               int target) {
  const ResidualTrace t = forward(w, tokens, std::span<const Injection>(&inj, 1));
  return -log_softmax(t.final_logits)[target];
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("one-layer hand example") {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_model = 2;
  c.d_ffn = 2;
  c.vocab_size = 2;
  c.max_seq = 2;
  ModelWeights w = zeros_like(c);
  w.embed(0, 0) = 1.0;
  w.embed(1, 1) = 1.0;
  // Identity value/output maps, zero query/key: uniform attention.
  auto& h = w.layers[0].heads[0];
  h.wv(0, 0) = h.wv(1, 1) = 1.0;
  h.wo(0, 0) = h.wo(1, 1) = 1.0;
  // fc1 picks coordinate 0 and -coordinate 1; fc2 writes neuron 0 into coordinate 1.
  w.layers[0].fc1(0, 0) = 1.0;
  w.layers[0].fc1(1, 1) = -1.0;
  w.layers[0].fc2(1, 0) = 2.0;
  w.unembed(0, 0) = 1.0;
  w.unembed(1, 1) = 1.0;

  // tokens [0, 1]: h0 = e0, h1 = e1; position 1 attends 1/2, 1/2.
  const ResidualTrace t = forward(w, std::vector<int>{0, 1});
  CHECK(t.layers[0].heads[0].alpha(1, 0) == 0.5);
  CHECK(t.layers[0].attn_out(1, 0) == 0.5);
  CHECK(t.layers[0].attn_out(1, 1) == 0.5);
  // u = (0.5, 1.5); pre = (0.5, -1.5); m = (0.5, 0); F = (0, 1)
  CHECK(t.layers[0].ffn_coeffs(1, 0) == 0.5);
  CHECK(t.layers[0].ffn_coeffs(1, 1) == 0.0);
  CHECK(t.final_hidden(1, 0) == 0.5);
  CHECK(t.final_hidden(1, 1) == 2.5);
  CHECK(t.final_logits[0] == 0.5);
  CHECK(t.final_logits[1] == 2.5);
}

TEST_CASE("zero weights give the uniform distribution") {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.vocab_size = 13;
  c.max_seq = 5;
  const ModelWeights w = zeros_like(c);
  const Vector p = next_token_distribution(forward(w, std::vector<int>{3, 1, 4}));
  for (double x : p) CHECK(x == doctest::Approx(1.0 / 13).epsilon(1e-15));
}

TEST_CASE("forward matches the naive oracle") {
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    const auto act = seed % 2 ? Activation::relu : Activation::gelu;
    const ModelWeights w = oracle::random_model(seed, 3, 2, 8, 12, 11, 6, act);
    Rng rng(seed * 31);
    const auto tokens = oracle::random_tokens(rng, 11, 6);
    const ResidualTrace t = forward(w, tokens);
    const oracle::Result o = oracle::forward(w, tokens);
    for (int l = 0; l <= 3; ++l) {
      for (int i = 0; i < t.length(); ++i) {
        CHECK(rel_diff(t.hidden(l, i), o.hidden[l][i]) < 1e-12);
      }
    }
    CHECK(rel_diff(t.final_logits, o.logits) < 1e-12);
  }
}

TEST_CASE("decompositions reconstruct the residual stream") {
  double worst_res = 0.0, worst_ffn = 0.0, worst_attn = 0.0;
  for (std::uint64_t seed = 1; seed <= 1000; ++seed) {
    const ModelWeights w = oracle::random_model(seed, 2, 2, 8, 12, 11, 6);
    Rng rng(seed);
    const auto tokens = oracle::random_tokens(rng, 11, 6);
    const ResidualTrace t = forward(w, tokens);
    const int pos = static_cast<int>(rng.below(tokens.size()));
    for (int l = 0; l < 2; ++l) {
      const auto& lt = t.layers[l];
      Vector sum(8), f(8, 0.0), a(8, 0.0);
      for (int k = 0; k < 8; ++k) sum[k] = lt.h_prev(pos, k) + lt.attn_out(pos, k) + lt.ffn_out(pos, k);
      worst_res = std::max(worst_res, rel_diff(sum, t.hidden(l + 1, pos)));
      for (const auto& c : ffn_neuron_contributions(w, t, l, pos)) {
        for (int k = 0; k < 8; ++k) f[k] += c.vector[k];
      }
      worst_ffn = std::max(worst_ffn, rel_diff(f, lt.ffn_out.row(pos)));
      for (const auto& c : attn_subvalue_contributions(w, t, l, pos)) {
        for (int k = 0; k < 8; ++k) a[k] += c.vector[k];
      }
      worst_attn = std::max(worst_attn, rel_diff(a, lt.attn_out.row(pos)));
    }
  }
  CHECK(worst_res < 1e-5);
  CHECK(worst_ffn < 1e-5);
  CHECK(worst_attn < 1e-5);
}

TEST_CASE("a zero injection is bit-identical to no injection") {
  const ModelWeights w = oracle::random_model(3);
  const std::vector<int> tokens{1, 2, 3, 4};
  const ResidualTrace base = forward(w, tokens);
  for (auto site : {InjectionSite::ffn_output, InjectionSite::post_attn_residual}) {
    const Injection inj{2, 1, site, Vector(8, 0.0)};
    const ResidualTrace t = forward(w, tokens, std::span<const Injection>(&inj, 1));
    CHECK(t.final_logits == base.final_logits);
    CHECK(t.final_hidden == base.final_hidden);
  }
}

TEST_CASE("injection shifts the residual at its site") {
  const ModelWeights w = oracle::random_model(4);
  const std::vector<int> tokens{1, 2, 3};
  Vector delta(8);
  for (int k = 0; k < 8; ++k) delta[k] = 0.1 * (k + 1);
  const Injection inj{2, 1, InjectionSite::ffn_output, delta};
  const ResidualTrace base = forward(w, tokens);
  const ResidualTrace t = forward(w, tokens, std::span<const Injection>(&inj, 1));
  for (int k = 0; k < 8; ++k) {
    CHECK(t.final_hidden(2, k) == doctest::Approx(base.final_hidden(2, k) + delta[k]).epsilon(1e-12));
  }
}

TEST_CASE("gradient matches central finite differences") {
  int checked = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    const auto act = seed % 3 == 0 ? Activation::gelu : Activation::relu;
    const ModelWeights w = oracle::random_model(seed + 500, 3, 2, 8, 12, 11, 6, act);
    Rng rng(seed);
    const auto tokens = oracle::random_tokens(rng, 11, 6);
    const int n = static_cast<int>(tokens.size());
    Injection inj;
    inj.position = static_cast<int>(rng.below(n));
    inj.layer = static_cast<int>(rng.below(3));
    inj.site = rng.below(2) ? InjectionSite::ffn_output : InjectionSite::post_attn_residual;
    // The last layer only reaches the read-out through the last position.
    if (inj.layer == 2) inj.position = n - 1;
    inj.delta.resize(8);
    for (double& x : inj.delta) x = 0.3 * rng.normal();
    const int target = static_cast<int>(rng.below(11));

    const Vector g = grad_wrt_injection(w, tokens, inj, cross_entropy(target));
    Vector fd(8);
    const double h = 1e-5;
    for (int k = 0; k < 8; ++k) {
      Injection plus = inj, minus = inj;
      plus.delta[k] += h;
      minus.delta[k] -= h;
      fd[k] = (loss_at(w, tokens, plus, target) - loss_at(w, tokens, minus, target)) / (2 * h);
    }
    CHECK(rel_diff(g, fd) <= 1e-3);
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("last-layer gradient has the closed form") {
  const ModelWeights w = oracle::random_model(9, 2, 2, 8, 12, 11, 6);
  const std::vector<int> tokens{5, 2, 7};
  const int target = 4;
  const Injection inj{2, 1, InjectionSite::ffn_output, Vector(8, 0.0)};
  const Vector g = grad_wrt_injection(w, tokens, inj, cross_entropy(target));
  Vector p = next_token_distribution(forward(w, tokens));
  p[target] -= 1.0;
  for (int k = 0; k < 8; ++k) {
    double e = 0.0;
    for (int b = 0; b < 11; ++b) e += w.unembed(b, k) * p[b];
    CHECK(g[k] == doctest::Approx(e).epsilon(1e-12));
  }
}

TEST_CASE("forward is deterministic") {
  const ModelWeights w = oracle::random_model(21);
  const std::vector<int> tokens{1, 9, 3, 0, 2};
  CHECK(forward(w, tokens).final_logits == forward(w, tokens).final_logits);
  CHECK(weights_digest(initialize(w.config)) == weights_digest(initialize(w.config)));
}

TEST_CASE("invalid tokens are input errors") {
  const ModelWeights w = oracle::random_model(2);
  auto kind_of = [&](const std::vector<int>& t) {
    try {
      forward(w, t);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::io;
  };
  CHECK(kind_of({}) == ErrorKind::input);
  CHECK(kind_of({11}) == ErrorKind::input);
  CHECK(kind_of({-1}) == ErrorKind::input);
  CHECK(kind_of({1, 1, 1, 1, 1, 1, 1}) == ErrorKind::input);
}

TEST_CASE("non-finite activations are numeric errors") {
  ModelWeights w = oracle::random_model(2);
  w.embed(3, 0) = INFINITY;
  CHECK_THROWS_AS(forward(w, std::vector<int>{3}), Error);
  try {
    forward(w, std::vector<int>{3});
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::numeric);
  }
}

TEST_CASE("backward accumulates parameter gradients consistent with finite differences") {
  ModelWeights w = oracle::random_model(77, 2, 2, 8, 12, 11, 6);
  const std::vector<int> tokens{3, 1, 4, 1};
  const int target = 6;
  const ResidualTrace t = forward(w, tokens);
  Vector gl = softmax(t.final_logits);
  gl[target] -= 1.0;
  ModelWeights grads = zeros_like(w.config);
  backward(w, t, gl, &grads);
  auto loss = [&](const ModelWeights& m) {
    return -log_softmax(forward(m, tokens).final_logits)[target];
  };
  const double h = 1e-6;
  auto probe = [&](auto getter) {
    for (int r = 0; r < 2; ++r) {
      ModelWeights plus = w, minus = w;
      double& p = getter(plus, r);
      double& m = getter(minus, r);
      p += h;
      m -= h;
      const double fd = (loss(plus) - loss(minus)) / (2 * h);
      CHECK(getter(grads, r) == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
    }
  };
  probe([](ModelWeights& m, int r) -> double& { return m.embed(4, r); });
  probe([](ModelWeights& m, int r) -> double& { return m.unembed(target, r); });
  probe([](ModelWeights& m, int r) -> double& { return m.pos(2, r + 3); });
  probe([](ModelWeights& m, int r) -> double& { return m.layers[0].fc1(r + 1, 2); });
  probe([](ModelWeights& m, int r) -> double& { return m.layers[1].fc2(3, r); });
  probe([](ModelWeights& m, int r) -> double& { return m.layers[0].heads[1].wq(r, 5); });
  probe([](ModelWeights& m, int r) -> double& { return m.layers[1].heads[0].wk(1, r); });
  probe([](ModelWeights& m, int r) -> double& { return m.layers[0].heads[0].wv(r, 0); });
  probe([](ModelWeights& m, int r) -> double& { return m.layers[1].heads[1].wo(6, r); });
}

TEST_CASE("rms normalization keeps gradients exact") {
  ModelConfig c = oracle::random_model(1).config;
  c.normalization = Normalization::rms;
  ModelWeights w = oracle::random_model(1);
  w.config = c;
  const std::vector<int> tokens{2, 7, 1};
  Injection inj{1, 0, InjectionSite::post_attn_residual, Vector(8, 0.05)};
  const Vector g = grad_wrt_injection(w, tokens, inj, cross_entropy(3));
  Vector fd(8);
  const double h = 1e-5;
  for (int k = 0; k < 8; ++k) {
    Injection plus = inj, minus = inj;
    plus.delta[k] += h;
    minus.delta[k] -= h;
    fd[k] = (loss_at(w, tokens, plus, 3) - loss_at(w, tokens, minus, 3)) / (2 * h);
  }
  CHECK(rel_diff(g, fd) <= 1e-3);
}

}  // TEST_SUITE
