#include <cmath>

#include "doctest.h"
#include "oracle.hpp"
#include "qve/attribution.hpp"
#include "qve/error.hpp"

using namespace qve;

namespace {

// Contribution vector, base and both scores from the oracle's pass.
struct NaiveScores {
  double value = 0.0;
  double dp = 0.0;
  oracle::Vec contribution;
};

NaiveScores naive_scores(const ModelWeights& w, const oracle::Result& o, const NeuronRef& ref,
                         int pos, int target) {
  const int d = w.config.d_model;
  oracle::Vec base = o.hidden[ref.layer][pos], v(d);
  if (ref.site == NeuronSite::ffn) {
    for (int k = 0; k < d; ++k) {
      base[k] += o.attn[ref.layer][pos][k];
      v[k] = o.coeffs[ref.layer][pos][ref.index] * w.layers[ref.layer].fc2(k, ref.index);
    }
  } else {
    const double z = o.z[ref.layer][ref.head][pos][ref.index];
    for (int k = 0; k < d; ++k) v[k] = z * w.layers[ref.layer].heads[ref.head].wo(k, ref.index);
  }
  oracle::Vec moved = base;
  for (int k = 0; k < d; ++k) moved[k] += v[k];
  NaiveScores s;
  const double lp1 = oracle::log_prob(w, moved, target), lp0 = oracle::log_prob(w, base, target);
  s.value = lp1 - lp0;
  s.dp = std::exp(lp1) - std::exp(lp0);
  s.contribution = v;
  return s;
}

NeuronRef random_ref(const ModelConfig& c, Rng& rng) {
  const auto site = rng.below(2) ? NeuronSite::ffn : NeuronSite::attn;
  const int layer = static_cast<int>(rng.below(c.n_layers));
  return neuron_at(c, site, layer, static_cast<int>(rng.below(neurons_per_layer(c, site))));
}

}  // namespace

TEST_SUITE("attribution") {

TEST_CASE("scores match the naive recomputation") {
  double worst = 0.0;
  for (std::uint64_t tr = 0; tr < 20; ++tr) {
    const ModelWeights w = oracle::random_model(100 + tr, 3, 2, 8, 12, 11, 6);
    Rng rng(tr);
    const auto tokens = oracle::random_tokens(rng, 11, 6);
    const ResidualTrace t = forward(w, tokens);
    const oracle::Result o = oracle::forward(w, tokens);
    for (int i = 0; i < 100; ++i) {
      const NeuronRef ref = random_ref(w.config, rng);
      const int pos = static_cast<int>(rng.below(tokens.size()));
      const int target = static_cast<int>(rng.below(11));
      const NaiveScores s = naive_scores(w, o, ref, pos, target);
      worst = std::max(worst, std::abs(value_importance(w, t, ref, target, pos) - s.value));
      worst = std::max(worst, std::abs(distribution_change(w, t, ref, target, pos) - s.dp));
      if (ref.layer + 1 < 3) {
        const int tl = ref.layer + 1 + static_cast<int>(rng.below(2 - ref.layer));
        const int ti = static_cast<int>(rng.below(12));
        const Vector v = neuron_contribution(w, t, ref, pos);
        double q = 0.0;
        for (int k = 0; k < 8; ++k) q += s.contribution[k] * w.layers[tl].fc1(ti, k);
        worst = std::max(worst, std::abs(query_importance(w, v, ref.layer, tl, ti) - q));
      }
    }
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("zero contributions score exactly zero") {
  ModelWeights w = oracle::random_model(3, 2, 2, 8, 12, 11, 6);
  for (int k = 0; k < 8; ++k) w.layers[1].fc2(k, 5) = 0.0;
  for (int k = 0; k < 8; ++k) w.layers[0].heads[1].wo(k, 2) = 0.0;
  const ResidualTrace t = forward(w, std::vector<int>{1, 2, 3});
  const NeuronRef f{NeuronSite::ffn, 1, -1, 5}, a{NeuronSite::attn, 0, 1, 2};
  for (int target = 0; target < 11; ++target) {
    CHECK(value_importance(w, t, f, target) == 0.0);
    CHECK(value_importance(w, t, a, target) == 0.0);
    CHECK(distribution_change(w, t, f, target) == 0.0);
  }
  CHECK(query_importance(w, Vector(8, 0.0), 0, 1, 3) == 0.0);
}

TEST_CASE("layer importance is the sum of neuron scores") {
  const ModelWeights w = oracle::random_model(12, 2, 2, 8, 12, 11, 6);
  const ResidualTrace t = forward(w, std::vector<int>{4, 4, 1});
  for (int l = 0; l < 2; ++l) {
    for (auto site : {NeuronSite::ffn, NeuronSite::attn}) {
      double s = 0.0;
      for (int k = 0; k < neurons_per_layer(w.config, site); ++k) {
        s += value_importance(w, t, neuron_at(w.config, site, l, k), 7);
      }
      CHECK(layer_importance(w, t, l, site, 7) == doctest::Approx(s).epsilon(1e-12));
    }
  }
}

TEST_CASE("probability change has the sign of the log-probability gain") {
  const ModelWeights w = oracle::random_model(13, 2, 2, 8, 12, 11, 6);
  const ResidualTrace t = forward(w, std::vector<int>{2, 9});
  for (int k = 0; k < 12; ++k) {
    const NeuronRef ref{NeuronSite::ffn, 1, -1, k};
    const double v = value_importance(w, t, ref, 3), dp = distribution_change(w, t, ref, 3);
    CHECK((v > 0) == (dp > 0));
    CHECK((v < 0) == (dp < 0));
  }
}

TEST_CASE("a planted value neuron ranks first") {
  ModelWeights w = oracle::random_model(14, 2, 2, 8, 12, 11, 6);
  const std::vector<int> tokens{3, 1, 5};
  const int target = 9, planted = 4;
  const ResidualTrace t0 = forward(w, tokens);
  const auto u = t0.layers[1].ffn_in.row(2);
  double uu = 0.0;
  for (double x : u) uu += x * x;
  for (int k = 0; k < 8; ++k) {
    w.layers[1].fc1(planted, k) = 3.0 * u[k] / uu;
    w.layers[1].fc2(k, planted) = w.unembed(target, k);
  }
  const ResidualTrace t = forward(w, tokens);
  CHECK(t.layers[1].ffn_coeffs(2, planted) == doctest::Approx(3.0));
  const auto top = top_value_neurons(w, t, target, 5);
  REQUIRE(!top.empty());
  CHECK(top.front().neuron == NeuronRef{NeuronSite::ffn, 1, -1, planted});

  // A layer-0 neuron writing along that subkey is the strongest query neuron.
  const int q = 7;
  const auto u0 = t.layers[0].ffn_in.row(2);
  double u0u0 = 0.0;
  for (double x : u0) u0u0 += x * x;
  for (int k = 0; k < 8; ++k) {
    w.layers[0].fc1(q, k) = 2.0 * u0[k] / u0u0;
    w.layers[0].fc2(k, q) = 4.0 * w.layers[1].fc1(planted, k);
  }
  const ResidualTrace t2 = forward(w, tokens);
  const auto targets = top_value_neurons(w, t2, target, 1);
  REQUIRE(targets.front().neuron.index == planted);
  const auto qs = layer_query_scores(w, t2, 0, NeuronSite::ffn, targets);
  CHECK(std::max_element(qs.begin(), qs.end()) - qs.begin() == q);
}

TEST_CASE("query scores need a deeper target layer") {
  const ModelWeights w = oracle::random_model(15);
  const Vector v(8, 1.0);
  CHECK_THROWS_AS(query_importance(w, v, 1, 1, 0), Error);
  CHECK_THROWS_AS(query_importance(w, v, 1, 0, 0), Error);
  CHECK_NOTHROW(query_importance(w, v, 0, 1, 0));
}

TEST_CASE("invalid refs are rejected") {
  const ModelWeights w = oracle::random_model(16);
  const ResidualTrace t = forward(w, std::vector<int>{1});
  CHECK_THROWS_AS(value_importance(w, t, {NeuronSite::ffn, 2, -1, 0}, 1), Error);
  CHECK_THROWS_AS(value_importance(w, t, {NeuronSite::ffn, 0, -1, 12}, 1), Error);
  CHECK_THROWS_AS(value_importance(w, t, {NeuronSite::ffn, 0, 0, 1}, 1), Error);
  CHECK_THROWS_AS(value_importance(w, t, {NeuronSite::attn, 0, 2, 0}, 1), Error);
  CHECK_THROWS_AS(value_importance(w, t, {NeuronSite::ffn, 0, -1, 0}, 11), Error);
}

TEST_CASE("ranking breaks ties by position") {
  std::vector<ImportanceRecord> r{{{NeuronSite::ffn, 1, -1, 3}, Role::value, 1.0, 0},
                                  {{NeuronSite::ffn, 0, -1, 9}, Role::value, 1.0, 0},
                                  {{NeuronSite::ffn, 0, -1, 2}, Role::value, 1.0, 0},
                                  {{NeuronSite::ffn, 2, -1, 0}, Role::value, 2.0, 0}};
  rank_records(r);
  CHECK(r[0].neuron.layer == 2);
  CHECK(r[1].neuron == NeuronRef{NeuronSite::ffn, 0, -1, 2});
  CHECK(r[2].neuron == NeuronRef{NeuronSite::ffn, 0, -1, 9});
  CHECK(r[3].neuron.layer == 1);
}

TEST_CASE("vocabulary projection orders by logit then token") {
  ModelWeights w = oracle::random_model(17);
  w.unembed.fill(0.0);
  w.unembed(6, 0) = 2.0;
  w.unembed(2, 0) = 1.0;
  w.unembed(8, 0) = 1.0;
  Vector x(8, 0.0);
  x[0] = 1.0;
  const auto top = project_to_vocab(w, x, 4);
  REQUIRE(top.size() == 4);
  CHECK(top[0].first == 6);
  CHECK(top[1].first == 2);
  CHECK(top[2].first == 8);
  CHECK(top[3].first == 0);
  CHECK(project_to_vocab(w, x, 0).empty());
  CHECK(project_to_vocab(w, x, 50).size() == 11);
}

TEST_CASE("report json carries the schema fields") {
  const ModelWeights w = oracle::random_model(18);
  const ResidualTrace t = forward(w, std::vector<int>{1, 2});
  ReportOptions opts;
  opts.top_k = 3;
  opts.seed = 5;
  const Json j = report_to_json(importance_report(w, t, 4, opts));
  for (const char* k : {"prompt", "target_token", "position", "site_totals", "top_neurons", "seed",
                        "config_hash"}) {
    CHECK(j.contains(k));
  }
  CHECK(j["top_neurons"].size() == 6);
  CHECK(j["site_totals"].size() == 2);
  CHECK(j["seed"] == 5);
}

}  // TEST_SUITE
