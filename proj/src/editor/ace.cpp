#include <algorithm>
#include <cmath>
#include <set>

#include "qve/editor.hpp"
#include "qve/error.hpp"

namespace qve {

void EditorConfig::validate() const {
  require(lambda > 0.0, "lambda must be positive");
  require(query_lambda >= 0.0, "query_lambda must be non-negative");
  require(mu >= 0.0 && mu <= 1.0, "mu must be in [0, 1]");
  require(phi_start > 0.0 && phi_final > 0.0, "phi must be positive");
  require(max_steps >= 1, "max_steps must be >= 1");
  require(learning_rate > 0.0, "learning_rate must be positive");
  require(kl_stop > 0.0 && nll_stop > 0.0, "stop thresholds must be positive");
  require(covariance_samples >= 1, "covariance_samples must be >= 1");
  require(n_value_layers >= 0 && n_query_layers >= 0, "layer counts must be non-negative");
  require(top_m >= 1, "top_m must be >= 1");
}

EditorConfig editor_preset(const std::string& name) {
  EditorConfig c;
  if (name == "desk") return c;
  if (name == "gptj") {
    c.lambda = 6000.0;
    c.covariance_samples = 100000;
    c.value_layers = {26, 27, 28};
    c.query_layers = {3, 4, 5, 6, 7, 8};
    return c;
  }
  if (name == "gptj-peak") {
    c.lambda = 6000.0;
    c.covariance_samples = 100000;
    c.value_layers = {26, 27, 28};
    c.query_layers = {16, 18};
    return c;
  }
  fail(ErrorKind::input, "unknown editor preset '" + name + "'");
}

Json editor_config_to_json(const EditorConfig& c) {
  return {{"lambda", c.lambda},
          {"mu", c.mu},
          {"phi_start", c.phi_start},
          {"phi_final", c.phi_final},
          {"max_steps", c.max_steps},
          {"learning_rate", c.learning_rate},
          {"kl_stop", c.kl_stop},
          {"nll_stop", c.nll_stop},
          {"covariance_samples", c.covariance_samples},
          {"value_layers", c.value_layers},
          {"query_layers", c.query_layers},
          {"n_value_layers", c.n_value_layers},
          {"n_query_layers", c.n_query_layers},
          {"top_m", c.top_m},
          {"skip_value", c.skip_value},
          {"skip_query", c.skip_query},
          {"reuse_value_targets", c.reuse_value_targets},
          {"seed", c.seed}};
}

namespace {

std::vector<int> rank_layers(const std::vector<double>& scores, int limit) {
  std::vector<int> order;
  for (int l = 0; l < limit; ++l) order.push_back(l);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return order;
}

void check_layers(const std::vector<int>& layers, int n_layers, const char* what) {
  for (int l : layers) {
    require(l >= 0 && l < n_layers, std::string(what) + " layer " + std::to_string(l) +
                                        " is outside a " + std::to_string(n_layers) +
                                        "-layer model");
  }
}

}  // namespace

CriticalLayers identify_critical_layers(const ModelWeights& w,
                                        const std::vector<std::vector<int>>& prompts,
                                        const std::vector<int>& targets, int top_m) {
  require(!prompts.empty(), "layer identification needs at least one prompt");
  require(prompts.size() == targets.size(), "one target per prompt is required");
  const int L = w.config.n_layers;
  CriticalLayers out;
  out.value_scores.assign(L, 0.0);
  out.query_scores.assign(L, 0.0);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const ResidualTrace t = forward(w, prompts[i]);
    for (int l = 0; l < L; ++l) {
      out.value_scores[l] += layer_importance(w, t, l, NeuronSite::ffn, targets[i]);
    }
    const auto top = top_value_neurons(w, t, targets[i], top_m);
    for (int l = 0; l + 1 < L; ++l) {
      for (double s : layer_query_scores(w, t, l, NeuronSite::ffn, top)) out.query_scores[l] += s;
    }
  }
  out.value_ranked = rank_layers(out.value_scores, L);
  out.query_ranked = rank_layers(out.query_scores, L - 1);
  return out;
}

SelectedLayers select_layers(const CriticalLayers& critical, const EditorConfig& cfg,
                             int n_layers) {
  SelectedLayers s;
  if (!cfg.value_layers.empty()) {
    s.value = cfg.value_layers;
  } else {
    for (int l : critical.value_ranked) {
      if (static_cast<int>(s.value.size()) == cfg.n_value_layers) break;
      s.value.push_back(l);
    }
  }
  check_layers(s.value, n_layers, "value");
  std::sort(s.value.begin(), s.value.end());
  s.value.erase(std::unique(s.value.begin(), s.value.end()), s.value.end());
  const int deepest = s.value.empty() ? n_layers : s.value.back();
  const std::set<int> taken(s.value.begin(), s.value.end());

  if (!cfg.query_layers.empty()) {
    s.query = cfg.query_layers;
    check_layers(s.query, n_layers, "query");
    for (int l : s.query) {
      require(!taken.count(l), "layer " + std::to_string(l) + " cannot be both value and query");
      require(l < deepest, "query layer " + std::to_string(l) +
                               " must precede the deepest value layer");
    }
  } else {
    for (int l : critical.query_ranked) {
      if (static_cast<int>(s.query.size()) == cfg.n_query_layers) break;
      if (!taken.count(l) && l < deepest) s.query.push_back(l);
    }
  }
  std::sort(s.query.begin(), s.query.end());
  s.query.erase(std::unique(s.query.begin(), s.query.end()), s.query.end());
  return s;
}

namespace {

std::vector<std::vector<int>> value_prompts(const EditRequest& e) {
  std::vector<std::vector<int>> out;
  for (const auto& pref : e.prefixes) {
    std::vector<int> p = pref;
    p.insert(p.end(), e.edit_prompt.begin(), e.edit_prompt.end());
    out.push_back(std::move(p));
  }
  if (out.empty()) out.push_back(e.edit_prompt);
  return out;
}

double target_probability(const ModelWeights& w, const std::vector<int>& prompt, int token) {
  return next_token_distribution(forward(w, prompt))[token];
}

double frobenius(const Matrix& m) {
  double s = 0.0;
  for (double x : m.storage()) s += x * x;
  return std::sqrt(s);
}

// Adds Delta to W_fc2^layer so that keys map closer to W K + shifts.
void edit_layer(ModelWeights& w, int layer, const Matrix& keys, const Matrix& shifts,
                const Matrix& c0, double lambda, EditReport& rep, const char* stage) {
  Matrix& fc2 = w.layers[layer].fc2;
  const std::size_t d = fc2.rows(), n = fc2.cols(), e = keys.cols();
  Matrix values(d, e);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = 0; c < e; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += fc2(i, k) * keys(k, c);
      values(i, c) = s + shifts(i, c);
    }
  }
  const Matrix delta = compute_delta(fc2, c0, keys, values, lambda, layer);
  for (std::size_t i = 0; i < fc2.storage().size(); ++i) fc2.storage()[i] += delta.storage()[i];
  for (double x : fc2.storage()) {
    if (!std::isfinite(x)) fail(ErrorKind::numeric, "non-finite weights after editing layer " + std::to_string(layer));
  }
  rep.delta_norms.push_back({layer, frobenius(delta)});
  rep.stages.push_back(stage);
}

void value_stage(ModelWeights& w, const Vocabulary& vocab, const std::vector<EditRequest>& edits,
                 const EditorConfig& cfg, CovarianceCache& cov, const ModelWeights& original,
                 const std::vector<int>& layers, std::vector<Vector>& deltas, EditReport& rep) {
  const int deepest = layers.back();
  const int d = w.config.d_model;
  // Desired residual state after the deepest layer, per (edit, context).
  std::vector<std::vector<int>> contexts;
  std::vector<Vector> goals;
  for (const auto& e : edits) {
    SearchProblem pb{deepest, value_prompts(e), vocab.entity(e.o_star), e.kl_prompt};
    const TargetVectorResult res = search_target_vector(w, pb, cfg);
    deltas.push_back(res.delta);
    for (const auto& p : pb.prompts) {
      const ResidualTrace t = forward(w, p);
      const auto h = t.hidden(deepest + 1, t.length() - 1);
      Vector g(h.begin(), h.end());
      for (int i = 0; i < d; ++i) g[i] += res.delta[i];
      contexts.push_back(p);
      goals.push_back(std::move(g));
    }
  }
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const int layer = layers[li];
    const double remaining = static_cast<double>(layers.size() - li);
    const Matrix keys = collect_keys(w, contexts, layer);
    Matrix shifts(d, contexts.size());
    for (std::size_t c = 0; c < contexts.size(); ++c) {
      const ResidualTrace t = forward(w, contexts[c]);
      const auto h = t.hidden(deepest + 1, t.length() - 1);
      for (int i = 0; i < d; ++i) shifts(i, c) = (goals[c][i] - h[i]) / remaining;
    }
    edit_layer(w, layer, keys, shifts, cov.get(original, layer), cfg.lambda, rep, "value");
  }
}

// Second pass over the query layers with the multi-hop prompts: each prompt
// gets a fresh target search toward its post-edit answer on the current
// weights. The single-hop prompts join the solve with zero shift so the
// value-stage edit survives.
void query_stage(ModelWeights& w, const std::vector<EditRequest>& edits, const EditorConfig& cfg,
                 CovarianceCache& cov, const ModelWeights& original, const std::vector<int>& layers,
                 const std::vector<Vector>& value_deltas, EditReport& rep) {
  const int d = w.config.d_model;
  const double lambda = cfg.query_lambda > 0.0 ? cfg.query_lambda : cfg.lambda;
  for (int layer : layers) {
    std::vector<std::vector<int>> contexts;
    std::vector<Vector> shifts;
    for (std::size_t ei = 0; ei < edits.size(); ++ei) {
      const auto& e = edits[ei];
      if (e.multi_hop_prompts.empty()) continue;
      for (std::size_t j = 0; j < e.multi_hop_prompts.size(); ++j) {
        contexts.push_back(e.multi_hop_prompts[j]);
        if (cfg.reuse_value_targets && ei < value_deltas.size()) {
          shifts.push_back(value_deltas[ei]);
        } else {
          const SearchProblem pb{layer, {e.multi_hop_prompts[j]}, e.multi_hop_targets[j], e.kl_prompt};
          shifts.push_back(search_target_vector(w, pb, cfg).delta);
        }
      }
      auto keep = value_prompts(e);
      keep.insert(keep.end(), e.paraphrases.begin(), e.paraphrases.end());
      for (auto& p : keep) {
        contexts.push_back(std::move(p));
        shifts.emplace_back(d, 0.0);
      }
    }
    if (contexts.empty()) continue;
    const Matrix keys = collect_keys(w, contexts, layer);
    Matrix shift_m(d, contexts.size());
    for (std::size_t c = 0; c < contexts.size(); ++c) {
      for (int i = 0; i < d; ++i) shift_m(i, c) = shifts[c][i];
    }
    edit_layer(w, layer, keys, shift_m, cov.get(original, layer), lambda, rep, "query");
  }
}

void check_edit(const ModelWeights& w, const Vocabulary& vocab, const EditRequest& e) {
  require(e.o != e.o_star, "edit must change the object");
  require(e.s >= 0 && e.s < vocab.n_entities && e.o >= 0 && e.o < vocab.n_entities &&
              e.o_star >= 0 && e.o_star < vocab.n_entities && e.r >= 0 && e.r < vocab.n_relations,
          "edit references an unknown entity or relation");
  require(vocab.size() <= w.config.vocab_size, "vocabulary exceeds the model's vocab_size");
  require(!e.edit_prompt.empty(), "edit prompt is empty");
  require(e.multi_hop_prompts.size() == e.multi_hop_targets.size(),
          "one multi-hop target per multi-hop prompt is required");
  const auto fits = [&](const std::vector<int>& p) {
    return static_cast<int>(p.size()) <= w.config.max_seq;
  };
  require(fits(e.kl_prompt), "KL prompt exceeds max_seq");
  for (const auto& p : value_prompts(e)) require(fits(p), "prefixed edit prompt exceeds max_seq");
  for (const auto& p : e.multi_hop_prompts) require(fits(p), "multi-hop prompt exceeds max_seq");
}

}  // namespace

EditReport apply_ace_in_place(ModelWeights& w, const Vocabulary& vocab,
                              const std::vector<EditRequest>& edits, const EditorConfig& cfg,
                              CovarianceCache& covariances) {
  cfg.validate();
  EditReport rep;
  rep.config = cfg;
  if (edits.empty()) return rep;
  for (const auto& e : edits) check_edit(w, vocab, e);

  const ModelWeights original = w;
  try {
    CriticalLayers critical;
    if (cfg.value_layers.empty() || cfg.query_layers.empty()) {
      std::vector<std::vector<int>> prompts;
      std::vector<int> targets;
      for (const auto& e : edits) {
        for (const auto& p : e.multi_hop_prompts) prompts.push_back(p);
      }
      if (prompts.empty()) {
        for (const auto& e : edits) prompts.push_back(e.edit_prompt);
      }
      for (const auto& p : prompts) targets.push_back(predict(w, p));
      critical = identify_critical_layers(w, prompts, targets, cfg.top_m);
    }
    rep.layers = select_layers(critical, cfg, w.config.n_layers);

    for (const auto& e : edits) {
      rep.edits.push_back({e.s, e.r, e.o, e.o_star,
                           target_probability(w, e.edit_prompt, vocab.entity(e.o_star)), 0.0});
    }
    std::vector<Vector> value_deltas;
    if (!cfg.skip_value && !rep.layers.value.empty()) {
      value_stage(w, vocab, edits, cfg, covariances, original, rep.layers.value, value_deltas, rep);
    }
    if (!cfg.skip_query && !rep.layers.query.empty()) {
      query_stage(w, edits, cfg, covariances, original, rep.layers.query, value_deltas, rep);
    }
    for (std::size_t i = 0; i < edits.size(); ++i) {
      rep.edits[i].p_after = target_probability(w, edits[i].edit_prompt, vocab.entity(edits[i].o_star));
    }
  } catch (...) {
    w = original;
    throw;
  }
  return rep;
}

AceResult apply_ace(const ModelWeights& w, const Vocabulary& vocab,
                    const std::vector<EditRequest>& edits, const EditorConfig& cfg,
                    CovarianceCache& covariances) {
  AceResult out{w, {}};
  out.report = apply_ace_in_place(out.weights, vocab, edits, cfg, covariances);
  return out;
}

Json edit_report_to_json(const EditReport& r) {
  Json edits = Json::array();
  for (const auto& e : r.edits) {
    edits.push_back({{"s", e.s}, {"r", e.r}, {"o", e.o}, {"o_star", e.o_star},
                     {"p_before", e.p_before}, {"p_after", e.p_after}});
  }
  Json norms = Json::array();
  for (std::size_t i = 0; i < r.delta_norms.size(); ++i) {
    norms.push_back({{"layer", r.delta_norms[i].first},
                     {"stage", r.stages[i]},
                     {"norm", r.delta_norms[i].second}});
  }
  return {{"edits", edits},
          {"layers", {{"value", r.layers.value}, {"query", r.layers.query}}},
          {"delta_norms", norms},
          {"config", editor_config_to_json(r.config)},
          {"seed", r.config.seed}};
}

std::vector<EditRequest> edits_from_json(const Json& j, const KnowledgeGraph& kg, int n_prefixes) {
  require(j.is_array(), "edit file must be a JSON list");
  require(n_prefixes >= 0 && n_prefixes <= kFillerCount, "n_prefixes must be in [0, 8]");
  const Vocabulary v(kg);
  std::vector<EditRequest> out;
  for (const auto& item : j) {
    EditRequest e;
    try {
      e.s = item.at("s").get<int>();
      e.r = item.at("r").get<int>();
      e.o = item.at("o").get<int>();
      e.o_star = item.at("o_star").get<int>();
    } catch (const Json::exception& ex) {
      fail(ErrorKind::input, std::string("malformed edit entry: ") + ex.what());
    }
    require(e.o != e.o_star, "edit must change the object");
    require(e.o_star >= 0 && e.o_star < kg.n_entities, "edit o_star is not a known entity");
    require(kg.object(e.s, e.r) == e.o, "edit (s, r, o) is not a fact of the knowledge graph");
    e.edit_prompt = render_fact(v, e.s, e.r, Template::cloze);
    e.paraphrases = {render_fact(v, e.s, e.r, Template::paraphrase_the),
                     render_fact(v, e.s, e.r, Template::paraphrase_tell)};
    e.prefixes.push_back({});
    for (int f = 0; f < n_prefixes; ++f) e.prefixes.push_back({v.filler(f)});
    e.kl_prompt = render_kl_prompt(v, e.s);
    for (const auto& ch : kg.chains) {
      if (ch.hops.size() < 2 || ch.hops.front().s != e.s || ch.hops.front().r != e.r) continue;
      int s = e.o_star;
      bool ok = true;
      std::vector<int> rels = {e.r};
      for (std::size_t h = 1; h < ch.hops.size() && ok; ++h) {
        const auto o = kg.object(s, ch.hops[h].r);
        rels.push_back(ch.hops[h].r);
        if (o) s = *o; else ok = false;
      }
      if (!ok) continue;
      for (bool qa : {false, true}) {
        e.multi_hop_prompts.push_back(render_chain(v, e.s, rels, qa));
        e.multi_hop_targets.push_back(v.entity(s));
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace qve
