#include "qve/attribution.hpp"

#include <algorithm>
#include <cmath>

#include "qve/error.hpp"
#include "qve/kernels.hpp"

namespace qve {

namespace {

int resolve_position(const ResidualTrace& trace, int position) {
  if (position < 0) position = trace.length() - 1;
  require(position < trace.length(), "attribution position out of range");
  return position;
}

double log_prob(std::span<const double> logits, int target) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double x : logits) s += std::exp(x - mx);
  return logits[target] - mx - std::log(s);
}

void check_target(const ModelWeights& w, int target) {
  require(target >= 0 && target < w.config.vocab_size, "target token out of range");
}

// Logits of base and of base + v through the unembedding.
struct PairLogits {
  Vector base;
  Vector shifted;
};

PairLogits pair_logits(const ModelWeights& w, const Vector& base, const Vector& v) {
  Vector moved(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) moved[i] = base[i] + v[i];
  return {unembed_logits(w, base), unembed_logits(w, moved)};
}

double score_against(const ModelWeights& w, const Vector& base, const Vector& base_logits,
                     const Vector& v, int target) {
  Vector moved(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) moved[i] = base[i] + v[i];
  const Vector logits = unembed_logits(w, moved);
  return log_prob(logits, target) - log_prob(base_logits, target);
}

}  // namespace

std::string to_string(NeuronSite s) { return s == NeuronSite::ffn ? "ffn" : "attn"; }
std::string to_string(Role r) { return r == Role::value ? "value" : "query"; }

void validate_ref(const ModelConfig& c, const NeuronRef& ref) {
  require(ref.layer >= 0 && ref.layer < c.n_layers, "neuron layer out of range");
  if (ref.site == NeuronSite::ffn) {
    require(ref.head == -1, "FFN neuron refs carry no head");
    require(ref.index >= 0 && ref.index < c.d_ffn, "FFN neuron index out of range");
  } else {
    require(ref.head >= 0 && ref.head < c.n_heads, "attention neuron head out of range");
    require(ref.index >= 0 && ref.index < c.head_dim(), "attention neuron index out of range");
  }
}

int neurons_per_layer(const ModelConfig& c, NeuronSite site) {
  return site == NeuronSite::ffn ? c.d_ffn : c.n_heads * c.head_dim();
}

NeuronRef neuron_at(const ModelConfig& c, NeuronSite site, int layer, int flat) {
  if (site == NeuronSite::ffn) return {site, layer, -1, flat};
  return {site, layer, flat / c.head_dim(), flat % c.head_dim()};
}

Vector neuron_contribution(const ModelWeights& w, const ResidualTrace& trace,
                           const NeuronRef& ref, int position) {
  validate_ref(w.config, ref);
  require(ref.layer < trace.n_layers(), "neuron layer beyond the trace");
  position = resolve_position(trace, position);
  const int d = w.config.d_model;
  Vector v(d);
  if (ref.site == NeuronSite::ffn) {
    const double m = trace.layers[ref.layer].ffn_coeffs(position, ref.index);
    const auto& fc2 = w.layers[ref.layer].fc2;
    for (int r = 0; r < d; ++r) v[r] = m * fc2(r, ref.index);
  } else {
    const double z = trace.layers[ref.layer].heads[ref.head].z(position, ref.index);
    const auto& wo = w.layers[ref.layer].heads[ref.head].wo;
    for (int r = 0; r < d; ++r) v[r] = z * wo(r, ref.index);
  }
  return v;
}

Vector attribution_base(const ResidualTrace& trace, const NeuronRef& ref, int position) {
  position = resolve_position(trace, position);
  require(ref.layer >= 0 && ref.layer < trace.n_layers(), "neuron layer beyond the trace");
  const auto& lt = trace.layers[ref.layer];
  const auto h = lt.h_prev.row(position);
  Vector base(h.begin(), h.end());
  if (ref.site == NeuronSite::ffn) {
    const auto a = lt.attn_out.row(position);
    for (std::size_t i = 0; i < base.size(); ++i) base[i] += a[i];
  }
  return base;
}

double value_importance(const ModelWeights& w, const ResidualTrace& trace, const NeuronRef& ref,
                        int target, int position) {
  check_target(w, target);
  const Vector v = neuron_contribution(w, trace, ref, position);
  const Vector base = attribution_base(trace, ref, position);
  return score_against(w, base, unembed_logits(w, base), v, target);
}

double distribution_change(const ModelWeights& w, const ResidualTrace& trace,
                           const NeuronRef& ref, int target, int position) {
  check_target(w, target);
  const Vector v = neuron_contribution(w, trace, ref, position);
  const Vector base = attribution_base(trace, ref, position);
  const PairLogits pl = pair_logits(w, base, v);
  return std::exp(log_prob(pl.shifted, target)) - std::exp(log_prob(pl.base, target));
}

std::vector<double> layer_value_scores(const ModelWeights& w, const ResidualTrace& trace,
                                       int layer, NeuronSite site, int target, int position) {
  check_target(w, target);
  position = resolve_position(trace, position);
  const int n = neurons_per_layer(w.config, site);
  const NeuronRef first = neuron_at(w.config, site, layer, 0);
  validate_ref(w.config, first);
  const Vector base = attribution_base(trace, first, position);
  const Vector base_logits = unembed_logits(w, base);
  std::vector<double> scores(n);
  for (int k = 0; k < n; ++k) {
    const Vector v = neuron_contribution(w, trace, neuron_at(w.config, site, layer, k), position);
    scores[k] = score_against(w, base, base_logits, v, target);
  }
  return scores;
}

double layer_importance(const ModelWeights& w, const ResidualTrace& trace, int layer,
                        NeuronSite site, int target, int position) {
  double total = 0.0;
  for (double s : layer_value_scores(w, trace, layer, site, target, position)) total += s;
  return total;
}

double query_importance(const ModelWeights& w, std::span<const double> v, int source_layer,
                        int target_layer, int target_index) {
  const auto& c = w.config;
  require(static_cast<int>(v.size()) == c.d_model, "query vector size must equal d_model");
  require(target_layer >= 0 && target_layer < c.n_layers, "target layer out of range");
  require(target_index >= 0 && target_index < c.d_ffn, "target neuron index out of range");
  require(target_layer > source_layer,
          "query layer " + std::to_string(source_layer) + " must precede value layer " +
              std::to_string(target_layer));
  return kernels::active().dot(v.data(), w.layers[target_layer].fc1.row(target_index).data(),
                               v.size());
}

void rank_records(std::vector<ImportanceRecord>& records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const ImportanceRecord& a, const ImportanceRecord& b) {
                     if (a.score != b.score) return a.score > b.score;
                     if (a.neuron.layer != b.neuron.layer) return a.neuron.layer < b.neuron.layer;
                     if (a.neuron.site != b.neuron.site) return a.neuron.site < b.neuron.site;
                     if (a.neuron.head != b.neuron.head) return a.neuron.head < b.neuron.head;
                     return a.neuron.index < b.neuron.index;
                   });
}

std::vector<ImportanceRecord> top_value_neurons(const ModelWeights& w, const ResidualTrace& trace,
                                                int target, int top_m, int position) {
  require(top_m >= 0, "top_m must be non-negative");
  std::vector<ImportanceRecord> all;
  for (int l = 0; l < trace.n_layers(); ++l) {
    const auto scores = layer_value_scores(w, trace, l, NeuronSite::ffn, target, position);
    for (int k = 0; k < static_cast<int>(scores.size()); ++k) {
      all.push_back({{NeuronSite::ffn, l, -1, k}, Role::value, scores[k], target});
    }
  }
  rank_records(all);
  if (static_cast<int>(all.size()) > top_m) all.resize(top_m);
  return all;
}

std::vector<double> layer_query_scores(const ModelWeights& w, const ResidualTrace& trace,
                                       int layer, NeuronSite site,
                                       const std::vector<ImportanceRecord>& targets,
                                       int position) {
  position = resolve_position(trace, position);
  const int n = neurons_per_layer(w.config, site);
  // Summing the deeper subkeys first turns each neuron's score into one dot
  // product; the result equals the per-target sum up to rounding.
  const int d = w.config.d_model;
  Vector key_sum(d, 0.0);
  for (const auto& t : targets) {
    if (t.neuron.site != NeuronSite::ffn || t.neuron.layer <= layer) continue;
    validate_ref(w.config, t.neuron);
    const auto row = w.layers[t.neuron.layer].fc1.row(t.neuron.index);
    for (int i = 0; i < d; ++i) key_sum[i] += row[i];
  }
  std::vector<double> scores(n, 0.0);
  for (int k = 0; k < n; ++k) {
    const Vector v = neuron_contribution(w, trace, neuron_at(w.config, site, layer, k), position);
    scores[k] = kernels::active().dot(v.data(), key_sum.data(), d);
  }
  return scores;
}

ImportanceReport importance_report(const ModelWeights& w, const ResidualTrace& trace, int target,
                                   const ReportOptions& opts) {
  require(opts.top_k >= 0, "top_k must be non-negative");
  ImportanceReport rep;
  rep.prompt = trace.tokens;
  rep.target = target;
  rep.position = resolve_position(trace, opts.position);
  rep.seed = opts.seed;
  rep.config_hash = json_hash(config_to_json(w.config));
  const auto targets = top_value_neurons(w, trace, target, opts.top_m, rep.position);

  std::vector<ImportanceRecord> values, queries;
  for (int l = 0; l < trace.n_layers(); ++l) {
    for (NeuronSite site : {NeuronSite::ffn, NeuronSite::attn}) {
      const auto vs = layer_value_scores(w, trace, l, site, target, rep.position);
      const auto qs = layer_query_scores(w, trace, l, site, targets, rep.position);
      double vt = 0.0, qt = 0.0;
      for (int k = 0; k < static_cast<int>(vs.size()); ++k) {
        vt += vs[k];
        qt += qs[k];
        const NeuronRef ref = neuron_at(w.config, site, l, k);
        values.push_back({ref, Role::value, vs[k], target});
        queries.push_back({ref, Role::query, qs[k], target});
      }
      (site == NeuronSite::ffn ? rep.ffn_value_totals : rep.attn_value_totals).push_back(vt);
      (site == NeuronSite::ffn ? rep.ffn_query_totals : rep.attn_query_totals).push_back(qt);
    }
  }
  rank_records(values);
  rank_records(queries);
  const auto keep = static_cast<std::size_t>(opts.top_k);
  if (values.size() > keep) values.resize(keep);
  if (queries.size() > keep) queries.resize(keep);
  rep.top_neurons = values;
  rep.top_neurons.insert(rep.top_neurons.end(), queries.begin(), queries.end());
  return rep;
}

Json record_to_json(const ImportanceRecord& r) {
  Json j = {{"site", to_string(r.neuron.site)}, {"layer", r.neuron.layer}};
  if (r.neuron.site == NeuronSite::attn) j["head"] = r.neuron.head;
  j["index"] = r.neuron.index;
  j["role"] = to_string(r.role);
  j["score"] = r.score;
  return j;
}

Json report_to_json(const ImportanceReport& r) {
  Json top = Json::array();
  for (const auto& rec : r.top_neurons) top.push_back(record_to_json(rec));
  Json totals = Json::array();
  for (std::size_t l = 0; l < r.ffn_value_totals.size(); ++l) {
    totals.push_back({{"layer", l},
                      {"ffn_value", r.ffn_value_totals[l]},
                      {"attn_value", r.attn_value_totals[l]},
                      {"ffn_query", r.ffn_query_totals[l]},
                      {"attn_query", r.attn_query_totals[l]}});
  }
  return {{"prompt", r.prompt},     {"target_token", r.target},     {"position", r.position},
          {"site_totals", totals},  {"top_neurons", top},           {"seed", r.seed},
          {"config_hash", r.config_hash}};
}

std::vector<std::pair<int, double>> project_to_vocab(const ModelWeights& w,
                                                     std::span<const double> x, int top_k) {
  require(top_k >= 0, "top_k must be non-negative");
  for (double v : x) require(std::isfinite(v), "projected vector must be finite");
  const Vector logits = unembed_logits(w, x);
  std::vector<std::pair<int, double>> out;
  for (int t = 0; t < static_cast<int>(logits.size()); ++t) out.push_back({t, logits[t]});
  const auto k = std::min<std::size_t>(top_k, out.size());
  std::partial_sort(out.begin(), out.begin() + k, out.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  out.resize(k);
  return out;
}

}  // namespace qve
