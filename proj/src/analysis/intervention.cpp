#include "qve/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "qve/error.hpp"
#include "qve/rng.hpp"

namespace qve {

std::string to_string(AblationMode m) {
  return m == AblationMode::zero_subvalue ? "zero_subvalue" : "zero_coefficient";
}

ModelWeights ablate(const ModelWeights& w, const AblationSpec& spec) {
  for (const auto& ref : spec.neurons) validate_ref(w.config, ref);
  const std::set<NeuronRef> unique(spec.neurons.begin(), spec.neurons.end());
  ModelWeights out = w;
  for (const auto& ref : unique) {
    auto& layer = out.layers[ref.layer];
    if (ref.site == NeuronSite::ffn) {
      if (spec.mode == AblationMode::zero_subvalue) {
        for (std::size_t r = 0; r < layer.fc2.rows(); ++r) layer.fc2(r, ref.index) = 0.0;
      } else {
        for (double& x : layer.fc1.row(ref.index)) x = 0.0;
      }
    } else {
      auto& head = layer.heads[ref.head];
      if (spec.mode == AblationMode::zero_subvalue) {
        for (std::size_t r = 0; r < head.wo.rows(); ++r) head.wo(r, ref.index) = 0.0;
      } else {
        for (double& x : head.wv.row(ref.index)) x = 0.0;
      }
    }
  }
  return out;
}

double activation_threshold(const ModelWeights& w, const ResidualTrace& trace, int target,
                            double percentile) {
  require(percentile >= 0.0 && percentile <= 1.0, "percentile must be in [0, 1]");
  std::vector<double> all;
  for (int l = 0; l < trace.n_layers(); ++l) {
    const auto s = layer_value_scores(w, trace, l, NeuronSite::ffn, target);
    all.insert(all.end(), s.begin(), s.end());
  }
  std::sort(all.begin(), all.end());
  const auto rank = static_cast<std::size_t>(std::ceil(percentile * all.size()));
  return all[std::min(all.size() - 1, rank == 0 ? 0 : rank - 1)];
}

std::vector<int> count_activated_value_neurons(const ModelWeights& w, const ResidualTrace& trace,
                                               const std::vector<int>& layers, int target,
                                               double tau) {
  require(tau >= 0.0, "activation threshold must be non-negative");
  std::vector<int> counts;
  for (int l : layers) {
    int n = 0;
    for (double s : layer_value_scores(w, trace, l, NeuronSite::ffn, target)) n += s >= tau;
    counts.push_back(n);
  }
  return counts;
}

Json result_to_json(const InterventionResult& r) {
  Json ablated = Json::array();
  for (const auto& ref : r.ablated) {
    Json j = {{"site", to_string(ref.site)}, {"layer", ref.layer}, {"index", ref.index}};
    if (ref.site == NeuronSite::attn) j["head"] = ref.head;
    ablated.push_back(j);
  }
  return {{"experiment", r.experiment},       {"arm", r.arm},
          {"fraction", r.fraction},           {"seed", r.seed},
          {"baseline", r.baseline_accuracy},  {"ablated", r.ablated_accuracy},
          {"count_layers", r.count_layers},   {"counts_before", r.counts_before},
          {"counts_after", r.counts_after},   {"neurons", ablated}};
}

std::vector<ImportanceRecord> rank_value_neurons(const ModelWeights& w,
                                                 const std::vector<Example>& examples) {
  const auto& c = w.config;
  std::vector<double> total(static_cast<std::size_t>(c.n_layers) * c.d_ffn, 0.0);
  for (const auto& ex : examples) {
    const ResidualTrace trace = forward(w, ex.prompt);
    for (int l = 0; l < c.n_layers; ++l) {
      const auto s = layer_value_scores(w, trace, l, NeuronSite::ffn, ex.answer);
      for (int k = 0; k < c.d_ffn; ++k) total[l * c.d_ffn + k] += s[k];
    }
  }
  std::vector<ImportanceRecord> out;
  for (int l = 0; l < c.n_layers; ++l) {
    for (int k = 0; k < c.d_ffn; ++k) {
      out.push_back({{NeuronSite::ffn, l, -1, k}, Role::value, total[l * c.d_ffn + k], 0});
    }
  }
  rank_records(out);
  return out;
}

namespace {

// Accuracy over examples visited in a seeded order shared by every arm.
double ordered_accuracy(const ModelWeights& w, const std::vector<Example>& examples,
                        const std::vector<std::size_t>& order) {
  int correct = 0;
  for (std::size_t i : order) correct += predict(w, examples[i].prompt) == examples[i].answer;
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

bool multi_hop_correct(const ModelWeights& w, const EvalInstance& inst) {
  return predict(w, inst.cloze) == inst.answer || predict(w, inst.qa) == inst.answer;
}

}  // namespace

std::vector<InterventionResult> targeted_vs_random_experiment(
    const ModelWeights& w, const std::vector<Example>& examples, double fraction,
    const std::vector<std::uint64_t>& seeds) {
  require(!examples.empty(), "intervention needs a non-empty evaluation set");
  require(fraction >= 0.0 && fraction <= 1.0, "fraction must be in [0, 1]");
  const auto& c = w.config;
  const int total = c.n_layers * c.d_ffn;
  const int count = static_cast<int>(std::lround(fraction * total));
  const auto ranked = rank_value_neurons(w, examples);
  std::vector<NeuronRef> targeted;
  for (int i = 0; i < count; ++i) targeted.push_back(ranked[i].neuron);

  std::vector<InterventionResult> rows;
  for (std::uint64_t seed : seeds) {
    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng order_rng(Rng::derive(seed, 1));
    order_rng.shuffle(order);
    const double baseline = ordered_accuracy(w, examples, order);

    Rng pick(Rng::derive(seed, 2));
    std::vector<int> flat(total);
    for (int i = 0; i < total; ++i) flat[i] = i;
    pick.shuffle(flat);
    std::vector<NeuronRef> random;
    for (int i = 0; i < count; ++i) {
      random.push_back({NeuronSite::ffn, flat[i] / c.d_ffn, -1, flat[i] % c.d_ffn});
    }

    for (const auto& [arm, set] : {std::pair{"targeted", targeted}, std::pair{"random", random}}) {
      InterventionResult r;
      r.experiment = "targeted_vs_random";
      r.arm = arm;
      r.fraction = fraction;
      r.seed = seed;
      r.baseline_accuracy = baseline;
      r.ablated = set;
      r.ablated_accuracy =
          count == 0 ? baseline
                     : ordered_accuracy(ablate(w, {set, AblationMode::zero_subvalue}), examples,
                                        order);
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

QueryAblationOutcome query_ablation_experiment(const ModelWeights& w,
                                               const std::vector<EvalInstance>& instances,
                                               const QueryAblationOptions& opts) {
  require(!instances.empty(), "query ablation needs at least one instance");
  require(opts.q_top >= 0 && opts.peak_layers >= 1, "invalid query ablation options");
  const auto& c = w.config;
  const int rankable = c.n_layers - 1;
  require(rankable >= opts.peak_layers,
          "query ablation needs at least " + std::to_string(opts.peak_layers) +
              " rankable layers");

  struct PromptState {
    ResidualTrace trace;
    double tau = 0.0;
  };
  std::vector<PromptState> states;
  QueryAblationOutcome out;
  out.layer_scores.assign(c.n_layers, 0.0);
  std::vector<double> neuron_scores(static_cast<std::size_t>(c.n_layers) * c.d_ffn, 0.0);
  for (const auto& inst : instances) {
    PromptState st{forward(w, inst.cloze), 0.0};
    st.tau = std::max(0.0, activation_threshold(w, st.trace, inst.answer));
    const auto targets = top_value_neurons(w, st.trace, inst.answer, opts.top_m);
    for (int l = 0; l < rankable; ++l) {
      const auto s = layer_query_scores(w, st.trace, l, NeuronSite::ffn, targets);
      for (int k = 0; k < c.d_ffn; ++k) {
        out.layer_scores[l] += s[k];
        neuron_scores[l * c.d_ffn + k] += s[k];
      }
    }
    states.push_back(std::move(st));
  }

  std::vector<int> layers(rankable);
  for (int l = 0; l < rankable; ++l) layers[l] = l;
  std::stable_sort(layers.begin(), layers.end(), [&](int a, int b) {
    if (out.layer_scores[a] != out.layer_scores[b]) return out.layer_scores[a] > out.layer_scores[b];
    return a < b;
  });
  layers.resize(opts.peak_layers);
  std::sort(layers.begin(), layers.end());
  out.peak_layers = layers;

  std::vector<ImportanceRecord> candidates;
  for (int l : layers) {
    for (int k = 0; k < c.d_ffn; ++k) {
      candidates.push_back({{NeuronSite::ffn, l, -1, k}, Role::query, neuron_scores[l * c.d_ffn + k], 0});
    }
  }
  rank_records(candidates);
  const int count = std::min<int>(opts.q_top, static_cast<int>(candidates.size()));
  std::vector<NeuronRef> targeted;
  for (int i = 0; i < count; ++i) targeted.push_back(candidates[i].neuron);

  Rng pick(Rng::derive(opts.seed, 3));
  std::vector<int> flat(candidates.size());
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = static_cast<int>(i);
  pick.shuffle(flat);
  std::vector<NeuronRef> control;
  for (int i = 0; i < count; ++i) {
    control.push_back({NeuronSite::ffn, layers[flat[i] / c.d_ffn], -1, flat[i] % c.d_ffn});
  }

  std::vector<int> deeper;
  for (int l = layers.front() + 1; l < c.n_layers; ++l) deeper.push_back(l);

  auto run_arm = [&](const std::string& arm, const std::vector<NeuronRef>& set) {
    InterventionResult r;
    r.experiment = "query_ablation";
    r.arm = arm;
    r.fraction = static_cast<double>(count) / static_cast<double>(candidates.size());
    r.seed = opts.seed;
    r.count_layers = deeper;
    r.counts_before.assign(deeper.size(), 0);
    r.counts_after.assign(deeper.size(), 0);
    r.ablated = set;
    const ModelWeights ablated = count == 0 ? w : ablate(w, {set, AblationMode::zero_subvalue});
    int base_hits = 0, hits = 0;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      const auto& inst = instances[i];
      base_hits += multi_hop_correct(w, inst);
      hits += multi_hop_correct(ablated, inst);
      const auto before =
          count_activated_value_neurons(w, states[i].trace, deeper, inst.answer, states[i].tau);
      const ResidualTrace after_trace = forward(ablated, inst.cloze);
      const auto after =
          count_activated_value_neurons(ablated, after_trace, deeper, inst.answer, states[i].tau);
      for (std::size_t j = 0; j < deeper.size(); ++j) {
        r.counts_before[j] += before[j];
        r.counts_after[j] += after[j];
      }
    }
    r.baseline_accuracy = static_cast<double>(base_hits) / instances.size();
    r.ablated_accuracy = static_cast<double>(hits) / instances.size();
    return r;
  };
  out.targeted = run_arm("targeted", targeted);
  out.control = run_arm("control", control);
  return out;
}

}  // namespace qve
