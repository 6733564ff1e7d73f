#include "qve/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "qve/error.hpp"
#include "qve/rng.hpp"

namespace qve {

namespace {

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used == v.size()) return static_cast<int>(x);
  } catch (const std::exception&) {
  }
  fail(ErrorKind::input, "config key '" + key + "' expects an integer, got '" + v + "'");
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used == v.size() && v.front() != '-') return x;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::input, "config key '" + key + "' expects an unsigned integer, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::input, "config key '" + key + "' expects a number, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::input, "config key '" + key + "' expects true or false, got '" + v + "'");
}

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& key, const std::string& v, Parse parse) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse(key, item));
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto integer = [&](const std::string& k, auto field) {
      t[k] = [field](RunConfig& c, const std::string& key, const std::string& v) {
        field(c) = parse_int(key, v);
      };
    };
    auto real = [&](const std::string& k, auto field) {
      t[k] = [field](RunConfig& c, const std::string& key, const std::string& v) {
        field(c) = parse_double(key, v);
      };
    };
    auto flag = [&](const std::string& k, auto field) {
      t[k] = [field](RunConfig& c, const std::string& key, const std::string& v) {
        field(c) = parse_bool(key, v);
      };
    };
    auto layers = [&](const std::string& k, auto field) {
      t[k] = [field](RunConfig& c, const std::string& key, const std::string& v) {
        field(c) = parse_list<int>(key, v, parse_int);
      };
    };
    t["seed"] = [](RunConfig& c, const std::string& key, const std::string& v) {
      c.seed = parse_u64(key, v);
    };

    integer("kg.n_entities", [](RunConfig& c) -> int& { return c.kg.n_entities; });
    integer("kg.n_relations", [](RunConfig& c) -> int& { return c.kg.n_relations; });
    integer("kg.chains_per_category", [](RunConfig& c) -> int& { return c.kg.chains_per_category; });
    integer("kg.hops", [](RunConfig& c) -> int& { return c.kg.hops; });
    integer("kg.pool_size", [](RunConfig& c) -> int& { return c.kg.pool_size; });
    integer("kg.extra_facts", [](RunConfig& c) -> int& { return c.kg.extra_facts; });

    integer("model.n_layers", [](RunConfig& c) -> int& { return c.model.n_layers; });
    integer("model.n_heads", [](RunConfig& c) -> int& { return c.model.n_heads; });
    integer("model.d_model", [](RunConfig& c) -> int& { return c.model.d_model; });
    integer("model.d_ffn", [](RunConfig& c) -> int& { return c.model.d_ffn; });
    integer("model.max_seq", [](RunConfig& c) -> int& { return c.model.max_seq; });
    t["model.activation"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.model.activation = activation_from_string(v);
    };
    t["model.normalization"] = [](RunConfig& c, const std::string&, const std::string& v) {
      c.model.normalization = normalization_from_string(v);
    };

    integer("train.epochs", [](RunConfig& c) -> int& { return c.train.epochs; });
    real("train.lr", [](RunConfig& c) -> double& { return c.train.lr; });
    real("train.lr_final_fraction", [](RunConfig& c) -> double& { return c.train.lr_final_fraction; });
    integer("train.batch_size", [](RunConfig& c) -> int& { return c.train.batch_size; });
    real("train.beta1", [](RunConfig& c) -> double& { return c.train.beta1; });
    real("train.beta2", [](RunConfig& c) -> double& { return c.train.beta2; });
    real("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
    real("train.grad_clip", [](RunConfig& c) -> double& { return c.train.grad_clip; });
    flag("train.tie_embeddings", [](RunConfig& c) -> bool& { return c.train.tie_embeddings; });

    real("editor.lambda", [](RunConfig& c) -> double& { return c.editor.lambda; });
    real("editor.query_lambda", [](RunConfig& c) -> double& { return c.editor.query_lambda; });
    real("editor.mu", [](RunConfig& c) -> double& { return c.editor.mu; });
    real("editor.phi_start", [](RunConfig& c) -> double& { return c.editor.phi_start; });
    real("editor.phi_final", [](RunConfig& c) -> double& { return c.editor.phi_final; });
    integer("editor.max_steps", [](RunConfig& c) -> int& { return c.editor.max_steps; });
    real("editor.learning_rate", [](RunConfig& c) -> double& { return c.editor.learning_rate; });
    real("editor.kl_stop", [](RunConfig& c) -> double& { return c.editor.kl_stop; });
    real("editor.nll_stop", [](RunConfig& c) -> double& { return c.editor.nll_stop; });
    integer("editor.covariance_samples", [](RunConfig& c) -> int& { return c.editor.covariance_samples; });
    layers("editor.value_layers", [](RunConfig& c) -> std::vector<int>& { return c.editor.value_layers; });
    layers("editor.query_layers", [](RunConfig& c) -> std::vector<int>& { return c.editor.query_layers; });
    integer("editor.n_value_layers", [](RunConfig& c) -> int& { return c.editor.n_value_layers; });
    integer("editor.n_query_layers", [](RunConfig& c) -> int& { return c.editor.n_query_layers; });
    integer("editor.top_m", [](RunConfig& c) -> int& { return c.editor.top_m; });
    flag("editor.skip_value", [](RunConfig& c) -> bool& { return c.editor.skip_value; });
    flag("editor.skip_query", [](RunConfig& c) -> bool& { return c.editor.skip_query; });
    flag("editor.reuse_value_targets", [](RunConfig& c) -> bool& { return c.editor.reuse_value_targets; });

    t["experiment.seeds"] = [](RunConfig& c, const std::string& key, const std::string& v) {
      c.experiment.seeds = parse_list<std::uint64_t>(key, v, parse_u64);
    };
    real("experiment.storage_fraction", [](RunConfig& c) -> double& { return c.experiment.storage_fraction; });
    integer("experiment.query_top", [](RunConfig& c) -> int& { return c.experiment.query_top; });
    integer("experiment.peak_layers", [](RunConfig& c) -> int& { return c.experiment.peak_layers; });
    integer("experiment.query_instances", [](RunConfig& c) -> int& { return c.experiment.query_instances; });
    integer("experiment.edit_instances", [](RunConfig& c) -> int& { return c.experiment.edit_instances; });
    integer("experiment.probes", [](RunConfig& c) -> int& { return c.experiment.probes; });
    integer("experiment.n_prefixes", [](RunConfig& c) -> int& { return c.experiment.n_prefixes; });
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

ArmMetrics mean_of(const std::vector<ArmMetrics>& v) {
  ArmMetrics m;
  for (const auto& x : v) {
    m.multi_hop += x.multi_hop;
    m.efficacy += x.efficacy;
    m.paraphrase += x.paraphrase;
    m.specificity += x.specificity;
  }
  const double n = std::max<std::size_t>(v.size(), 1);
  m.multi_hop /= n;
  m.efficacy /= n;
  m.paraphrase /= n;
  m.specificity /= n;
  return m;
}

Json arm_json(const ArmMetrics& m) {
  return {{"multi_hop", m.multi_hop},
          {"efficacy", m.efficacy},
          {"paraphrase", m.paraphrase},
          {"specificity", m.specificity}};
}

std::vector<std::vector<int>> corpus_prompts(const KnowledgeGraph& kg) {
  std::vector<std::vector<int>> out;
  for (const auto& ex : build_corpus(kg).examples) out.push_back(ex.prompt);
  return out;
}

}  // namespace

double median(std::vector<double> v) {
  require(!v.empty(), "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

RunConfig reference_config(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  c.model.n_layers = 6;
  c.model.n_heads = 4;
  c.model.d_model = 64;
  c.model.d_ffn = 256;
  c.model.max_seq = 8;
  // ReLU leaves some edit prompts with an all-zero key at a value layer,
  // which no update of W_fc2 can reach.
  c.model.activation = Activation::gelu;
  // Few objects per category, many relations and many chains: the densest
  // graph that still trains to full single-hop accuracy, which gives the best
  // two-hop composition this model size reaches.
  c.kg.pool_size = 8;
  c.kg.n_relations = 16;
  c.kg.chains_per_category = 100;
  c.kg.extra_facts = 0;
  c.train.tie_embeddings = true;
  // Residual norms here reach ~100 while lr 0.2 moves delta by at most
  // ~1.6 per step, so the unprefixed edit prompt often stays unsolved.
  c.editor.max_steps = 100;
  c.editor.learning_rate = 1.0;
  // Query layers are shallow and their keys are shared by every prompt about
  // the subject, so they need stronger preservation than value layers.
  c.editor.query_lambda = 3000.0;
  return c;
}

void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  const auto& t = setters();
  const auto it = t.find(key);
  if (it == t.end()) fail(ErrorKind::input, "unknown config key '" + key + "'");
  it->second(c, key, value);
}

void load_config_file(RunConfig& c, const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::io, "cannot read config file '" + path + "'");
  std::string line;
  int number = 0;
  while (std::getline(f, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorKind::input, path + ":" + std::to_string(number) + ": expected key=value");
    }
    set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : setters()) keys.push_back(k);
  return keys;
}

RunConfig resolved(const RunConfig& c) {
  RunConfig r = c;
  r.kg.seed = c.seed;
  r.model.seed = c.seed;
  r.train.seed = c.seed;
  r.editor.seed = c.seed;
  return r;
}

Json run_config_to_json(const RunConfig& c0) {
  const RunConfig c = resolved(c0);
  Json model = config_to_json(c.model);
  model.erase("vocab_size");
  return {{"seed", c.seed},
          {"kg",
           {{"n_entities", c.kg.n_entities},
            {"n_relations", c.kg.n_relations},
            {"chains_per_category", c.kg.chains_per_category},
            {"hops", c.kg.hops},
            {"pool_size", c.kg.pool_size},
            {"extra_facts", c.kg.extra_facts}}},
          {"model", model},
          {"train",
           {{"epochs", c.train.epochs},
            {"lr", c.train.lr},
            {"lr_final_fraction", c.train.lr_final_fraction},
            {"batch_size", c.train.batch_size},
            {"beta1", c.train.beta1},
            {"beta2", c.train.beta2},
            {"weight_decay", c.train.weight_decay},
            {"grad_clip", c.train.grad_clip},
            {"tie_embeddings", c.train.tie_embeddings}}},
          {"editor", editor_config_to_json(c.editor)},
          {"experiment",
           {{"seeds", c.experiment.seeds},
            {"storage_fraction", c.experiment.storage_fraction},
            {"query_top", c.experiment.query_top},
            {"peak_layers", c.experiment.peak_layers},
            {"query_instances", c.experiment.query_instances},
            {"edit_instances", c.experiment.edit_instances},
            {"probes", c.experiment.probes},
            {"n_prefixes", c.experiment.n_prefixes}}}};
}

Json provenance(const Json& config, std::uint64_t seed) {
  return {{"tool", "qve"}, {"version", kToolVersion}, {"config_hash", json_hash(config)},
          {"seed", seed}};
}

Reference build_reference(const RunConfig& c0) {
  const RunConfig c = resolved(c0);
  Reference ref;
  ref.kg = generate_kg(c.kg);
  ModelConfig mc = c.model;
  mc.vocab_size = Vocabulary(ref.kg).size();
  ref.model = train_toy(mc, build_corpus(ref.kg), c.train, &ref.log);
  return ref;
}

std::vector<Example> single_hop_cloze(const KnowledgeGraph& kg) {
  const Vocabulary v(kg);
  std::vector<Example> out;
  for (const auto& f : kg.facts) {
    out.push_back({render_fact(v, f.s, f.r, Template::cloze), v.entity(f.o)});
  }
  return out;
}

std::vector<Example> two_hop_cloze(const KnowledgeGraph& kg) {
  std::vector<Example> out;
  for (const auto& inst : chain_instances(kg)) {
    if (inst.chain.hops.size() == 2) out.push_back({inst.cloze, inst.answer});
  }
  return out;
}

std::vector<EvalInstance> answerable_chains(const ModelWeights& w, const KnowledgeGraph& kg) {
  const auto all = chain_instances(kg);
  std::vector<EvalInstance> out;
  for (int i : filter_answerable(w, all).kept) out.push_back(all[i]);
  return out;
}

// --- storage clustering ------------------------------------------------------------

StorageOutcome storage_experiment(const Reference& ref, const RunConfig& c) {
  const Vocabulary v(ref.kg);
  StorageOutcome out;
  std::vector<double> td, rd;
  for (std::uint64_t seed : c.experiment.seeds) {
    Rng pick(Rng::derive(seed, 4));
    const int category = static_cast<int>(pick.below(kCategoryCount));
    std::vector<Example> examples;
    for (const auto& f : ref.kg.facts) {
      if (ref.kg.relation_category[f.r] == category) {
        examples.push_back({render_fact(v, f.s, f.r, Template::cloze), v.entity(f.o)});
      }
    }
    const auto rows = targeted_vs_random_experiment(ref.model, examples,
                                                    c.experiment.storage_fraction, {seed});
    StorageRow row;
    row.seed = seed;
    row.category = category;
    row.n_examples = static_cast<int>(examples.size());
    row.n_ablated = static_cast<int>(rows[0].ablated.size());
    row.baseline = rows[0].baseline_accuracy;
    row.targeted = rows[0].ablated_accuracy;
    row.random = rows[1].ablated_accuracy;
    td.push_back(row.baseline - row.targeted);
    rd.push_back(row.baseline - row.random);
    out.rows.push_back(row);
  }
  out.median_targeted_drop = median(td);
  out.median_random_drop = median(rd);
  return out;
}

Json storage_to_json(const StorageOutcome& o) {
  Json rows = Json::array();
  for (const auto& r : o.rows) {
    rows.push_back({{"seed", r.seed},
                    {"category", category_names()[r.category]},
                    {"examples", r.n_examples},
                    {"ablated_neurons", r.n_ablated},
                    {"baseline", r.baseline},
                    {"targeted", r.targeted},
                    {"random", r.random}});
  }
  return {{"rows", rows},
          {"median_targeted_drop", o.median_targeted_drop},
          {"median_random_drop", o.median_random_drop}};
}

// --- query ablation ---------------------------------------------------------------

QueryOutcome query_experiment(const Reference& ref, const RunConfig& c) {
  const auto pool = answerable_chains(ref.model, ref.kg);
  require(!pool.empty(), "no answerable chains for the query ablation");
  QueryOutcome out;
  std::vector<double> ta, ca, ba, tc, cc, bc;
  auto total = [](const std::vector<int>& v) {
    double s = 0.0;
    for (int x : v) s += x;
    return s;
  };
  for (std::uint64_t seed : c.experiment.seeds) {
    std::vector<EvalInstance> instances = pool;
    Rng rng(Rng::derive(seed, 5));
    rng.shuffle(instances);
    if (static_cast<int>(instances.size()) > c.experiment.query_instances) {
      instances.resize(c.experiment.query_instances);
    }
    QueryAblationOptions opts;
    opts.q_top = c.experiment.query_top;
    opts.peak_layers = c.experiment.peak_layers;
    opts.top_m = c.editor.top_m;
    opts.seed = seed;
    QueryRow row{seed, query_ablation_experiment(ref.model, instances, opts)};
    const auto& o = row.outcome;
    ta.push_back(o.targeted.ablated_accuracy);
    ca.push_back(o.control.ablated_accuracy);
    ba.push_back(o.targeted.baseline_accuracy);
    tc.push_back(total(o.targeted.counts_after));
    cc.push_back(total(o.control.counts_after));
    bc.push_back(total(o.targeted.counts_before));
    out.rows.push_back(std::move(row));
  }
  out.median_targeted_accuracy = median(ta);
  out.median_control_accuracy = median(ca);
  out.median_baseline_accuracy = median(ba);
  out.median_targeted_counts = median(tc);
  out.median_control_counts = median(cc);
  out.median_baseline_counts = median(bc);
  return out;
}

Json query_to_json(const QueryOutcome& o) {
  Json rows = Json::array();
  for (const auto& r : o.rows) {
    rows.push_back({{"seed", r.seed},
                    {"peak_layers", r.outcome.peak_layers},
                    {"layer_scores", r.outcome.layer_scores},
                    {"targeted", result_to_json(r.outcome.targeted)},
                    {"control", result_to_json(r.outcome.control)}});
  }
  return {{"rows", rows},
          {"median_baseline_accuracy", o.median_baseline_accuracy},
          {"median_targeted_accuracy", o.median_targeted_accuracy},
          {"median_control_accuracy", o.median_control_accuracy},
          {"median_baseline_counts", o.median_baseline_counts},
          {"median_targeted_counts", o.median_targeted_counts},
          {"median_control_counts", o.median_control_counts}};
}

// --- editing ----------------------------------------------------------------------

const std::vector<std::string>& edit_arm_names() {
  static const std::vector<std::string> names{"ace", "value-only", "skip-value"};
  return names;
}

EditOutcome edit_experiment(const Reference& ref, const RunConfig& c0,
                            const std::vector<std::string>& arms) {
  const RunConfig c = resolved(c0);
  const Vocabulary v(ref.kg);
  const auto pool = answerable_chains(ref.model, ref.kg);
  require(!pool.empty(), "no answerable chains to edit");

  EditOutcome out;
  std::vector<std::vector<int>> prompts;
  std::vector<int> targets;
  for (const auto& inst : pool) {
    prompts.push_back(inst.cloze);
    targets.push_back(inst.answer);
  }
  out.critical = identify_critical_layers(ref.model, prompts, targets, c.editor.top_m);
  out.layers = select_layers(out.critical, c.editor, ref.model.config.n_layers);
  EditorConfig base = c.editor;
  base.value_layers = out.layers.value;
  base.query_layers = out.layers.query;

  std::vector<int> candidates;
  for (const auto& inst : pool) candidates.push_back(inst.chain_id);
  CovarianceCache cov(corpus_prompts(ref.kg), base.covariance_samples, c.seed);

  std::map<std::string, std::vector<ArmMetrics>> per_seed;
  for (std::uint64_t seed : c.experiment.seeds) {
    InstanceParams ip;
    ip.seed = seed;
    ip.count = c.experiment.edit_instances;
    ip.n_prefixes = c.experiment.n_prefixes;
    const auto instances = sample_edit_instances(ref.kg, candidates, ip);
    require(!instances.empty(), "no edit instances could be sampled");
    const auto probes = specificity_probes(ref.kg, instances, c.experiment.probes, seed);
    EditSeedRow row;
    row.seed = seed;
    row.n_instances = static_cast<int>(instances.size());
    for (const auto& arm : arms) {
      EditorConfig cfg = base;
      if (arm == "value-only") {
        cfg.skip_query = true;
      } else if (arm == "skip-value") {
        cfg.skip_value = true;
      } else {
        require(arm == "ace", "unknown edit arm '" + arm + "'");
      }
      std::vector<ArmMetrics> per_instance;
      for (const auto& inst : instances) {
        const AceResult r = apply_ace(ref.model, v, inst.edits, cfg, cov);
        const MetricsReport m = evaluate(r.weights, ref.kg, {inst}, true, probes, seed);
        per_instance.push_back({m.multi_hop_overall, m.efficacy, m.paraphrase, m.specificity});
      }
      row.arms[arm] = mean_of(per_instance);
      per_seed[arm].push_back(row.arms[arm]);
    }
    out.rows.push_back(std::move(row));
  }
  for (const auto& [arm, rows] : per_seed) {
    std::vector<double> mh, ef, pa, sp;
    for (const auto& r : rows) {
      mh.push_back(r.multi_hop);
      ef.push_back(r.efficacy);
      pa.push_back(r.paraphrase);
      sp.push_back(r.specificity);
    }
    out.medians[arm] = {median(mh), median(ef), median(pa), median(sp)};
  }
  return out;
}

Json edit_outcome_to_json(const EditOutcome& o) {
  Json rows = Json::array();
  for (const auto& r : o.rows) {
    Json arms = Json::object();
    for (const auto& [name, m] : r.arms) arms[name] = arm_json(m);
    rows.push_back({{"seed", r.seed}, {"instances", r.n_instances}, {"arms", arms}});
  }
  Json medians = Json::object();
  for (const auto& [name, m] : o.medians) medians[name] = arm_json(m);
  return {{"layers", {{"value", o.layers.value}, {"query", o.layers.query}}},
          {"layer_scores", {{"value", o.critical.value_scores}, {"query", o.critical.query_scores}}},
          {"rows", rows},
          {"medians", medians}};
}

// --- verdicts -----------------------------------------------------------------------

namespace {

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

}  // namespace

Verdict judge_storage(const StorageOutcome& o) {
  const double t = o.median_targeted_drop, r = o.median_random_drop;
  Verdict v;
  v.pass = t > 0.0 && t >= 5.0 * r;
  v.detail = "median targeted drop " + fmt(t) + ", median random drop " + fmt(r) +
             " (need targeted > 0 and >= 5x random)";
  return v;
}

Verdict judge_query(const QueryOutcome& o) {
  Verdict v;
  v.pass = o.median_targeted_accuracy < o.median_control_accuracy &&
           o.median_targeted_counts < o.median_control_counts;
  v.detail = "accuracy targeted " + fmt(o.median_targeted_accuracy) + " vs control " +
             fmt(o.median_control_accuracy) + " (base " + fmt(o.median_baseline_accuracy) +
             "); downstream counts targeted " + fmt(o.median_targeted_counts) + " vs control " +
             fmt(o.median_control_counts) + " (base " + fmt(o.median_baseline_counts) + ")";
  return v;
}

Verdict judge_edit(const EditOutcome& o, double single_hop_accuracy) {
  Verdict v;
  const auto get = [&](const char* arm) {
    const auto it = o.medians.find(arm);
    require(it != o.medians.end(), std::string("edit outcome lacks the ") + arm + " arm");
    return it->second;
  };
  const ArmMetrics ace = get("ace"), val = get("value-only"), skipv = get("skip-value");
  const bool trained = single_hop_accuracy >= 0.95;
  const bool quality = ace.efficacy >= 0.9 && ace.paraphrase >= 0.8 && ace.specificity >= 0.85;
  const bool margin = ace.multi_hop - val.multi_hop >= 0.10 - 1e-12;
  const bool arms = val.multi_hop < ace.multi_hop && skipv.multi_hop < ace.multi_hop;
  v.pass = trained && quality && margin && arms;
  v.detail = "single-hop " + fmt(single_hop_accuracy) + "; AcE multi-hop " + fmt(ace.multi_hop) +
             " efficacy " + fmt(ace.efficacy) + " paraphrase " + fmt(ace.paraphrase) +
             " specificity " + fmt(ace.specificity) + "; value-only/skip-query multi-hop " +
             fmt(val.multi_hop) + "; skip-value multi-hop " + fmt(skipv.multi_hop);
  return v;
}

}  // namespace qve
