// Command-line pipeline: knowledge-graph generation, training, analysis,
// editing and the deterministic reproduction run.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "qve/error.hpp"
#include "qve/pipeline.hpp"

using namespace qve;
namespace fs = std::filesystem;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitAcceptance = 4;

struct Options {
  std::uint64_t seed = 7;
  bool seed_given = false;
  std::string config;
  std::string model;
  std::string kg;
  std::string out;
  std::string layers_q;
  std::string layers_v;
  bool skip_query = false;
  bool skip_value = false;
  double fraction = -1.0;
  std::string arms;
  std::string prompt_file;
  std::string target;
  std::string edits;
  std::string corpus;
  std::string preset;
  std::string experiment = "storage";
  std::vector<std::string> sets;
  int top_k = 20;
};

RunConfig effective_config(const Options& o) {
  RunConfig c = reference_config();
  if (!o.config.empty()) load_config_file(c, o.config);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos, "--set expects key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed_given) c.seed = o.seed;
  if (!o.preset.empty()) {
    const EditorConfig p = editor_preset(o.preset);
    c.editor.lambda = p.lambda;
    c.editor.covariance_samples = p.covariance_samples;
    c.editor.value_layers = p.value_layers;
    c.editor.query_layers = p.query_layers;
  }
  if (!o.layers_v.empty()) set_config_value(c, "editor.value_layers", o.layers_v);
  if (!o.layers_q.empty()) set_config_value(c, "editor.query_layers", o.layers_q);
  if (o.skip_query) c.editor.skip_query = true;
  if (o.skip_value) c.editor.skip_value = true;
  if (o.fraction >= 0.0) c.experiment.storage_fraction = o.fraction;
  return c;
}

void need(const std::string& value, const char* flag) {
  require(!value.empty(), std::string("missing required flag ") + flag);
}

Json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::io, "cannot read '" + path + "'");
  try {
    return Json::parse(f);
  } catch (const Json::exception& e) {
    fail(ErrorKind::shape_mismatch, "'" + path + "' is not valid JSON: " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot write '" + path + "'");
  f << text;
  if (!f) fail(ErrorKind::io, "failed writing '" + path + "'");
}

// Artifacts are written with sorted keys and a trailing newline so equal
// content always yields equal bytes.
void write_json(const std::string& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

void emit(const Options& o, const Json& j) {
  if (o.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(o.out, j);
  }
}

Json stamped(Json body, const RunConfig& c) {
  const Json cfg = run_config_to_json(c);
  body["provenance"] = provenance(cfg, c.seed);
  body["config"] = cfg;
  return body;
}

KnowledgeGraph load_kg(const Options& o) {
  need(o.kg, "--kg");
  return kg_from_json(read_json(o.kg));
}

ModelWeights load_model_checked(const Options& o, const KnowledgeGraph* kg) {
  need(o.model, "--model");
  ModelWeights w = load_model(o.model);
  if (kg != nullptr) {
    require(Vocabulary(*kg).size() <= w.config.vocab_size,
            "model vocabulary is smaller than the knowledge graph's");
  }
  return w;
}

std::vector<int> read_prompt(const Options& o, const ModelWeights& w) {
  need(o.prompt_file, "--prompt-file");
  const Json j = read_json(o.prompt_file);
  std::vector<int> tokens;
  try {
    tokens = (j.is_object() ? j.at("tokens") : j).get<std::vector<int>>();
  } catch (const Json::exception& e) {
    fail(ErrorKind::input, "prompt file must be a token list or {\"tokens\": [...]}: " +
                               std::string(e.what()));
  }
  require(!tokens.empty(), "prompt is empty");
  for (int t : tokens) {
    require(t >= 0 && t < w.config.vocab_size, "prompt token " + std::to_string(t) + " out of range");
  }
  return tokens;
}

int parse_target(const Options& o, const ModelWeights& w) {
  need(o.target, "--target");
  int t = -1;
  try {
    std::size_t used = 0;
    t = std::stoi(o.target, &used);
    require(used == o.target.size(), "");
  } catch (const std::exception&) {
    if (!o.kg.empty()) {
      const Vocabulary v(kg_from_json(read_json(o.kg)));
      for (int k = 0; k < v.size(); ++k) {
        if (v.name(k) == o.target) t = k;
      }
    }
    require(t >= 0, "--target must be a token id (or a token name with --kg)");
  }
  require(t >= 0 && t < w.config.vocab_size, "--target out of range");
  return t;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// --- subcommands ------------------------------------------------------------------

int cmd_gen_kg(const Options& o) {
  const RunConfig c = resolved(effective_config(o));
  need(o.out, "--out");
  const KnowledgeGraph kg = generate_kg(c.kg);
  Json j = kg_to_json(kg);
  j["provenance"] = provenance(run_config_to_json(c), c.seed);
  write_json(o.out, j);
  if (!o.corpus.empty()) write_text(o.corpus, corpus_to_text(Vocabulary(kg), build_corpus(kg)));
  std::cout << "facts " << kg.facts.size() << ", chains " << kg.chains.size() << ", vocabulary "
            << Vocabulary(kg).size() << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig c = resolved(effective_config(o));
  const KnowledgeGraph kg = load_kg(o);
  need(o.out, "--out");
  ModelConfig mc = c.model;
  mc.vocab_size = Vocabulary(kg).size();
  TrainLog log;
  const ModelWeights w = train_toy(mc, build_corpus(kg), c.train, &log);
  save_model(w, o.out);
  const double single = accuracy(w, single_hop_cloze(kg)), two = accuracy(w, two_hop_cloze(kg));
  write_json(o.out + ".log.json",
             stamped({{"epoch_loss", log.epoch_loss},
                      {"epoch_accuracy", log.epoch_accuracy},
                      {"single_hop_accuracy", single},
                      {"two_hop_accuracy", two},
                      {"weights_digest", hex64(weights_digest(w))}},
                     c));
  std::cout << "single-hop accuracy " << single << ", two-hop accuracy " << two << "\n";
  return 0;
}

int cmd_filter(const Options& o) {
  const RunConfig c = effective_config(o);
  const KnowledgeGraph kg = load_kg(o);
  const ModelWeights w = load_model_checked(o, &kg);
  const auto all = chain_instances(kg);
  const FilterResult f = filter_answerable(w, all);
  Json cats = Json::object();
  for (const auto& [cat, kt] : f.per_category) {
    cats[category_names()[cat]] = {{"kept", kt.first},
                                   {"total", kt.second},
                                   {"fraction", kt.second ? double(kt.first) / kt.second : 0.0}};
  }
  Json kept = Json::array();
  for (int i : f.kept) kept.push_back(all[i].chain_id);
  emit(o, stamped({{"status", f.empty_warning ? "empty" : "ok"},
                   {"kept_chains", kept},
                   {"total", all.size()},
                   {"per_category", cats}},
                  c));
  if (f.empty_warning) std::cerr << "warning: no chain instance is answerable\n";
  return 0;
}

int cmd_trace(const Options& o) {
  const RunConfig c = effective_config(o);
  const ModelWeights w = load_model_checked(o, nullptr);
  const auto tokens = read_prompt(o, w);
  const ResidualTrace t = forward(w, tokens);
  const int last = t.length() - 1;
  auto lens = [&](std::span<const double> x) {
    Json top = Json::array();
    for (const auto& [tok, logit] : project_to_vocab(w, x, 5)) top.push_back({{"token", tok}, {"logit", logit}});
    return top;
  };
  Json layers = Json::array();
  for (int l = 0; l < t.n_layers(); ++l) {
    const auto& lt = t.layers[l];
    Json heads = Json::array();
    for (const auto& h : lt.heads) {
      const auto a = h.alpha.row(last);
      heads.push_back(std::vector<double>(a.begin(), a.begin() + last + 1));
    }
    layers.push_back({{"layer", l},
                      {"attention_last_position", heads},
                      {"attn_out_lens", lens(lt.attn_out.row(last))},
                      {"ffn_out_lens", lens(lt.ffn_out.row(last))},
                      {"residual_lens", lens(t.hidden(l + 1, last))}});
  }
  const Vector p = next_token_distribution(t);
  Json top = Json::array();
  for (const auto& [tok, logit] : project_to_vocab(w, t.final_hidden.row(last), 5)) {
    top.push_back({{"token", tok}, {"probability", p[tok]}});
  }
  emit(o, stamped({{"prompt", tokens}, {"layers", layers}, {"next_token", top}}, c));
  return 0;
}

int cmd_attribute(const Options& o) {
  const RunConfig c = effective_config(o);
  const ModelWeights w = load_model_checked(o, nullptr);
  const auto tokens = read_prompt(o, w);
  const int target = parse_target(o, w);
  ReportOptions ro;
  ro.top_k = o.top_k;
  ro.top_m = c.editor.top_m;
  ro.seed = c.seed;
  Json j = report_to_json(importance_report(w, forward(w, tokens), target, ro));
  j["provenance"] = provenance(run_config_to_json(c), c.seed);
  emit(o, j);
  return 0;
}

int cmd_ablate(const Options& o) {
  const RunConfig c = effective_config(o);
  Reference ref{load_kg(o), {}, {}};
  ref.model = load_model_checked(o, &ref.kg);
  const auto arms = o.arms.empty() ? std::vector<std::string>{} : split(o.arms);
  auto keep = [&](const std::string& arm) {
    return arms.empty() || std::find(arms.begin(), arms.end(), arm) != arms.end();
  };
  Json j;
  if (o.experiment == "storage") {
    j = storage_to_json(storage_experiment(ref, c));
    for (auto& row : j["rows"]) {
      if (!keep("targeted")) row.erase("targeted");
      if (!keep("random")) row.erase("random");
    }
  } else if (o.experiment == "query") {
    j = query_to_json(query_experiment(ref, c));
    for (auto& row : j["rows"]) {
      if (!keep("targeted")) row.erase("targeted");
      if (!keep("control")) row.erase("control");
    }
  } else {
    fail(ErrorKind::input, "--experiment must be storage or query");
  }
  j["experiment"] = o.experiment;
  emit(o, stamped(j, c));
  return 0;
}

int cmd_identify(const Options& o) {
  const RunConfig c = effective_config(o);
  const KnowledgeGraph kg = load_kg(o);
  const ModelWeights w = load_model_checked(o, &kg);
  const auto pool = answerable_chains(w, kg);
  require(!pool.empty(), "no answerable chains to identify layers on");
  std::vector<std::vector<int>> prompts;
  std::vector<int> targets;
  for (const auto& inst : pool) {
    prompts.push_back(inst.cloze);
    targets.push_back(inst.answer);
  }
  const CriticalLayers cl = identify_critical_layers(w, prompts, targets, c.editor.top_m);
  const SelectedLayers s = select_layers(cl, c.editor, w.config.n_layers);
  emit(o, stamped({{"prompts", prompts.size()},
                   {"value_scores", cl.value_scores},
                   {"query_scores", cl.query_scores},
                   {"value_ranked", cl.value_ranked},
                   {"query_ranked", cl.query_ranked},
                   {"selected", {{"value", s.value}, {"query", s.query}}}},
                  c));
  return 0;
}

int cmd_edit(const Options& o) {
  RunConfig c = resolved(effective_config(o));
  const KnowledgeGraph kg = load_kg(o);
  const ModelWeights w = load_model_checked(o, &kg);
  need(o.edits, "--edits");
  need(o.out, "--out");
  const auto edits = edits_from_json(read_json(o.edits), kg, c.experiment.n_prefixes);
  if (c.editor.value_layers.empty() || c.editor.query_layers.empty()) {
    const auto pool = answerable_chains(w, kg);
    require(!pool.empty(), "no answerable chains to identify layers on");
    std::vector<std::vector<int>> prompts;
    std::vector<int> targets;
    for (const auto& inst : pool) {
      prompts.push_back(inst.cloze);
      targets.push_back(inst.answer);
    }
    const SelectedLayers s = select_layers(
        identify_critical_layers(w, prompts, targets, c.editor.top_m), c.editor, w.config.n_layers);
    c.editor.value_layers = s.value;
    c.editor.query_layers = s.query;
  }
  std::vector<std::vector<int>> corpus;
  for (const auto& ex : build_corpus(kg).examples) corpus.push_back(ex.prompt);
  CovarianceCache cov(corpus, c.editor.covariance_samples, c.seed);
  const AceResult r = apply_ace(w, Vocabulary(kg), edits, c.editor, cov);
  save_model(r.weights, o.out);
  Json rep = edit_report_to_json(r.report);
  rep["provenance"] = provenance(run_config_to_json(c), c.seed);
  write_json(o.out + ".report.json", rep);
  for (const auto& e : r.report.edits) {
    std::cout << "edit (" << e.s << ", " << e.r << ", " << e.o << " -> " << e.o_star
              << "): p " << e.p_before << " -> " << e.p_after << "\n";
  }
  return 0;
}

int cmd_eval(const Options& o) {
  const RunConfig c = effective_config(o);
  Reference ref{load_kg(o), {}, {}};
  ref.model = load_model_checked(o, &ref.kg);
  const auto all = chain_instances(ref.kg);
  const auto pool = answerable_chains(ref.model, ref.kg);
  Json j = {{"single_hop_accuracy", accuracy(ref.model, single_hop_cloze(ref.kg))},
            {"two_hop_accuracy", accuracy(ref.model, two_hop_cloze(ref.kg))},
            {"answerable_chains", pool.size()},
            {"chains", all.size()}};
  if (!pool.empty()) {
    j["base_metrics"] = metrics_to_json(evaluate(ref.model, ref.kg, pool, false, {}, c.seed));
  }
  if (!o.arms.empty()) j["editing"] = edit_outcome_to_json(edit_experiment(ref, c, split(o.arms)));
  emit(o, stamped(j, c));
  return 0;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_repro(const Options& o) {
  const RunConfig c = resolved(effective_config(o));
  need(o.out, "--out");
  const fs::path dir(o.out);
  fs::create_directories(dir);
  const Json cfg = run_config_to_json(c);
  auto stamp = [&](Json j) {
    j["provenance"] = provenance(cfg, c.seed);
    return j;
  };

  auto t0 = std::chrono::steady_clock::now();
  const Reference ref = build_reference(c);
  const double single = accuracy(ref.model, single_hop_cloze(ref.kg));
  const double two = accuracy(ref.model, two_hop_cloze(ref.kg));
  std::printf("timing train %.1f s\n", seconds_since(t0));
  write_json((dir / "config.json").string(), stamp({{"config", cfg}, {"keys", config_keys()}}));
  write_json((dir / "kg.json").string(), stamp(kg_to_json(ref.kg)));
  save_model(ref.model, (dir / "model.qve").string());
  write_json((dir / "train.json").string(),
             stamp({{"epoch_loss", ref.log.epoch_loss},
                    {"epoch_accuracy", ref.log.epoch_accuracy},
                    {"single_hop_accuracy", single},
                    {"two_hop_accuracy", two},
                    {"weights_digest", hex64(weights_digest(ref.model))}}));

  t0 = std::chrono::steady_clock::now();
  const StorageOutcome storage = storage_experiment(ref, c);
  std::printf("timing storage %.1f s\n", seconds_since(t0));
  write_json((dir / "storage.json").string(), stamp(storage_to_json(storage)));

  t0 = std::chrono::steady_clock::now();
  const QueryOutcome query = query_experiment(ref, c);
  std::printf("timing query %.1f s\n", seconds_since(t0));
  write_json((dir / "query.json").string(), stamp(query_to_json(query)));

  t0 = std::chrono::steady_clock::now();
  const EditOutcome edit = edit_experiment(ref, c);
  std::printf("timing edit %.1f s\n", seconds_since(t0));
  write_json((dir / "edit.json").string(), stamp(edit_outcome_to_json(edit)));

  const Verdict v5 = judge_storage(storage), v6 = judge_query(query),
                v7 = judge_edit(edit, single);
  Json summary = {{"single_hop_accuracy", single},
                  {"two_hop_accuracy", two},
                  {"storage", {{"pass", v5.pass}, {"detail", v5.detail}}},
                  {"query", {{"pass", v6.pass}, {"detail", v6.detail}}},
                  {"edit", {{"pass", v7.pass}, {"detail", v7.detail}}}};
  write_json((dir / "summary.json").string(), stamp(summary));
  std::printf("storage %s: %s\nquery %s: %s\nedit %s: %s\n", v5.pass ? "PASS" : "FAIL",
              v5.detail.c_str(), v6.pass ? "PASS" : "FAIL", v6.detail.c_str(),
              v7.pass ? "PASS" : "FAIL", v7.detail.c_str());
  std::fflush(stdout);
  return v5.pass && v6.pass && v7.pass ? 0 : kExitAcceptance;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Query-value attribution and knowledge-editing toolkit"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "Run seed")->each([&](const std::string&) { o.seed_given = true; });
    sub->add_option("--config", o.config, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", o.sets, "Override one config key (key=value)");
    sub->add_option("--out", o.out, "Output path");
  };
  auto with_model = [&](CLI::App* sub) { sub->add_option("--model", o.model, "Weight file (.qve)"); };
  auto with_kg = [&](CLI::App* sub) { sub->add_option("--kg", o.kg, "Knowledge graph JSON"); };

  std::map<std::string, std::function<int(const Options&)>> handlers;
  auto add = [&](const char* name, const char* help, std::function<int(const Options&)> fn) {
    CLI::App* sub = app.add_subcommand(name, help);
    common(sub);
    handlers[name] = std::move(fn);
    return sub;
  };

  auto* gen = add("gen-kg", "Generate the synthetic knowledge graph", cmd_gen_kg);
  gen->add_option("--corpus", o.corpus, "Also write the rendered corpus");

  auto* train = add("train", "Train the toy model on a knowledge graph", cmd_train);
  with_kg(train);

  auto* filt = add("filter", "Keep chains answerable in both formats", cmd_filter);
  with_model(filt);
  with_kg(filt);

  auto* trace = add("trace", "Trace a prompt and project each site to the vocabulary", cmd_trace);
  with_model(trace);
  trace->add_option("--prompt-file", o.prompt_file, "JSON token list");

  auto* attr = add("attribute", "Value and query importance of every neuron", cmd_attribute);
  with_model(attr);
  with_kg(attr);
  attr->add_option("--prompt-file", o.prompt_file, "JSON token list");
  attr->add_option("--target", o.target, "Target token id or name");
  attr->add_option("--top-k", o.top_k, "Records kept per role");

  auto* abl = add("ablate", "Targeted versus random or control ablation", cmd_ablate);
  with_model(abl);
  with_kg(abl);
  abl->add_option("--fraction", o.fraction, "Share of FFN neurons ablated")->check(CLI::Range(0.0, 1.0));
  abl->add_option("--arms", o.arms, "Comma-separated arms to report");
  abl->add_option("--experiment", o.experiment, "storage or query");

  auto* ident = add("identify", "Rank value and query layers", cmd_identify);
  with_model(ident);
  with_kg(ident);

  auto* edit = add("edit", "Apply a batch of edits", cmd_edit);
  with_model(edit);
  with_kg(edit);
  edit->add_option("--edits", o.edits, "JSON list of {s, r, o, o_star}");
  edit->add_option("--layers-q", o.layers_q, "Query layers, comma separated");
  edit->add_option("--layers-v", o.layers_v, "Value layers, comma separated");
  edit->add_flag("--skip-query-layers", o.skip_query, "Edit value layers only");
  edit->add_flag("--skip-value-layers", o.skip_value, "Edit query layers only");
  edit->add_option("--preset", o.preset, "Named editor configuration");

  auto* ev = add("eval", "Base metrics and optional editing arms", cmd_eval);
  with_model(ev);
  with_kg(ev);
  ev->add_option("--arms", o.arms, "Editing arms: ace,value-only,skip-value");
  ev->add_option("--layers-q", o.layers_q, "Query layers, comma separated");
  ev->add_option("--layers-v", o.layers_v, "Value layers, comma separated");

  add("repro", "Run the full pipeline into a report directory", cmd_repro);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInput;
  }
  try {
    for (const auto& [name, fn] : handlers) {
      if (app.got_subcommand(name)) return fn(o);
    }
  } catch (const Error& e) {
    std::cerr << "error[" << to_string(e.kind()) << "]: " << e.what() << "\n";
    return e.kind() == ErrorKind::numeric ? kExitNumeric : kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}
