#pragma once

// Reference setup and the experiment drivers shared by the command-line tool
// and the acceptance runner.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qve/editor.hpp"
#include "qve/harness.hpp"
#include "qve/intervention.hpp"

namespace qve {

inline constexpr const char* kToolVersion = "0.3.0";

struct ExperimentConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double storage_fraction = 0.01;  // share of all FFN neurons ablated per arm
  int query_top = 100;             // query neurons ablated across the peak layers
  int peak_layers = 2;
  int query_instances = 40;        // answerable two-hop chains per seed
  int edit_instances = 20;
  int probes = 200;                // specificity probe facts per seed
  int n_prefixes = 4;
};

// The run seed drives the graph, the initialization and the training order;
// experiment seeds only vary what is measured on the trained model.
struct RunConfig {
  std::uint64_t seed = 7;
  KgParams kg;
  ModelConfig model;   // vocab_size follows the graph
  TrainConfig train;
  EditorConfig editor;
  ExperimentConfig experiment;
};

// Reference toy setup (L=6, H=4, d=64, N=256).
RunConfig reference_config(std::uint64_t seed = 7);

// Sets one dotted key such as "train.epochs" or "editor.lambda".
// Errors: unknown key or unparsable value -> input.
void set_config_value(RunConfig& c, const std::string& key, const std::string& value);

// Flat key=value lines; '#' starts a comment. Errors as set_config_value,
// unreadable file -> io.
void load_config_file(RunConfig& c, const std::string& path);

std::vector<std::string> config_keys();

// Applies the run seed to the graph, model and training seeds.
RunConfig resolved(const RunConfig& c);

Json run_config_to_json(const RunConfig& c);

// {tool, version, config_hash, seed} stamped into every artifact.
Json provenance(const Json& config, std::uint64_t seed);

// --- reference model ---------------------------------------------------------

struct Reference {
  KnowledgeGraph kg;
  ModelWeights model;
  TrainLog log;
};

Reference build_reference(const RunConfig& c);

std::vector<Example> single_hop_cloze(const KnowledgeGraph& kg);
std::vector<Example> two_hop_cloze(const KnowledgeGraph& kg);

// Chain instances the model answers in both formats.
std::vector<EvalInstance> answerable_chains(const ModelWeights& w, const KnowledgeGraph& kg);

// --- experiments ----------------------------------------------------------------

struct StorageRow {
  std::uint64_t seed = 0;
  int category = 0;
  int n_examples = 0;
  int n_ablated = 0;
  double baseline = 0.0;
  double targeted = 0.0;
  double random = 0.0;
};

struct StorageOutcome {
  std::vector<StorageRow> rows;
  double median_targeted_drop = 0.0;
  double median_random_drop = 0.0;
};

// Per seed, picks a category and ablates the top fraction of FFN neurons
// attributed on its single-hop cloze facts against a random set of equal size.
StorageOutcome storage_experiment(const Reference& ref, const RunConfig& c);
Json storage_to_json(const StorageOutcome& o);

struct QueryRow {
  std::uint64_t seed = 0;
  QueryAblationOutcome outcome;
};

struct QueryOutcome {
  std::vector<QueryRow> rows;
  double median_targeted_accuracy = 0.0;
  double median_control_accuracy = 0.0;
  double median_baseline_accuracy = 0.0;
  double median_targeted_counts = 0.0;  // downstream activated value neurons
  double median_control_counts = 0.0;
  double median_baseline_counts = 0.0;
};

QueryOutcome query_experiment(const Reference& ref, const RunConfig& c);
Json query_to_json(const QueryOutcome& o);

struct ArmMetrics {
  double multi_hop = 0.0;
  double efficacy = 0.0;
  double paraphrase = 0.0;
  double specificity = 0.0;
};

struct EditSeedRow {
  std::uint64_t seed = 0;
  int n_instances = 0;
  std::map<std::string, ArmMetrics> arms;
};

struct EditOutcome {
  CriticalLayers critical;
  SelectedLayers layers;
  std::vector<EditSeedRow> rows;
  std::map<std::string, ArmMetrics> medians;
};

// Edit arms in report order: full AcE, value layers only, query layers only.
const std::vector<std::string>& edit_arm_names();

// Identifies critical layers over the answerable chains, then edits every
// instance separately under each arm and evaluates it against its own edit.
EditOutcome edit_experiment(const Reference& ref, const RunConfig& c,
                            const std::vector<std::string>& arms = edit_arm_names());
Json edit_outcome_to_json(const EditOutcome& o);

double median(std::vector<double> v);

// --- acceptance verdicts ----------------------------------------------------------

struct Verdict {
  bool pass = false;
  std::string detail;
};

// Median targeted drop >= 5x median random drop, and positive.
Verdict judge_storage(const StorageOutcome& o);

// Targeted ablation below the matched control in both accuracy and
// downstream counts (medians).
Verdict judge_query(const QueryOutcome& o);

// Single-hop training accuracy >= 0.95; AcE efficacy >= 0.9, paraphrase >=
// 0.8, specificity >= 0.85; AcE multi-hop >= value-only + 0.10; value-only
// (skip-query) and skip-value strictly below AcE (medians).
Verdict judge_edit(const EditOutcome& o, double single_hop_accuracy);

}  // namespace qve
