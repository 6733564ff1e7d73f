#pragma once

// Neuron-level attribution on a traced forward pass.
//
// A value score is the log-probability gain of the target token when a
// neuron's contribution vector is added to the residual state it writes into,
// both read out through the unembedding:
//
//   score(v) = log p(w | base + v) - log p(w | base)
//
// with base = h^{l-1} for attention neurons and h^{l-1} + A^l for FFN
// neurons. A query score is the inner product of a neuron's contribution with
// the subkey (row of Wfc1) of a deeper FFN neuron. Scores are read without
// normalization even for rms models.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qve/model.hpp"
#include "qve/serialize.hpp"

namespace qve {

enum class NeuronSite { ffn, attn };
enum class Role { value, query };

std::string to_string(NeuronSite s);
std::string to_string(Role r);

struct NeuronRef {
  NeuronSite site = NeuronSite::ffn;
  int layer = 0;
  int head = -1;  // attention only
  int index = 0;  // column of Wfc2, or of the head's Wo
  bool operator==(const NeuronRef&) const = default;
  auto operator<=>(const NeuronRef&) const = default;
};

// Errors: out-of-range layer/head/index, or a head on an FFN ref -> input.
void validate_ref(const ModelConfig& c, const NeuronRef& ref);

// Neurons per layer for a site: N for ffn, H * head_dim for attn.
int neurons_per_layer(const ModelConfig& c, NeuronSite site);

// The flat index-th neuron of a layer (attn neurons are ordered head-major).
NeuronRef neuron_at(const ModelConfig& c, NeuronSite site, int layer, int flat);

// Contribution vector of a neuron at a position: m_k fc2_k for FFN neurons,
// z_j[k] Wo_j[:, k] for attention neurons.
Vector neuron_contribution(const ModelWeights& w, const ResidualTrace& trace,
                           const NeuronRef& ref, int position);

// Residual state the neuron's contribution is compared against.
Vector attribution_base(const ResidualTrace& trace, const NeuronRef& ref, int position);

// position < 0 means the last position.
double value_importance(const ModelWeights& w, const ResidualTrace& trace, const NeuronRef& ref,
                        int target, int position = -1);

// p(w | base + v) - p(w | base).
double distribution_change(const ModelWeights& w, const ResidualTrace& trace,
                           const NeuronRef& ref, int target, int position = -1);

// Sum of value_importance over every neuron of the layer and site.
double layer_importance(const ModelWeights& w, const ResidualTrace& trace, int layer,
                        NeuronSite site, int target, int position = -1);

// Value scores of every neuron of a layer and site, in flat-index order.
std::vector<double> layer_value_scores(const ModelWeights& w, const ResidualTrace& trace,
                                       int layer, NeuronSite site, int target,
                                       int position = -1);

// v . fc1^{target_layer}_{target_index} for a vector produced at source_layer.
// Errors: target_layer <= source_layer -> input (queries precede values).
double query_importance(const ModelWeights& w, std::span<const double> v, int source_layer,
                        int target_layer, int target_index);

struct ImportanceRecord {
  NeuronRef neuron;
  Role role = Role::value;
  double score = 0.0;
  int target = 0;
};

// Sorts by (score desc, layer asc, site, head, index asc).
void rank_records(std::vector<ImportanceRecord>& records);

// Every FFN neuron's value score at the position, ranked, truncated to top_m.
std::vector<ImportanceRecord> top_value_neurons(const ModelWeights& w, const ResidualTrace& trace,
                                                int target, int top_m, int position = -1);

// Query scores of every neuron of a layer and site against a fixed set of
// value neurons; only targets deeper than the layer count.
std::vector<double> layer_query_scores(const ModelWeights& w, const ResidualTrace& trace,
                                       int layer, NeuronSite site,
                                       const std::vector<ImportanceRecord>& targets,
                                       int position = -1);

struct ImportanceReport {
  std::vector<int> prompt;
  int target = 0;
  int position = 0;
  std::vector<double> ffn_value_totals;   // per layer
  std::vector<double> attn_value_totals;
  std::vector<double> ffn_query_totals;
  std::vector<double> attn_query_totals;
  std::vector<ImportanceRecord> top_neurons;  // value records then query records
  std::uint64_t seed = 0;
  std::string config_hash;
};

struct ReportOptions {
  int top_k = 20;   // records kept per role
  int top_m = 100;  // value neurons forming the query target set
  int position = -1;
  std::uint64_t seed = 0;
};

ImportanceReport importance_report(const ModelWeights& w, const ResidualTrace& trace, int target,
                                   const ReportOptions& opts = {});

Json record_to_json(const ImportanceRecord& r);
Json report_to_json(const ImportanceReport& r);

// Top entries of E_u x, descending, ties by ascending token id.
std::vector<std::pair<int, double>> project_to_vocab(const ModelWeights& w,
                                                     std::span<const double> x, int top_k);

}  // namespace qve
