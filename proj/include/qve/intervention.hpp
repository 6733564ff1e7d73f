#pragma once

// Causal experiments on neuron sets: zero-ablation, targeted against random
// ablation for a semantic category, and query-neuron ablation with counts of
// activated value neurons in deeper layers.

#include <cstdint>
#include <string>
#include <vector>

#include "qve/attribution.hpp"
#include "qve/harness.hpp"

namespace qve {

enum class AblationMode { zero_subvalue, zero_coefficient };

std::string to_string(AblationMode m);

struct AblationSpec {
  std::vector<NeuronRef> neurons;
  AblationMode mode = AblationMode::zero_subvalue;
};

// Returns an ablated copy; the input is untouched. zero_subvalue clears the
// Wfc2 (or Wo) column; zero_coefficient clears the Wfc1 (or Wv) row, which
// forces the neuron's coefficient to sigma(0) = 0 on every input.
// Duplicate refs are ignored. Errors: invalid ref -> input.
ModelWeights ablate(const ModelWeights& w, const AblationSpec& spec);

// Value scores in every layer at or above this percentile count as activated.
inline constexpr double kActivationPercentile = 0.995;

// Percentile (nearest rank) of every FFN neuron's value score in the trace.
double activation_threshold(const ModelWeights& w, const ResidualTrace& trace, int target,
                            double percentile = kActivationPercentile);

// Per requested layer, FFN neurons with value_importance >= tau at the last
// position.
std::vector<int> count_activated_value_neurons(const ModelWeights& w, const ResidualTrace& trace,
                                               const std::vector<int>& layers, int target,
                                               double tau);

struct InterventionResult {
  std::string experiment;
  std::string arm;
  double fraction = 0.0;           // share of the candidate neurons ablated
  std::uint64_t seed = 0;
  double baseline_accuracy = 0.0;
  double ablated_accuracy = 0.0;
  std::vector<int> count_layers;
  std::vector<int> counts_before;  // summed over prompts
  std::vector<int> counts_after;
  std::vector<NeuronRef> ablated;
};

Json result_to_json(const InterventionResult& r);

// FFN neurons ranked by value score summed over the examples at the last
// position, each scored against its own answer.
std::vector<ImportanceRecord> rank_value_neurons(const ModelWeights& w,
                                                 const std::vector<Example>& examples);

// For each seed, ablates the top round(fraction * L * N) FFN neurons by
// summed value score and an equally sized uniformly random FFN set, and
// reports accuracy on the examples. Returns targeted and random rows per seed.
// Errors: empty example set or fraction outside [0, 1] -> input.
std::vector<InterventionResult> targeted_vs_random_experiment(
    const ModelWeights& w, const std::vector<Example>& examples, double fraction,
    const std::vector<std::uint64_t>& seeds);

struct QueryAblationOptions {
  int q_top = 100;          // query neurons ablated across the peak layers
  int peak_layers = 2;
  int top_m = 100;          // value neurons forming the query target set
  std::uint64_t seed = 0;   // draws the control arm
};

struct QueryAblationOutcome {
  std::vector<int> peak_layers;      // ranked query layers actually ablated
  std::vector<double> layer_scores;  // summed FFN query scores per layer
  InterventionResult targeted;
  InterventionResult control;        // random neurons of equal count in the same layers
};

// Ranks FFN query layers over the instances' cloze prompts, ablates the top
// q_top query neurons inside the peak layers, and compares multi-hop accuracy
// and activated-value counts in every layer after the shallowest peak layer
// against a random control of the same size in the same layers. Counts use
// each prompt's unablated threshold. Errors: fewer than peak_layers rankable layers or no instances.
QueryAblationOutcome query_ablation_experiment(const ModelWeights& w,
                                               const std::vector<EvalInstance>& instances,
                                               const QueryAblationOptions& opts);

}  // namespace qve
