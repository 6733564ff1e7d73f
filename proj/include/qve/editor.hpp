#pragma once

// Attribution-controlled knowledge editing on the FFN value matrices.
//
// Each edited layer l receives a closed-form increment of W_fc2^l,
//
//   Delta = R K_E^T (lambda C0 + K_E K_E^T)^{-1},   R = V_E - W K_E,
//
// which minimises lambda ||Delta K0||^2 + ||(W + Delta) K_E - V_E||^2 with
// C0 = mean(k k^T) over keys at corpus positions. Keys are FFN coefficient
// vectors sigma(W_fc1^l u); target values come from a gradient search over a
// vector added to the layer's FFN output.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qve/attribution.hpp"
#include "qve/harness.hpp"

namespace qve {

struct EditorConfig {
  double lambda = 100.0;          // preservation weight
  double query_lambda = 0.0;      // query layers; 0 means lambda
  double mu = 0.5;                // KL weight
  double phi_start = 1.0;         // NLL weight until p(o*) > 0.5
  double phi_final = 0.1;         // NLL weight afterwards
  int max_steps = 30;
  double learning_rate = 0.2;
  double kl_stop = 0.01;
  double nll_stop = 0.05;         // mean NLL below which the search may stop
  int covariance_samples = 10000;
  std::vector<int> value_layers;  // empty: identify automatically
  std::vector<int> query_layers;  // empty: identify automatically
  int n_value_layers = 2;         // used by automatic identification
  int n_query_layers = 2;
  int top_m = 100;                // value neurons forming the query target set
  bool skip_value = false;
  bool skip_query = false;
  bool reuse_value_targets = false;  // query layers reuse the value-stage delta
  std::uint64_t seed = 0;

  // Errors: violated range constraints -> input.
  void validate() const;
};

// Named full-scale configurations: "gptj" (value layers 26-28, query layers
// 3-8, lambda 6000) and "gptj-peak" (query layers 16 and 18). Their layer
// indices only fit models of matching depth.
EditorConfig editor_preset(const std::string& name);

Json editor_config_to_json(const EditorConfig& c);

struct CriticalLayers {
  std::vector<int> value_ranked;       // descending by summed FFN value score
  std::vector<int> query_ranked;       // descending by summed FFN query score
  std::vector<double> value_scores;    // per layer
  std::vector<double> query_scores;
};

// Forwards every prompt, sums FFN value scores (and query scores against each
// prompt's top_m value neurons) at the last position. The deepest layer never
// ranks as a query layer. Errors: empty or mismatched prompt/target lists.
CriticalLayers identify_critical_layers(const ModelWeights& w,
                                        const std::vector<std::vector<int>>& prompts,
                                        const std::vector<int>& targets, int top_m = 100);

struct SelectedLayers {
  std::vector<int> value;  // ascending
  std::vector<int> query;  // ascending, each shallower than the deepest value layer
};

// Applies the configured layer lists, falling back to the top-ranked layers.
// Query layers exclude value layers and must precede the deepest value layer.
SelectedLayers select_layers(const CriticalLayers& critical, const EditorConfig& cfg,
                             int n_layers);

// Objective of a target-vector search: delta is added to `layer`'s FFN output
// at the last position of every prompt.
struct SearchProblem {
  int layer = 0;
  std::vector<std::vector<int>> prompts;
  int target = 0;                 // token
  std::vector<int> kl_prompt;     // empty: no KL term
};

struct TargetVectorResult {
  Vector delta;
  Vector v_star;                  // FFN output at the first prompt plus delta
  double kl = 0.0;
  double nll = 0.0;               // mean over prompts
  double p_before = 0.0;          // mean p(target) at delta = 0
  double p_after = 0.0;
  int steps_used = 0;
};

// Adam over delta on mu * KL(P_edit || P_base)[kl_prompt] + phi * mean NLL,
// both distributions taken over the vocabulary without the target token.
// Errors: non-finite loss -> numeric naming the step.
TargetVectorResult search_target_vector(const ModelWeights& w, const SearchProblem& problem,
                                        const EditorConfig& cfg);

// Columns are sigma(W_fc1^l u) at the last position of each prompt (N x E).
Matrix collect_keys(const ModelWeights& w, const std::vector<std::vector<int>>& prompts,
                    int layer);

// Mean of k k^T over `samples` uniformly drawn (prompt, position) pairs.
Matrix estimate_covariance(const ModelWeights& w, const std::vector<std::vector<int>>& corpus,
                           int layer, int samples, std::uint64_t seed);

// Covariances of the unedited model, computed on first use per layer.
class CovarianceCache {
 public:
  CovarianceCache(std::vector<std::vector<int>> corpus, int samples, std::uint64_t seed)
      : corpus_(std::move(corpus)), samples_(samples), seed_(seed) {}
  const Matrix& get(const ModelWeights& w, int layer);

 private:
  std::vector<std::vector<int>> corpus_;
  int samples_;
  std::uint64_t seed_;
  std::map<int, Matrix> by_layer_;
};

// Delta of the header formula. If the system matrix is numerically singular
// a ridge of 1e-8 * trace / N is added and the solve retried once.
// Errors: shape mismatch or lambda <= 0 -> input; singular after the ridge ->
// numeric naming `layer`.
Matrix compute_delta(const Matrix& w, const Matrix& c0, const Matrix& keys, const Matrix& values,
                     double lambda, int layer = -1);

struct EditReport {
  struct Item {
    int s = 0, r = 0, o = 0, o_star = 0;
    double p_before = 0.0;
    double p_after = 0.0;
  };
  std::vector<Item> edits;
  SelectedLayers layers;
  std::vector<std::pair<int, double>> delta_norms;  // (layer, Frobenius norm) in edit order
  std::vector<std::string> stages;                  // "value" / "query" per delta_norms entry
  EditorConfig config;
};

Json edit_report_to_json(const EditReport& r);

struct AceResult {
  ModelWeights weights;
  EditReport report;
};

// Value layers ascending (residual spread over the remaining layers, keys
// recomputed after each update), then query layers ascending: every
// multi-hop prompt gets a fresh search toward its post-edit answer on the
// current weights, while the single-hop prompts are held at their current
// outputs. Attention is never changed.
// Automatic layer identification uses the edits' multi-hop prompts (or edit
// prompts when none) scored against the model's own predictions.
AceResult apply_ace(const ModelWeights& w, const Vocabulary& vocab,
                    const std::vector<EditRequest>& edits, const EditorConfig& cfg,
                    CovarianceCache& covariances);

// In-place form; on any failure the weights are restored before rethrowing.
EditReport apply_ace_in_place(ModelWeights& w, const Vocabulary& vocab,
                              const std::vector<EditRequest>& edits, const EditorConfig& cfg,
                              CovarianceCache& covariances);

// Parses a batch edit file: a JSON list of {s, r, o, o_star} objects using
// KG ids. Prompts are rendered from the templates; multi-hop prompts are
// attached for every KG chain whose first hop is the edited fact.
// Errors: unknown ids, o == o_star, or (s, r, o) not a KG fact -> input.
std::vector<EditRequest> edits_from_json(const Json& j, const KnowledgeGraph& kg,
                                         int n_prefixes = 4);

}  // namespace qve
