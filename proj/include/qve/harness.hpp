#pragma once

// Synthetic knowledge graph, prompt templates, toy-model training and the
// editing evaluation metrics.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qve/model.hpp"
#include "qve/serialize.hpp"

namespace qve {

inline constexpr int kCategoryCount = 8;

// Semantic categories of the synthetic relations.
const std::vector<std::string>& category_names();

struct Fact {
  int s = 0;
  int r = 0;
  int o = 0;
  bool operator==(const Fact&) const = default;
  auto operator<=>(const Fact&) const = default;
};

// hops[i].o == hops[i + 1].s; category is the category of the final relation.
struct ReasoningChain {
  std::vector<Fact> hops;
  int category = 0;
};

struct KgParams {
  std::uint64_t seed = 7;
  int n_entities = 262;
  int n_relations = 24;        // multiple of 8
  int chains_per_category = 30;
  int hops = 2;                // 1..4
  int pool_size = 16;          // object entities per category
  int extra_facts = 200;       // standalone facts on otherwise unused subjects
};

class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;

  int n_entities = 0;
  int n_relations = 0;
  int pool_size = 0;
  std::uint64_t seed = 0;
  std::vector<int> relation_category;         // per relation
  std::vector<int> entity_category;           // -1 for subject-pool entities
  std::vector<Fact> facts;                    // sorted, functional in (s, r)
  std::vector<ReasoningChain> chains;

  std::optional<int> object(int s, int r) const;
  std::vector<int> relations_of(int category) const;
  std::vector<int> pool_of(int category) const;
  const Fact* find(int s, int r) const;

  void rebuild_index();

 private:
  std::map<std::pair<int, int>, int> index_;
};

// Errors: infeasible counts (vocabulary, pools, chain demand) -> ErrorKind::input.
KnowledgeGraph generate_kg(const KgParams& params);

Json kg_to_json(const KnowledgeGraph& kg);
KnowledgeGraph kg_from_json(const Json& j);

// --- vocabulary and prompts --------------------------------------------------

enum class Special : int {
  ask = 0,   // "what is"
  qmark,     // "?"
  the,
  of,
  tell,
  isa,       // "is a", used by the KL prompt
  filler0,   // fillers 0..7 serve as neutral edit-prompt prefixes
};

inline constexpr int kFillerCount = 8;
inline constexpr int kSpecialCount = static_cast<int>(Special::filler0) + kFillerCount;

struct Vocabulary {
  int n_relations = 0;
  int n_entities = 0;

  explicit Vocabulary(const KnowledgeGraph& kg)
      : n_relations(kg.n_relations), n_entities(kg.n_entities) {}

  int size() const { return kSpecialCount + n_relations + n_entities; }
  int special(Special s) const { return static_cast<int>(s); }
  int filler(int i) const { return static_cast<int>(Special::filler0) + i; }
  int relation(int r) const { return kSpecialCount + r; }
  int entity(int e) const { return kSpecialCount + n_relations + e; }
  bool is_entity(int token) const { return token >= kSpecialCount + n_relations && token < size(); }
  int entity_of(int token) const { return token - kSpecialCount - n_relations; }
  std::string name(int token) const;
};

enum class Template { cloze, qa, paraphrase_the, paraphrase_tell };

// Single-hop prompts; the subject is the last token of every cloze-style form.
//   cloze            [r, s]
//   qa               [ask, r, s, ?]
//   paraphrase_the   [the, r, of, s]
//   paraphrase_tell  [tell, r, s]
std::vector<int> render_fact(const Vocabulary& v, int s, int r, Template t);

// Multi-hop prompts over relations r_1..r_n from subject s:
//   cloze  [r_n, ..., r_1, s]
//   qa     [ask, r_n, ..., r_1, s, ?]
std::vector<int> render_chain(const Vocabulary& v, int s, const std::vector<int>& relations,
                              bool qa);

// "is a" probe of a subject: [isa, s].
std::vector<int> render_kl_prompt(const Vocabulary& v, int s);

struct Example {
  std::vector<int> prompt;
  int answer = 0;
};

struct Corpus {
  std::vector<Example> examples;
};

// Every fact in all four single-hop templates plus every chain in both
// multi-hop formats.
Corpus build_corpus(const KnowledgeGraph& kg);

// One rendered statement per line: "tok tok ... => answer".
std::string corpus_to_text(const Vocabulary& v, const Corpus& corpus);

// --- training --------------------------------------------------------------------

struct TrainConfig {
  int epochs = 60;
  double lr = 2e-3;
  double lr_final_fraction = 0.1;  // linear decay target
  int batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  // Keeps the unembedding equal to the token embedding (gradients summed).
  bool tie_embeddings = false;
  std::uint64_t seed = 7;
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
};

// Next-token cross-entropy on each example's answer slot with AdamW.
// Deterministic given the seeds. Errors: non-finite loss -> ErrorKind::numeric
// naming the epoch; empty corpus -> ErrorKind::input.
ModelWeights train_toy(const ModelConfig& config, const Corpus& corpus,
                       const TrainConfig& train, TrainLog* log = nullptr);

// Greedy prediction at the last position.
int predict(const ModelWeights& w, const std::vector<int>& prompt);

// Fraction of examples answered by argmax.
double accuracy(const ModelWeights& w, const std::vector<Example>& examples);

// --- evaluation instances and editing metrics ---------------------------------------

struct EditRequest {
  int s = 0;
  int r = 0;
  int o = 0;
  int o_star = 0;
  std::vector<int> edit_prompt;                   // T_e
  std::vector<std::vector<int>> paraphrases;
  std::vector<std::vector<int>> prefixes;         // pref_j, may include the empty prefix
  std::vector<int> kl_prompt;                     // T
  // Multi-hop prompts through the edited fact and their post-edit answers,
  // used by the query-layer pass.
  std::vector<std::vector<int>> multi_hop_prompts;
  std::vector<int> multi_hop_targets;
};

struct EvalInstance {
  int chain_id = -1;                // index into KnowledgeGraph::chains
  ReasoningChain chain;             // original chain
  ReasoningChain edited_chain;      // chain after the edits
  std::vector<int> cloze;
  std::vector<int> qa;
  int answer = 0;                   // original final object (token)
  int edited_answer = 0;            // post-edit final object (token)
  std::vector<EditRequest> edits;
  int n_edits() const { return static_cast<int>(edits.size()); }
};

struct InstanceParams {
  std::uint64_t seed = 1;
  int count = 20;
  int hops = 2;
  int n_edits = 1;       // edited hops per instance, <= hops
  int n_prefixes = 4;    // filler prefixes per edit (plus the empty prefix)
};

// Samples instances from kg.chains with edits whose new objects stay inside
// the relation's category pool and yield a different final answer. Edited
// (subject, relation) pairs are unique across the batch and no edit touches
// another instance's chain.
std::vector<EvalInstance> sample_edit_instances(const KnowledgeGraph& kg,
                                                const std::vector<int>& candidate_chains,
                                                const InstanceParams& params);

// Unedited multi-hop instances for every chain (no edits).
std::vector<EvalInstance> chain_instances(const KnowledgeGraph& kg);

struct FilterResult {
  std::vector<int> kept;                       // indices into the input
  std::map<int, std::pair<int, int>> per_category;  // category -> (kept, total)
  bool empty_warning = false;
};

// Keeps instances whose original answer is the argmax for both formats.
FilterResult filter_answerable(const ModelWeights& w, const std::vector<EvalInstance>& instances);

struct MetricsReport {
  std::map<int, double> multi_hop_accuracy;   // by n_edits bucket
  std::map<int, int> bucket_counts;
  double multi_hop_overall = 0.0;
  double efficacy = 0.0;
  double paraphrase = 0.0;
  double specificity = 0.0;
  int n_instances = 0;
  int n_edits = 0;
  int n_probes = 0;
  std::uint64_t seed = 0;
};

// Held-out probe facts sharing no subject or object with any edit.
std::vector<Fact> specificity_probes(const KnowledgeGraph& kg,
                                     const std::vector<EvalInstance>& instances, int count,
                                     std::uint64_t seed);

// Multi-hop success means the cloze or the QA prompt yields the expected
// answer (the edited answer when edited_answers is set).
MetricsReport evaluate(const ModelWeights& w, const KnowledgeGraph& kg,
                       const std::vector<EvalInstance>& instances, bool edited_answers,
                       const std::vector<Fact>& probes, std::uint64_t seed = 0);

Json metrics_to_json(const MetricsReport& m);

}  // namespace qve
