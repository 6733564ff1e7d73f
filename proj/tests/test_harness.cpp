#include <set>

#include "doctest.h"
#include "qve/error.hpp"
#include "qve/harness.hpp"

using namespace qve;

namespace {

KgParams small_params(std::uint64_t seed = 3) {
  KgParams p;
  p.seed = seed;
  p.n_entities = 60;
  p.n_relations = 8;
  p.pool_size = 4;
  p.chains_per_category = 2;
  p.extra_facts = 6;
  return p;
}

ModelConfig small_model(const Vocabulary& v) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 24;
  c.d_ffn = 64;
  c.vocab_size = v.size();
  c.max_seq = 8;
  c.seed = 5;
  return c;
}

std::vector<int> all_chains(const KnowledgeGraph& kg) {
  std::vector<int> out(kg.chains.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(i);
  return out;
}

// One small trained model shared by the tests that need a fitted corpus.
const ModelWeights& trained_small() {
  static const ModelWeights w = [] {
    const KnowledgeGraph kg = generate_kg(small_params());
    TrainConfig tc;
    tc.epochs = 60;
    tc.lr = 5e-3;
    return train_toy(small_model(Vocabulary(kg)), build_corpus(kg), tc);
  }();
  return w;
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("generation is deterministic in the seed") {
  const Json a = kg_to_json(generate_kg(small_params(3)));
  CHECK(a.dump() == kg_to_json(generate_kg(small_params(3))).dump());
  CHECK(a.dump() != kg_to_json(generate_kg(small_params(4))).dump());
}

TEST_CASE("chains are linked and end in their category") {
  const KnowledgeGraph kg = generate_kg(small_params());
  CHECK(kg.chains.size() == 16);
  for (const auto& ch : kg.chains) {
    REQUIRE(ch.hops.size() == 2);
    CHECK(ch.hops[0].o == ch.hops[1].s);
    CHECK(kg.relation_category[ch.hops.back().r] == ch.category);
    for (const auto& f : ch.hops) CHECK(kg.object(f.s, f.r) == f.o);
    CHECK(kg.entity_category[ch.hops.back().o] == ch.category);
  }
}

TEST_CASE("categories have disjoint relation sets") {
  const KnowledgeGraph kg = generate_kg(small_params());
  CHECK(category_names().size() == kCategoryCount);
  std::set<int> seen;
  for (int c = 0; c < kCategoryCount; ++c) {
    const auto rels = kg.relations_of(c);
    CHECK(!rels.empty());
    for (int r : rels) CHECK(seen.insert(r).second);
  }
  CHECK(static_cast<int>(seen.size()) == kg.n_relations);
}

TEST_CASE("relations are functional") {
  const KnowledgeGraph kg = generate_kg(small_params());
  std::set<std::pair<int, int>> keys;
  for (const auto& f : kg.facts) CHECK(keys.insert({f.s, f.r}).second);
}

TEST_CASE("json round trip preserves the graph") {
  const KnowledgeGraph kg = generate_kg(small_params());
  const Json j = kg_to_json(kg);
  for (const char* k : {"entities", "relations", "facts", "chains", "categories", "seed"}) {
    CHECK(j.contains(k));
  }
  const KnowledgeGraph back = kg_from_json(j);
  CHECK(kg_to_json(back) == j);
  CHECK(back.facts == kg.facts);

  Json broken = j;
  broken["facts"][0][2] = 100000;
  CHECK_THROWS_AS(kg_from_json(broken), Error);
}

TEST_CASE("infeasible parameters are input errors") {
  KgParams p = small_params();
  p.n_entities = 20;
  CHECK_THROWS_AS(generate_kg(p), Error);
  p = small_params();
  p.n_relations = 12;
  CHECK_THROWS_AS(generate_kg(p), Error);
  p = small_params();
  p.hops = 5;
  CHECK_THROWS_AS(generate_kg(p), Error);
}

TEST_CASE("templates keep the subject last") {
  const KnowledgeGraph kg = generate_kg(small_params());
  const Vocabulary v(kg);
  const int s = 40, r = 3;
  CHECK(render_fact(v, s, r, Template::cloze) == std::vector<int>{v.relation(r), v.entity(s)});
  CHECK(render_fact(v, s, r, Template::qa).size() == 4);
  CHECK(render_fact(v, s, r, Template::paraphrase_the).back() == v.entity(s));
  CHECK(render_fact(v, s, r, Template::paraphrase_tell).back() == v.entity(s));
  CHECK(render_chain(v, s, {1, 2}, false) ==
        std::vector<int>{v.relation(2), v.relation(1), v.entity(s)});
  CHECK(render_chain(v, s, {1, 2}, true).front() == v.special(Special::ask));
  CHECK(v.is_entity(v.entity(s)));
  CHECK(v.entity_of(v.entity(s)) == s);
  const Corpus c = build_corpus(kg);
  CHECK(c.examples.size() == 4 * kg.facts.size() + 2 * kg.chains.size());
}

TEST_CASE("zero epochs return the initialization bit-exactly") {
  const KnowledgeGraph kg = generate_kg(small_params());
  const ModelConfig c = small_model(Vocabulary(kg));
  TrainConfig tc;
  tc.epochs = 0;
  CHECK(train_toy(c, build_corpus(kg), tc) == initialize(c));
  CHECK_THROWS_AS(train_toy(c, Corpus{}, tc), Error);
}

TEST_CASE("training is deterministic and lowers the loss") {
  const KnowledgeGraph kg = generate_kg(small_params());
  const ModelConfig c = small_model(Vocabulary(kg));
  TrainConfig tc;
  tc.epochs = 3;
  TrainLog a, b;
  const ModelWeights wa = train_toy(c, build_corpus(kg), tc, &a);
  const ModelWeights wb = train_toy(c, build_corpus(kg), tc, &b);
  CHECK(wa == wb);
  REQUIRE(a.epoch_loss.size() == 3);
  CHECK(a.epoch_loss.back() < a.epoch_loss.front());

  tc.tie_embeddings = true;
  const ModelWeights tied = train_toy(c, build_corpus(kg), tc);
  CHECK(tied.unembed == tied.embed);
}

TEST_CASE("filtered instances answer perfectly") {
  const KnowledgeGraph kg = generate_kg(small_params());
  const ModelWeights& w = trained_small();
  const auto inst = chain_instances(kg);
  const FilterResult f = filter_answerable(w, inst);
  REQUIRE(!f.empty_warning);
  std::vector<EvalInstance> kept;
  for (int i : f.kept) kept.push_back(inst[i]);
  CHECK(filter_answerable(w, kept).kept.size() == kept.size());
  const MetricsReport m = evaluate(w, kg, kept, false, {});
  CHECK(m.multi_hop_overall == 1.0);
  int total = 0;
  for (const auto& [cat, kt] : f.per_category) total += kt.second;
  CHECK(total == static_cast<int>(inst.size()));
}

TEST_CASE("edit instances have disjoint answers") {
  const KnowledgeGraph kg = generate_kg(small_params());
  InstanceParams ip;
  ip.count = 6;
  const auto inst = sample_edit_instances(kg, all_chains(kg), ip);
  REQUIRE(!inst.empty());
  std::set<std::pair<int, int>> edited;
  for (const auto& i : inst) {
    CHECK(i.answer != i.edited_answer);
    CHECK(i.edited_chain.hops[0].o == i.edited_chain.hops[1].s);
    REQUIRE(i.n_edits() == 1);
    const auto& e = i.edits[0];
    CHECK(e.o != e.o_star);
    CHECK(kg.object(e.s, e.r) == e.o);
    CHECK(kg.entity_category[e.o_star] == kg.relation_category[e.r]);
    CHECK(edited.insert({e.s, e.r}).second);
    CHECK(e.prefixes.size() == 5);
    CHECK(e.multi_hop_targets.front() == i.edited_answer);
  }

  // The unedited base model never produces the edited answers it was not trained on.
  const ModelWeights& w = trained_small();
  std::vector<EvalInstance> answerable;
  for (int k : filter_answerable(w, inst).kept) answerable.push_back(inst[k]);
  if (!answerable.empty()) {
    CHECK(evaluate(w, kg, answerable, true, {}).multi_hop_overall == 0.0);
  }
}

TEST_CASE("sampling is deterministic") {
  const KnowledgeGraph kg = generate_kg(small_params());
  InstanceParams ip;
  ip.count = 4;
  const auto a = sample_edit_instances(kg, all_chains(kg), ip);
  const auto b = sample_edit_instances(kg, all_chains(kg), ip);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].chain_id == b[i].chain_id);
    CHECK(a[i].edits[0].o_star == b[i].edits[0].o_star);
  }
}

TEST_CASE("specificity probes avoid every edited entity") {
  const KnowledgeGraph kg = generate_kg(small_params());
  InstanceParams ip;
  ip.count = 4;
  const auto inst = sample_edit_instances(kg, all_chains(kg), ip);
  const auto probes = specificity_probes(kg, inst, 20, 1);
  CHECK(probes.size() <= 20);
  for (const auto& f : probes) {
    for (const auto& i : inst) {
      for (const auto& e : i.edits) {
        for (int x : {e.s, e.o, e.o_star}) {
          CHECK(f.s != x);
          CHECK(f.o != x);
        }
      }
    }
  }
  CHECK(specificity_probes(kg, inst, 20, 1) == probes);
}

TEST_CASE("metrics stay in range and serialize by bucket") {
  const KnowledgeGraph kg = generate_kg(small_params());
  const ModelWeights& w = trained_small();
  InstanceParams ip;
  ip.count = 4;
  const auto inst = sample_edit_instances(kg, all_chains(kg), ip);
  const auto probes = specificity_probes(kg, inst, 20, 1);
  const MetricsReport m = evaluate(w, kg, inst, false, probes, 9);
  for (double x : {m.multi_hop_overall, m.efficacy, m.paraphrase, m.specificity}) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
  const Json j = metrics_to_json(m);
  CHECK(j["multi_hop_accuracy"].contains("1-edit"));
  CHECK(j["seed"] == 9);
  CHECK_THROWS_AS(evaluate(w, kg, {}, false, probes), Error);

  // Specificity of an unedited model is its accuracy on the probe facts.
  const Vocabulary v(kg);
  std::vector<Example> ex;
  for (const auto& f : probes) ex.push_back({render_fact(v, f.s, f.r, Template::cloze), v.entity(f.o)});
  CHECK(m.specificity == accuracy(w, ex));
}

}  // TEST_SUITE
