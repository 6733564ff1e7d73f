#include <algorithm>
#include <set>

#include "qve/error.hpp"
#include "qve/harness.hpp"
#include "qve/rng.hpp"

namespace qve {

namespace {

std::vector<int> relations_of(const ReasoningChain& ch) {
  std::vector<int> rels;
  for (const auto& f : ch.hops) rels.push_back(f.r);
  return rels;
}

void render_prompts(const Vocabulary& v, EvalInstance& inst) {
  const auto rels = relations_of(inst.chain);
  const int s0 = inst.chain.hops.front().s;
  inst.cloze = render_chain(v, s0, rels, false);
  inst.qa = render_chain(v, s0, rels, true);
  inst.answer = v.entity(inst.chain.hops.back().o);
  inst.edited_answer = v.entity(inst.edited_chain.hops.back().o);
}

// Walks the chain applying new objects on the first n_edits hops. Returns
// false when some hop of the edited chain is not a known fact.
bool build_edited_chain(const KnowledgeGraph& kg, const ReasoningChain& chain,
                        const std::vector<int>& new_objects, ReasoningChain& out,
                        std::vector<Fact>& edits) {
  out = chain;
  out.hops.clear();
  edits.clear();
  int s = chain.hops.front().s;
  for (std::size_t h = 0; h < chain.hops.size(); ++h) {
    const int r = chain.hops[h].r;
    const auto old = kg.object(s, r);
    if (!old) return false;
    if (h < new_objects.size()) {
      if (new_objects[h] == *old) return false;
      edits.push_back({s, r, *old});
      out.hops.push_back({s, r, new_objects[h]});
    } else {
      out.hops.push_back({s, r, *old});
    }
    s = out.hops.back().o;
  }
  return true;
}

}  // namespace

std::vector<EvalInstance> chain_instances(const KnowledgeGraph& kg) {
  const Vocabulary v(kg);
  std::vector<EvalInstance> out;
  for (std::size_t i = 0; i < kg.chains.size(); ++i) {
    const auto& ch = kg.chains[i];
    if (ch.hops.size() < 2) continue;
    EvalInstance inst;
    inst.chain_id = static_cast<int>(i);
    inst.chain = ch;
    inst.edited_chain = ch;
    render_prompts(v, inst);
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<EvalInstance> sample_edit_instances(const KnowledgeGraph& kg,
                                                const std::vector<int>& candidate_chains,
                                                const InstanceParams& p) {
  require(p.count >= 0, "instance count must be non-negative");
  require(p.n_edits >= 1 && p.n_edits <= p.hops, "n_edits must be in [1, hops]");
  require(p.n_prefixes >= 0 && p.n_prefixes <= kFillerCount, "n_prefixes must be in [0, 8]");
  const Vocabulary v(kg);
  Rng rng(p.seed);
  std::vector<int> order;
  for (int c : candidate_chains) {
    require(c >= 0 && c < static_cast<int>(kg.chains.size()), "candidate chain out of range");
    if (static_cast<int>(kg.chains[c].hops.size()) == p.hops) order.push_back(c);
  }
  rng.shuffle(order);

  std::vector<EvalInstance> out;
  std::set<std::pair<int, int>> edited_pairs;  // (s, r) rewritten by some edit
  std::set<std::pair<int, int>> used_pairs;    // (s, r) read by some accepted chain
  for (int ci : order) {
    if (static_cast<int>(out.size()) == p.count) break;
    const auto& chain = kg.chains[ci];
    bool accepted = false;
    // Try new-object combinations in random order until one yields a
    // complete chain with a different final answer.
    for (int attempt = 0; attempt < 64 && !accepted; ++attempt) {
      std::vector<int> new_objects;
      for (int h = 0; h < p.n_edits; ++h) {
        const auto pool = kg.pool_of(kg.relation_category[chain.hops[h].r]);
        new_objects.push_back(pool[rng.below(pool.size())]);
      }
      ReasoningChain edited;
      std::vector<Fact> edits;
      if (!build_edited_chain(kg, chain, new_objects, edited, edits)) continue;
      if (edited.hops.back().o == chain.hops.back().o) continue;
      bool clash = false;
      for (const auto& e : edits) {
        if (edited_pairs.count({e.s, e.r}) || used_pairs.count({e.s, e.r})) clash = true;
      }
      for (const auto& f : chain.hops) clash = clash || edited_pairs.count({f.s, f.r});
      for (const auto& f : edited.hops) clash = clash || edited_pairs.count({f.s, f.r});
      if (clash) continue;

      EvalInstance inst;
      inst.chain_id = ci;
      inst.chain = chain;
      inst.edited_chain = edited;
      render_prompts(v, inst);
      for (std::size_t k = 0; k < edits.size(); ++k) {
        EditRequest req;
        req.s = edits[k].s;
        req.r = edits[k].r;
        req.o = edits[k].o;
        req.o_star = new_objects[k];
        req.edit_prompt = render_fact(v, req.s, req.r, Template::cloze);
        req.paraphrases = {render_fact(v, req.s, req.r, Template::paraphrase_the),
                           render_fact(v, req.s, req.r, Template::paraphrase_tell)};
        req.prefixes.push_back({});
        std::vector<int> fillers(kFillerCount);
        for (int f = 0; f < kFillerCount; ++f) fillers[f] = f;
        rng.shuffle(fillers);
        for (int j = 0; j < p.n_prefixes; ++j) req.prefixes.push_back({v.filler(fillers[j])});
        req.kl_prompt = render_kl_prompt(v, req.s);
        if (k == 0) {
          req.multi_hop_prompts = {inst.cloze, inst.qa};
          req.multi_hop_targets = {inst.edited_answer, inst.edited_answer};
        }
        inst.edits.push_back(std::move(req));
      }
      for (const auto& e : edits) edited_pairs.insert({e.s, e.r});
      for (const auto& f : chain.hops) used_pairs.insert({f.s, f.r});
      for (const auto& f : edited.hops) used_pairs.insert({f.s, f.r});
      out.push_back(std::move(inst));
      accepted = true;
    }
  }
  return out;
}

FilterResult filter_answerable(const ModelWeights& w, const std::vector<EvalInstance>& instances) {
  FilterResult r;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    const bool ok = predict(w, inst.cloze) == inst.answer && predict(w, inst.qa) == inst.answer;
    auto& [kept, total] = r.per_category[inst.chain.category];
    ++total;
    if (ok) {
      ++kept;
      r.kept.push_back(static_cast<int>(i));
    }
  }
  r.empty_warning = r.kept.empty();
  return r;
}

std::vector<Fact> specificity_probes(const KnowledgeGraph& kg,
                                     const std::vector<EvalInstance>& instances, int count,
                                     std::uint64_t seed) {
  std::set<int> touched;
  for (const auto& inst : instances) {
    for (const auto& e : inst.edits) {
      touched.insert(e.s);
      touched.insert(e.o);
      touched.insert(e.o_star);
    }
  }
  std::vector<Fact> pool;
  for (const auto& f : kg.facts) {
    if (!touched.count(f.s) && !touched.count(f.o)) pool.push_back(f);
  }
  Rng rng(seed);
  rng.shuffle(pool);
  if (static_cast<int>(pool.size()) > count) pool.resize(count);
  return pool;
}

MetricsReport evaluate(const ModelWeights& w, const KnowledgeGraph& kg,
                       const std::vector<EvalInstance>& instances, bool edited_answers,
                       const std::vector<Fact>& probes, std::uint64_t seed) {
  require(!instances.empty(), "evaluation needs at least one instance");
  const Vocabulary v(kg);
  MetricsReport m;
  m.seed = seed;
  m.n_instances = static_cast<int>(instances.size());
  std::map<int, int> bucket_hits;
  int hits = 0, edits = 0, efficacy_hits = 0, para_total = 0, para_hits = 0;
  for (const auto& inst : instances) {
    const int expected = edited_answers ? inst.edited_answer : inst.answer;
    const bool ok = predict(w, inst.cloze) == expected || predict(w, inst.qa) == expected;
    hits += ok;
    bucket_hits[inst.n_edits()] += ok;
    ++m.bucket_counts[inst.n_edits()];
    for (const auto& e : inst.edits) {
      const int obj = v.entity(edited_answers ? e.o_star : e.o);
      ++edits;
      efficacy_hits += predict(w, e.edit_prompt) == obj;
      for (const auto& pp : e.paraphrases) {
        ++para_total;
        para_hits += predict(w, pp) == obj;
      }
    }
  }
  for (const auto& [bucket, count] : m.bucket_counts) {
    m.multi_hop_accuracy[bucket] = static_cast<double>(bucket_hits[bucket]) / count;
  }
  m.multi_hop_overall = static_cast<double>(hits) / m.n_instances;
  m.n_edits = edits;
  m.efficacy = edits ? static_cast<double>(efficacy_hits) / edits : 0.0;
  m.paraphrase = para_total ? static_cast<double>(para_hits) / para_total : 0.0;
  int probe_hits = 0;
  for (const auto& f : probes) {
    probe_hits += predict(w, render_fact(v, f.s, f.r, Template::cloze)) == v.entity(f.o);
  }
  m.n_probes = static_cast<int>(probes.size());
  m.specificity = probes.empty() ? 0.0 : static_cast<double>(probe_hits) / probes.size();
  return m;
}

Json metrics_to_json(const MetricsReport& m) {
  Json buckets = Json::object();
  for (const auto& [b, acc] : m.multi_hop_accuracy) {
    buckets[std::to_string(b) + "-edit"] = {{"accuracy", acc}, {"count", m.bucket_counts.at(b)}};
  }
  return {{"multi_hop_accuracy", buckets},
          {"multi_hop_overall", m.multi_hop_overall},
          {"efficacy", m.efficacy},
          {"paraphrase", m.paraphrase},
          {"specificity", m.specificity},
          {"counts", {{"instances", m.n_instances}, {"edits", m.n_edits}, {"probes", m.n_probes}}},
          {"seed", m.seed}};
}

}  // namespace qve
