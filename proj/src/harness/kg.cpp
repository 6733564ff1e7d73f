#include <algorithm>
#include <set>
#include <sstream>

#include "qve/error.hpp"
#include "qve/harness.hpp"
#include "qve/rng.hpp"

namespace qve {

const std::vector<std::string>& category_names() {
  static const std::vector<std::string> names = {"NN", "CT", "LG", "CP", "LS", "AT", "ST", "CF"};
  return names;
}

std::optional<int> KnowledgeGraph::object(int s, int r) const {
  auto it = index_.find({s, r});
  if (it == index_.end()) return std::nullopt;
  return facts[it->second].o;
}

const Fact* KnowledgeGraph::find(int s, int r) const {
  auto it = index_.find({s, r});
  return it == index_.end() ? nullptr : &facts[it->second];
}

std::vector<int> KnowledgeGraph::relations_of(int category) const {
  std::vector<int> out;
  for (int r = 0; r < n_relations; ++r) {
    if (relation_category[r] == category) out.push_back(r);
  }
  return out;
}

std::vector<int> KnowledgeGraph::pool_of(int category) const {
  std::vector<int> out;
  for (int e = 0; e < n_entities; ++e) {
    if (entity_category[e] == category) out.push_back(e);
  }
  return out;
}

void KnowledgeGraph::rebuild_index() {
  std::sort(facts.begin(), facts.end());
  index_.clear();
  for (std::size_t i = 0; i < facts.size(); ++i) {
    const auto [it, inserted] = index_.emplace(std::pair{facts[i].s, facts[i].r}, static_cast<int>(i));
    require(inserted, "knowledge graph is not functional in (s, r)");
  }
}

KnowledgeGraph generate_kg(const KgParams& p) {
  require(p.n_relations >= kCategoryCount && p.n_relations % kCategoryCount == 0,
          "n_relations must be a positive multiple of 8");
  require(p.pool_size >= 2, "pool_size must be >= 2");
  require(p.hops >= 1 && p.hops <= 4, "hops must be in [1, 4]");
  require(p.chains_per_category >= 0 && p.extra_facts >= 0, "counts must be non-negative");
  const int pooled = kCategoryCount * p.pool_size;
  require(p.n_entities > pooled, "n_entities must exceed 8 * pool_size");

  KnowledgeGraph kg;
  kg.n_entities = p.n_entities;
  kg.n_relations = p.n_relations;
  kg.pool_size = p.pool_size;
  kg.seed = p.seed;
  kg.relation_category.resize(p.n_relations);
  for (int r = 0; r < p.n_relations; ++r) kg.relation_category[r] = r % kCategoryCount;
  kg.entity_category.assign(p.n_entities, -1);
  for (int e = 0; e < pooled; ++e) kg.entity_category[e] = e / p.pool_size;
  const int n_people = p.n_entities - pooled;

  Rng rng(p.seed);
  std::map<std::pair<int, int>, int> objects;
  std::set<std::vector<int>> seen_chains;
  std::set<int> chain_subjects;

  auto rel_in = [&](int category) {
    return category + kCategoryCount * static_cast<int>(rng.below(p.n_relations / kCategoryCount));
  };
  auto resolve = [&](int s, int r) {
    auto it = objects.find({s, r});
    if (it != objects.end()) return it->second;
    const int c = kg.relation_category[r];
    const int o = c * p.pool_size + static_cast<int>(rng.below(p.pool_size));
    objects.emplace(std::pair{s, r}, o);
    return o;
  };

  const int attempts_per_chain = 200;
  for (int c = 0; c < kCategoryCount; ++c) {
    for (int i = 0; i < p.chains_per_category; ++i) {
      bool placed = false;
      for (int attempt = 0; attempt < attempts_per_chain && !placed; ++attempt) {
        std::vector<int> cats(p.hops);
        cats[p.hops - 1] = c;
        for (int h = p.hops - 2; h >= 0; --h) {
          int a;
          do {
            a = static_cast<int>(rng.below(kCategoryCount));
          } while (a == cats[h + 1]);
          cats[h] = a;
        }
        const int s0 = pooled + static_cast<int>(rng.below(n_people));
        std::vector<int> key = {s0};
        std::vector<int> rels;
        for (int h = 0; h < p.hops; ++h) {
          rels.push_back(rel_in(cats[h]));
          key.push_back(rels.back());
        }
        if (seen_chains.count(key)) continue;
        seen_chains.insert(key);
        ReasoningChain chain;
        chain.category = c;
        int s = s0;
        for (int h = 0; h < p.hops; ++h) {
          const int o = resolve(s, rels[h]);
          chain.hops.push_back({s, rels[h], o});
          s = o;
        }
        chain_subjects.insert(s0);
        kg.chains.push_back(std::move(chain));
        placed = true;
      }
      require(placed, "cannot place the requested number of distinct chains");
    }
  }

  std::vector<int> spare;
  for (int e = pooled; e < p.n_entities; ++e) {
    if (!chain_subjects.count(e)) spare.push_back(e);
  }
  if (p.extra_facts > 0) require(!spare.empty(), "no spare subjects for extra facts");
  int added = 0;
  for (int tries = 0; added < p.extra_facts && tries < 100 * p.extra_facts; ++tries) {
    const int s = spare[rng.below(spare.size())];
    const int r = static_cast<int>(rng.below(p.n_relations));
    if (objects.count({s, r})) continue;
    resolve(s, r);
    ++added;
  }
  require(added == p.extra_facts, "cannot place the requested number of extra facts");

  for (const auto& [sr, o] : objects) kg.facts.push_back({sr.first, sr.second, o});
  kg.rebuild_index();
  return kg;
}

namespace {

Json fact_json(const Fact& f) { return Json::array({f.s, f.r, f.o}); }

Fact fact_from(const Json& j) {
  require(j.is_array() && j.size() == 3, "fact must be [s, r, o]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

std::string entity_name(const KnowledgeGraph& kg, int e) {
  const int c = kg.entity_category[e];
  if (c < 0) return "p" + std::to_string(e);
  return category_names()[c] + ".e" + std::to_string(e);
}

std::string relation_name(const KnowledgeGraph& kg, int r) {
  return category_names()[kg.relation_category[r]] + ".r" + std::to_string(r);
}

}  // namespace

Json kg_to_json(const KnowledgeGraph& kg) {
  Json entities = Json::array(), relations = Json::array(), facts = Json::array(),
       chains = Json::array(), categories = Json::object();
  for (int e = 0; e < kg.n_entities; ++e) entities.push_back(entity_name(kg, e));
  for (int r = 0; r < kg.n_relations; ++r) relations.push_back(relation_name(kg, r));
  for (const auto& f : kg.facts) facts.push_back(fact_json(f));
  for (const auto& ch : kg.chains) {
    Json hops = Json::array();
    for (const auto& f : ch.hops) hops.push_back(fact_json(f));
    chains.push_back({{"hops", hops}, {"category", category_names()[ch.category]}});
  }
  for (int c = 0; c < kCategoryCount; ++c) {
    categories[category_names()[c]] = {{"relations", kg.relations_of(c)}, {"pool", kg.pool_of(c)}};
  }
  return {{"entities", entities},
          {"relations", relations},
          {"entity_categories", kg.entity_category},
          {"relation_categories", kg.relation_category},
          {"facts", facts},
          {"chains", chains},
          {"categories", categories},
          {"pool_size", kg.pool_size},
          {"seed", kg.seed}};
}

KnowledgeGraph kg_from_json(const Json& j) {
  KnowledgeGraph kg;
  try {
    kg.n_entities = static_cast<int>(j.at("entities").size());
    kg.n_relations = static_cast<int>(j.at("relations").size());
    kg.entity_category = j.at("entity_categories").get<std::vector<int>>();
    kg.relation_category = j.at("relation_categories").get<std::vector<int>>();
    kg.pool_size = j.at("pool_size").get<int>();
    kg.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& f : j.at("facts")) kg.facts.push_back(fact_from(f));
    const auto& names = category_names();
    for (const auto& cj : j.at("chains")) {
      ReasoningChain ch;
      const auto cat = cj.at("category").get<std::string>();
      auto it = std::find(names.begin(), names.end(), cat);
      require(it != names.end(), "unknown category '" + cat + "'");
      ch.category = static_cast<int>(it - names.begin());
      for (const auto& f : cj.at("hops")) ch.hops.push_back(fact_from(f));
      kg.chains.push_back(std::move(ch));
    }
  } catch (const Json::exception& e) {
    fail(ErrorKind::shape_mismatch, std::string("malformed knowledge graph: ") + e.what());
  }
  require(static_cast<int>(kg.entity_category.size()) == kg.n_entities &&
              static_cast<int>(kg.relation_category.size()) == kg.n_relations,
          "knowledge graph category arrays do not match entity/relation lists");
  for (const auto& f : kg.facts) {
    require(f.s >= 0 && f.s < kg.n_entities && f.o >= 0 && f.o < kg.n_entities && f.r >= 0 &&
                f.r < kg.n_relations,
            "fact references an unknown entity or relation");
  }
  kg.rebuild_index();
  for (const auto& ch : kg.chains) {
    for (std::size_t h = 0; h < ch.hops.size(); ++h) {
      require(kg.object(ch.hops[h].s, ch.hops[h].r) == ch.hops[h].o, "chain hop is not a fact");
      if (h + 1 < ch.hops.size()) require(ch.hops[h].o == ch.hops[h + 1].s, "chain is not linked");
    }
  }
  return kg;
}

// --- vocabulary and templates -----------------------------------------------------

std::string Vocabulary::name(int token) const {
  static const char* specials[] = {"<ask>", "?", "the", "of", "tell", "isa"};
  if (token < static_cast<int>(Special::filler0)) return specials[token];
  if (token < kSpecialCount) return "<f" + std::to_string(token - static_cast<int>(Special::filler0)) + ">";
  if (token < kSpecialCount + n_relations) return "r" + std::to_string(token - kSpecialCount);
  return "e" + std::to_string(entity_of(token));
}

std::vector<int> render_fact(const Vocabulary& v, int s, int r, Template t) {
  const int rt = v.relation(r), st = v.entity(s);
  switch (t) {
    case Template::cloze: return {rt, st};
    case Template::qa: return {v.special(Special::ask), rt, st, v.special(Special::qmark)};
    case Template::paraphrase_the: return {v.special(Special::the), rt, v.special(Special::of), st};
    case Template::paraphrase_tell: return {v.special(Special::tell), rt, st};
  }
  return {};
}

std::vector<int> render_chain(const Vocabulary& v, int s, const std::vector<int>& relations,
                              bool qa) {
  std::vector<int> out;
  if (qa) out.push_back(v.special(Special::ask));
  for (auto it = relations.rbegin(); it != relations.rend(); ++it) out.push_back(v.relation(*it));
  out.push_back(v.entity(s));
  if (qa) out.push_back(v.special(Special::qmark));
  return out;
}

std::vector<int> render_kl_prompt(const Vocabulary& v, int s) {
  return {v.special(Special::isa), v.entity(s)};
}

Corpus build_corpus(const KnowledgeGraph& kg) {
  const Vocabulary v(kg);
  Corpus corpus;
  for (const auto& f : kg.facts) {
    for (Template t : {Template::cloze, Template::qa, Template::paraphrase_the, Template::paraphrase_tell}) {
      corpus.examples.push_back({render_fact(v, f.s, f.r, t), v.entity(f.o)});
    }
  }
  for (const auto& ch : kg.chains) {
    if (ch.hops.size() < 2) continue;
    std::vector<int> rels;
    for (const auto& f : ch.hops) rels.push_back(f.r);
    for (bool qa : {false, true}) {
      corpus.examples.push_back({render_chain(v, ch.hops.front().s, rels, qa), v.entity(ch.hops.back().o)});
    }
  }
  return corpus;
}

std::string corpus_to_text(const Vocabulary& v, const Corpus& corpus) {
  std::ostringstream os;
  for (const auto& ex : corpus.examples) {
    for (int t : ex.prompt) os << v.name(t) << ' ';
    os << "=> " << v.name(ex.answer) << '\n';
  }
  return os.str();
}

}  // namespace qve
