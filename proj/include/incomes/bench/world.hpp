#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "incomes/core/error.hpp"
#include "incomes/core/rng.hpp"
#include "incomes/gist/pool.hpp"

namespace incomes {

/// Token inventory of the synthetic language. Layout: punctuation, filler
/// words, four tokens per relation (two surface forms of two words each),
/// entities, and finally the gist token as the last id.
class Vocab {
 public:
  static constexpr int kNewline = 0, kQuestion = 1, kPeriod = 2, kQ = 3, kColon = 4, kComma = 5;

  Vocab() = default;
  Vocab(std::size_t vocab_size, std::size_t n_relations) : size_(vocab_size), n_relations_(n_relations) {
    names_ = {"<nl>", "?", ".", "Q", ":", ","};
    for (const char* w : kFillers) names_.emplace_back(w);
    relation_base_ = static_cast<int>(names_.size());
    for (std::size_t r = 0; r < n_relations; ++r)
      for (int f = 0; f < 2; ++f)
        for (int w = 0; w < 2; ++w) names_.push_back("r" + std::to_string(r) + (w ? "b" : "a") + std::to_string(f));
    entity_base_ = static_cast<int>(names_.size());
    if (names_.size() + 2 > vocab_size)
      throw ContractError("vocab: size " + std::to_string(vocab_size) + " too small for " + std::to_string(n_relations) +
                          " relations");
    entity_capacity_ = vocab_size - 1 - names_.size();
    for (std::size_t e = 0; e < entity_capacity_; ++e) names_.push_back("e" + std::to_string(e));
    names_.push_back("<gist>");
    for (std::size_t i = 0; i < names_.size(); ++i) index_.emplace(names_[i], static_cast<int>(i));
  }

  std::size_t size() const { return size_; }
  std::size_t entity_capacity() const { return entity_capacity_; }
  int gist() const { return static_cast<int>(size_) - 1; }
  int entity(int e) const { return entity_base_ + e; }
  int entity_of_token(int tok) const { return tok - entity_base_; }
  bool is_entity(int tok) const { return tok >= entity_base_ && tok < gist(); }
  /// Word `w` (0/1) of surface form `form` (0/1) of relation `r`.
  int relation_word(int r, int form, int w) const { return relation_base_ + r * 4 + form * 2 + w; }
  int word(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw IndexError("vocab: unknown word " + w);
    return it->second;
  }
  const std::string& name(int tok) const { return names_.at(static_cast<std::size_t>(tok)); }

  std::string render(const std::vector<int>& toks) const {
    std::string s;
    for (int t : toks) s += (s.empty() ? "" : " ") + name(t);
    return s;
  }

 private:
  static constexpr const char* kFillers[] = {"fact", "the",     "of",   "is",      "now", "update", "has",
                                             "as",   "from",    "on",   "news",    "it",  "reported", "that",
                                             "note", "changed", "its",  "and",     "which", "does",  "have"};
  std::size_t size_ = 0, n_relations_ = 0, entity_capacity_ = 0;
  int relation_base_ = 0, entity_base_ = 0;
  std::vector<std::string> names_;
  std::unordered_map<std::string, int> index_;
};

/// A counterfactual change of one fact (subject, relation) -> new object,
/// together with how its statement is rendered.
struct Override {
  int subject = 0, relation = 0, old_object = 0, new_object = 0;
  int form = 0;  // relation surface form used in the statement
  int templ = 0;  // 0..2 fact statements, 3 free-text sentence
};

struct WorldSpec {
  std::uint64_t seed = 0;
  std::size_t vocab_size = 512;
  std::size_t n_entities = 0;  // 0: every free vocabulary slot
  std::size_t n_relations = 12;
  double density = 0.35;  // fraction of (subject, relation) pairs holding a base fact
  std::size_t n_chains = 150;  // 4-hop override chains
  std::size_t n_singles = 700;
  double free_text_rate = 0.15;

  nlohmann::json to_json() const {
    return {{"seed", seed},           {"vocab_size", vocab_size}, {"n_entities", n_entities},
            {"n_relations", n_relations}, {"density", density},       {"n_chains", n_chains},
            {"n_singles", n_singles}, {"free_text_rate", free_text_rate}};
  }
  static WorldSpec from_json(const nlohmann::json& j) {
    WorldSpec w;
    auto get = [&](const char* key, auto& field) {
      if (!j.contains(key)) return;
      try {
        j.at(key).get_to(field);
      } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("world config: field 'world.") + key + "': " + e.what());
      }
    };
    get("seed", w.seed);
    get("vocab_size", w.vocab_size);
    get("n_entities", w.n_entities);
    get("n_relations", w.n_relations);
    get("density", w.density);
    get("n_chains", w.n_chains);
    get("n_singles", w.n_singles);
    get("free_text_rate", w.free_text_rate);
    return w;
  }
};

/// Entities, relations, base facts and a fixed set of counterfactual
/// overrides. Overrides are functional (one per subject/relation) and all
/// disagree with the base fact they replace.
class SynthWorld {
 public:
  WorldSpec spec;
  Vocab vocab;
  std::size_t n_entities = 0, n_relations = 0;
  std::vector<int> base;  // [subject * n_relations + relation] -> object or -1
  std::vector<std::pair<int, int>> base_facts;  // (subject, relation) with a base object
  std::vector<std::vector<int>> subject_relations;  // relations with a base fact, per subject
  std::vector<Override> overrides;
  std::vector<std::vector<std::size_t>> chains;  // override indices, subject of hop i+1 = object of hop i
  std::vector<std::size_t> singles;

  int base_object(int s, int r) const { return base[static_cast<std::size_t>(s) * n_relations + static_cast<std::size_t>(r)]; }
  const std::vector<int>& relations_of(int s) const { return subject_relations[static_cast<std::size_t>(s)]; }

  // ---- rendering ----

  std::vector<int> statement(const Override& o) const {
    const int A = vocab.relation_word(o.relation, o.form, 0), B = vocab.relation_word(o.relation, o.form, 1);
    const int s = vocab.entity(o.subject), ob = vocab.entity(o.new_object);
    auto w = [&](const char* x) { return vocab.word(x); };
    switch (o.templ) {
      case 0: return {w("fact"), Vocab::kColon, w("the"), A, B, w("of"), s, w("is"), w("now"), ob, Vocab::kPeriod};
      case 1: return {w("update"), Vocab::kColon, s, w("has"), ob, w("as"), A, B, w("from"), w("now"), w("on"), Vocab::kPeriod};
      case 2:
        return {w("news"), Vocab::kColon, w("it"), w("is"), w("reported"), w("that"), w("the"), A, B, w("of"), s, w("is"), ob,
                Vocab::kPeriod};
      default:
        return {w("note"), Vocab::kColon, s, w("changed"), w("its"), A, B, Vocab::kComma, w("and"), w("it"), w("is"), ob,
                w("now"), Vocab::kPeriod};
    }
  }

  EditRecord edit_record(const Override& o, std::int64_t id, bool chain_component = false) const {
    EditKind k = o.templ == 3 ? EditKind::free_text : (chain_component ? EditKind::multi_hop_component : EditKind::fact_triple);
    return {id, statement(o), k};
  }

  /// "Q : A B of s ?" with the given relation form.
  std::vector<int> recall_query(int s, int r, int form) const {
    return {Vocab::kQ, Vocab::kColon, vocab.relation_word(r, form, 0), vocab.relation_word(r, form, 1), vocab.word("of"),
            vocab.entity(s), Vocab::kQuestion};
  }

  /// "Q : which A B does s have ?" with the given relation form.
  std::vector<int> paraphrase_query(int s, int r, int form) const {
    return {Vocab::kQ,         Vocab::kColon,      vocab.word("which"), vocab.relation_word(r, form, 0),
            vocab.relation_word(r, form, 1), vocab.word("does"), vocab.entity(s), vocab.word("have"),
            Vocab::kQuestion};
  }

  /// "Q : A_h B_h of ... of A_1 B_1 of s ?" composing relations[0] first.
  std::vector<int> multi_hop_query(int s, const std::vector<int>& relations, const std::vector<int>& forms) const {
    std::vector<int> q{Vocab::kQ, Vocab::kColon};
    for (std::size_t i = relations.size(); i-- > 0;) {
      q.push_back(vocab.relation_word(relations[i], forms[i], 0));
      q.push_back(vocab.relation_word(relations[i], forms[i], 1));
      q.push_back(vocab.word("of"));
    }
    q.push_back(vocab.entity(s));
    q.push_back(Vocab::kQuestion);
    return q;
  }

  // ---- sampling of fresh counterfactuals ----

  /// Random override of an existing base fact not in `used` (keys s*n_r+r).
  std::optional<Override> sample_override(Rng& rng, const std::set<std::size_t>& used, int subject = -1) const {
    for (int attempt = 0; attempt < 64; ++attempt) {
      int s, r;
      if (subject >= 0) {
        const auto& rels = relations_of(subject);
        if (rels.empty()) return std::nullopt;
        s = subject;
        r = rels[rng.below(rels.size())];
      } else {
        const auto& f = base_facts[rng.below(base_facts.size())];
        s = f.first;
        r = f.second;
      }
      if (used.count(key(s, r))) continue;
      Override o;
      o.subject = s;
      o.relation = r;
      o.old_object = base_object(s, r);
      do o.new_object = static_cast<int>(rng.below(n_entities));
      while (o.new_object == o.old_object || o.new_object == s || relations_of(o.new_object).empty());
      o.form = static_cast<int>(rng.below(2));
      o.templ = rng.uniform() < spec.free_text_rate ? 3 : static_cast<int>(rng.below(3));
      return o;
    }
    return std::nullopt;
  }

  /// Chain of `hops` overrides where each hop's subject is the previous hop's new object.
  std::optional<std::vector<Override>> sample_chain(Rng& rng, std::size_t hops, const std::set<std::size_t>& used) const {
    for (int attempt = 0; attempt < 64; ++attempt) {
      std::set<std::size_t> local = used;
      std::set<int> subjects;
      std::vector<Override> chain;
      int subject = -1;
      for (std::size_t h = 0; h < hops; ++h) {
        auto o = sample_override(rng, local, subject);
        if (!o || subjects.count(o->subject) || subjects.count(o->new_object)) break;
        subjects.insert(o->subject);
        local.insert(key(o->subject, o->relation));
        chain.push_back(*o);
        subject = o->new_object;
      }
      if (chain.size() == hops) return chain;
    }
    return std::nullopt;
  }

  std::size_t key(int s, int r) const { return static_cast<std::size_t>(s) * n_relations + static_cast<std::size_t>(r); }
};

inline SynthWorld gen_world(const WorldSpec& spec) {
  if (spec.n_relations == 0) throw ContractError("gen_world: n_relations must be positive");
  if (!(spec.density > 0.0 && spec.density <= 1.0)) throw ContractError("gen_world: density must be in (0, 1]");
  SynthWorld w;
  w.spec = spec;
  w.vocab = Vocab(spec.vocab_size, spec.n_relations);
  w.n_relations = spec.n_relations;
  w.n_entities = spec.n_entities ? spec.n_entities : w.vocab.entity_capacity();
  if (w.n_entities > w.vocab.entity_capacity())
    throw ContractError("gen_world: " + std::to_string(w.n_entities) + " entities exceed vocabulary capacity " +
                        std::to_string(w.vocab.entity_capacity()));
  if (w.n_entities < 8) throw ContractError("gen_world: need at least 8 entities");
  Rng rng = Rng::derive(spec.seed, "world");
  w.base.assign(w.n_entities * w.n_relations, -1);
  for (std::size_t s = 0; s < w.n_entities; ++s) {
    for (std::size_t r = 0; r < w.n_relations; ++r) {
      if (rng.uniform() >= spec.density) continue;
      int o;
      do o = static_cast<int>(rng.below(w.n_entities));
      while (o == static_cast<int>(s));
      w.base[s * w.n_relations + r] = o;
      w.base_facts.emplace_back(static_cast<int>(s), static_cast<int>(r));
    }
  }
  if (w.base_facts.empty()) throw ContractError("gen_world: no base facts at this density");
  w.subject_relations.resize(w.n_entities);
  for (auto [s, r] : w.base_facts) w.subject_relations[static_cast<std::size_t>(s)].push_back(r);

  std::set<std::size_t> used;
  for (std::size_t c = 0; c < spec.n_chains; ++c) {
    auto chain = w.sample_chain(rng, 4, used);
    if (!chain) throw ContractError("gen_world: cannot build 4-hop override chain " + std::to_string(c) + " (constraint: unused base facts along the chain)");
    std::vector<std::size_t> idx;
    for (const auto& o : *chain) {
      used.insert(w.key(o.subject, o.relation));
      idx.push_back(w.overrides.size());
      w.overrides.push_back(o);
    }
    w.chains.push_back(std::move(idx));
  }
  for (std::size_t i = 0; i < spec.n_singles; ++i) {
    auto o = w.sample_override(rng, used);
    if (!o) throw ContractError("gen_world: ran out of base facts for single overrides (constraint: one override per fact)");
    used.insert(w.key(o->subject, o->relation));
    w.singles.push_back(w.overrides.size());
    w.overrides.push_back(*o);
  }
  return w;
}

}  // namespace incomes
