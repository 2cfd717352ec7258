#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "incomes/bench/world.hpp"

namespace incomes {

enum class CaseKind { recall, paraphrase_portability, multi_hop, locality };

inline std::string to_string(CaseKind k) {
  switch (k) {
    case CaseKind::recall: return "recall";
    case CaseKind::paraphrase_portability: return "paraphrase_portability";
    case CaseKind::multi_hop: return "multi_hop";
    case CaseKind::locality: return "locality";
  }
  return "?";
}

inline CaseKind case_kind_from_string(const std::string& s) {
  if (s == "recall") return CaseKind::recall;
  if (s == "paraphrase_portability") return CaseKind::paraphrase_portability;
  if (s == "multi_hop") return CaseKind::multi_hop;
  if (s == "locality") return CaseKind::locality;
  throw FormatError("unknown case kind: " + s);
}

/// One evaluation query with its full candidate edit set. `related` indexes
/// into `edits`; `golden[j]` is the edit that answer token j depends on
/// (-1 for none). Locality answers hold the base-world object; evaluation
/// scores them against the base model's own prediction.
struct BenchmarkCase {
  std::int64_t case_id = 0;
  CaseKind kind = CaseKind::recall;
  int hops = 1;
  std::vector<EditRecord> edits;
  std::vector<std::size_t> related;
  std::vector<int> golden;
  std::vector<int> query;
  std::vector<int> answer;

  std::string label() const { return kind == CaseKind::multi_hop ? "multi_hop_" + std::to_string(hops) : to_string(kind); }
};

struct CaseSpec {
  CaseKind kind = CaseKind::recall;
  int hops = 1;
  std::size_t n_cases = 100;
  std::size_t pool_size = 1;  // total candidate edits per case
  bool hard_negatives = false;  // distractors preferentially share the related subjects
  std::uint64_t seed = 0;
  std::int64_t first_case_id = 0;
};

namespace detail {

inline std::vector<std::size_t> pick_distractors(const SynthWorld& w, Rng& rng, std::size_t count,
                                                 const std::set<int>& banned_subjects,
                                                 const std::set<std::size_t>& taken, bool hard) {
  std::vector<std::size_t> out;
  std::set<std::size_t> chosen = taken;
  if (hard) {
    for (std::size_t i = 0; i < w.overrides.size() && out.size() < count; ++i)
      if (banned_subjects.count(w.overrides[i].subject) && !chosen.count(i)) {
        out.push_back(i);
        chosen.insert(i);
      }
  }
  std::size_t eligible = 0;
  for (std::size_t i = 0; i < w.overrides.size(); ++i)
    if (!chosen.count(i) && !banned_subjects.count(w.overrides[i].subject)) ++eligible;
  if (eligible < count - out.size())
    throw ContractError("gen_cases: not enough distractor overrides (need " + std::to_string(count - out.size()) +
                        ", have " + std::to_string(eligible) + "); constraint: distractors share no subject with related edits");
  while (out.size() < count) {
    const std::size_t i = rng.below(w.overrides.size());
    if (chosen.count(i) || banned_subjects.count(w.overrides[i].subject)) continue;
    chosen.insert(i);
    out.push_back(i);
  }
  return out;
}

}  // namespace detail

/// Deterministic case generation from the world's fixed override set.
inline std::vector<BenchmarkCase> gen_cases(const SynthWorld& w, const CaseSpec& spec) {
  if (spec.kind == CaseKind::multi_hop && (spec.hops < 2 || spec.hops > 4))
    throw ContractError("gen_cases: multi_hop needs hops in [2, 4], got " + std::to_string(spec.hops));
  if (spec.kind == CaseKind::multi_hop && w.chains.empty())
    throw ContractError("gen_cases: world has no override chains (constraint: multi-hop chains constructible)");
  const std::size_t n_related = spec.kind == CaseKind::multi_hop ? static_cast<std::size_t>(spec.hops)
                                : spec.kind == CaseKind::locality ? 0 : 1;
  if (spec.pool_size < n_related)
    throw ContractError("gen_cases: pool_size " + std::to_string(spec.pool_size) + " smaller than the related set");
  Rng rng = Rng::derive(spec.seed, "cases/" + to_string(spec.kind) + "/" + std::to_string(spec.hops) + "/" +
                                       std::to_string(spec.pool_size));
  std::vector<BenchmarkCase> out;
  for (std::size_t c = 0; c < spec.n_cases; ++c) {
    BenchmarkCase bc;
    bc.case_id = spec.first_case_id + static_cast<std::int64_t>(c);
    bc.kind = spec.kind;
    bc.hops = spec.kind == CaseKind::multi_hop ? spec.hops : 1;
    std::vector<std::size_t> related;  // override indices
    std::set<int> subjects;
    switch (spec.kind) {
      case CaseKind::recall:
      case CaseKind::paraphrase_portability: {
        const std::size_t i = rng.below(w.overrides.size());
        const Override& o = w.overrides[i];
        related.push_back(i);
        subjects.insert(o.subject);
        bc.query = spec.kind == CaseKind::recall ? w.recall_query(o.subject, o.relation, o.form)
                                                 : w.paraphrase_query(o.subject, o.relation, 1 - o.form);
        bc.answer = {w.vocab.entity(o.new_object)};
        break;
      }
      case CaseKind::multi_hop: {
        const auto& chain = w.chains[rng.below(w.chains.size())];
        std::vector<int> rels, forms;
        for (int h = 0; h < spec.hops; ++h) {
          const Override& o = w.overrides[chain[static_cast<std::size_t>(h)]];
          related.push_back(chain[static_cast<std::size_t>(h)]);
          subjects.insert(o.subject);
          rels.push_back(o.relation);
          forms.push_back(static_cast<int>(rng.below(2)));
          bc.answer.push_back(w.vocab.entity(o.new_object));
        }
        bc.query = w.multi_hop_query(w.overrides[chain[0]].subject, rels, forms);
        break;
      }
      case CaseKind::locality: {
        const auto [s, r] = w.base_facts[rng.below(w.base_facts.size())];
        subjects.insert(s);
        bc.query = w.recall_query(s, r, static_cast<int>(rng.below(2)));
        bc.answer = {w.vocab.entity(w.base_object(s, r))};
        break;
      }
    }
    std::set<std::size_t> taken(related.begin(), related.end());
    auto distractors = detail::pick_distractors(w, rng, spec.pool_size - related.size(), subjects, taken, spec.hard_negatives);
    std::vector<std::size_t> order(spec.pool_size);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    // order[k] = slot of the k-th chosen override (related first, then distractors)
    std::vector<std::size_t> all = related;
    all.insert(all.end(), distractors.begin(), distractors.end());
    bc.edits.resize(spec.pool_size);
    std::set<std::size_t> chain_members;
    for (const auto& ch : w.chains) chain_members.insert(ch.begin(), ch.end());
    for (std::size_t k = 0; k < all.size(); ++k)
      bc.edits[order[k]] = w.edit_record(w.overrides[all[k]], static_cast<std::int64_t>(all[k]), chain_members.count(all[k]) > 0);
    for (std::size_t k = 0; k < related.size(); ++k) bc.related.push_back(order[k]);
    bc.golden.assign(bc.answer.size(), -1);
    for (std::size_t j = 0; j < bc.answer.size() && spec.kind != CaseKind::locality; ++j)
      bc.golden[j] = static_cast<int>(bc.related[j]);
    out.push_back(std::move(bc));
  }
  return out;
}

// ---- dataset files: one JSON record per line ----

inline nlohmann::json case_to_json(const BenchmarkCase& c) {
  nlohmann::json edits = nlohmann::json::array(), ids = nlohmann::json::array(), kinds = nlohmann::json::array();
  for (const auto& e : c.edits) {
    edits.push_back(e.tokens);
    ids.push_back(e.edit_id);
    kinds.push_back(to_string(e.kind));
  }
  return {{"case_id", c.case_id}, {"kind", to_string(c.kind)}, {"hops", c.hops},     {"edits", edits},
          {"edit_ids", ids},      {"edit_kinds", kinds},        {"related", c.related}, {"golden", c.golden},
          {"query", c.query},     {"answer", c.answer}};
}

inline BenchmarkCase case_from_json(const nlohmann::json& j) {
  BenchmarkCase c;
  try {
    c.case_id = j.at("case_id").get<std::int64_t>();
    c.kind = case_kind_from_string(j.at("kind").get<std::string>());
    c.hops = j.value("hops", 1);
    const auto& edits = j.at("edits");
    for (std::size_t i = 0; i < edits.size(); ++i) {
      EditRecord e;
      e.tokens = edits[i].get<std::vector<int>>();
      e.edit_id = j.contains("edit_ids") ? j["edit_ids"][i].get<std::int64_t>() : static_cast<std::int64_t>(i);
      const std::string k = j.contains("edit_kinds") ? j["edit_kinds"][i].get<std::string>() : "fact_triple";
      e.kind = k == "free_text" ? EditKind::free_text : k == "multi_hop_component" ? EditKind::multi_hop_component
                                                                                 : EditKind::fact_triple;
      c.edits.push_back(std::move(e));
    }
    c.related = j.at("related").get<std::vector<std::size_t>>();
    c.query = j.at("query").get<std::vector<int>>();
    c.answer = j.at("answer").get<std::vector<int>>();
    c.golden = j.contains("golden") ? j["golden"].get<std::vector<int>>() : std::vector<int>(c.answer.size(), -1);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset record: ") + e.what());
  }
  for (auto r : c.related)
    if (r >= c.edits.size()) throw FormatError("dataset record " + std::to_string(c.case_id) + ": related index out of range");
  return c;
}

inline void save_cases(const std::vector<BenchmarkCase>& cases, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write dataset: " + path.string());
  for (const auto& c : cases) os << case_to_json(c).dump() << '\n';
}

inline std::vector<BenchmarkCase> load_cases(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open dataset: " + path.string());
  std::vector<BenchmarkCase> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(case_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("dataset " + path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace incomes
