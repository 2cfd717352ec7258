#pragma once

#include <set>
#include <vector>

#include "incomes/bench/cases.hpp"
#include "incomes/train/loss.hpp"

namespace incomes {

/// Query mix of freshly sampled training episodes.
struct CurriculumMix {
  double recall = 0.3, paraphrase = 0.2, multi_hop = 0.3, locality = 0.2;
  int max_hops = 4;
  double hard_negative_rate = 0.2;  // chance per related edit of a same-subject distractor
};

struct EpisodeItem {
  CaseKind kind = CaseKind::recall;
  int hops = 1;
  std::vector<std::size_t> related;  // into Episode::edits
  std::vector<int> query, answer;
  std::vector<int> golden;  // per answer token
};

/// A candidate edit batch and the queries asked against it.
struct Episode {
  std::vector<EditRecord> edits;
  std::vector<EpisodeItem> items;
};

/// Samples training episodes from fresh counterfactuals over the world's
/// base facts. The world's own (evaluation) overrides are never reused.
class Curriculum {
 public:
  Curriculum(const SynthWorld& world, CurriculumMix mix = {}) : w_(world), mix_(mix) {
    for (const auto& o : w_.overrides) held_out_.insert({w_.key(o.subject, o.relation), o.new_object});
  }

  const SynthWorld& world() const { return w_; }

  Episode sample(Rng& rng, std::size_t n_edits, std::size_t max_items) const {
    std::set<std::size_t> used;
    std::set<int> subjects;  // subjects of related edits and locality queries
    std::vector<std::pair<Override, bool>> related;  // override, chain component
    struct Pending {
      EpisodeItem item;
      std::vector<std::size_t> rel;  // into `related`
    };
    std::vector<Pending> pending;
    const std::vector<double> rates{mix_.recall, mix_.paraphrase, mix_.multi_hop, mix_.locality};
    for (std::size_t it = 0; it < max_items; ++it) {
      Pending p;
      auto kind = static_cast<CaseKind>(rng.categorical(rates));
      int hops = kind == CaseKind::multi_hop ? 2 + static_cast<int>(rng.below(static_cast<std::size_t>(mix_.max_hops - 1))) : 1;
      const std::size_t need = kind == CaseKind::multi_hop ? static_cast<std::size_t>(hops) : kind == CaseKind::locality ? 0 : 1;
      if (related.size() + need > n_edits) {
        kind = CaseKind::locality;
        hops = 1;
      }
      p.item.kind = kind;
      p.item.hops = hops;
      if (kind == CaseKind::recall || kind == CaseKind::paraphrase_portability) {
        auto o = fresh_override(rng, used, subjects);
        if (!o) continue;
        used.insert(w_.key(o->subject, o->relation));
        subjects.insert(o->subject);
        p.rel.push_back(related.size());
        related.emplace_back(*o, false);
        p.item.query = kind == CaseKind::recall ? w_.recall_query(o->subject, o->relation, o->form)
                                                : w_.paraphrase_query(o->subject, o->relation, 1 - o->form);
        p.item.answer = {w_.vocab.entity(o->new_object)};
      } else if (kind == CaseKind::multi_hop) {
        std::optional<std::vector<Override>> chain;
        for (int a = 0; a < 16 && !chain; ++a) {
          chain = w_.sample_chain(rng, static_cast<std::size_t>(hops), used);
          if (chain)
            for (const auto& o : *chain)
              if (subjects.count(o.subject) || held_out_.count({w_.key(o.subject, o.relation), o.new_object})) chain.reset();
        }
        if (!chain) continue;
        std::vector<int> rels, forms;
        for (const auto& o : *chain) {
          used.insert(w_.key(o.subject, o.relation));
          subjects.insert(o.subject);
          p.rel.push_back(related.size());
          related.emplace_back(o, true);
          rels.push_back(o.relation);
          forms.push_back(static_cast<int>(rng.below(2)));
          p.item.answer.push_back(w_.vocab.entity(o.new_object));
        }
        p.item.query = w_.multi_hop_query(chain->front().subject, rels, forms);
      } else {
        bool found = false;
        for (int a = 0; a < 256 && !found; ++a) {
          const auto [s, r] = w_.base_facts[rng.below(w_.base_facts.size())];
          if (subjects.count(s)) continue;
          subjects.insert(s);
          p.item.query = w_.recall_query(s, r, static_cast<int>(rng.below(2)));
          p.item.answer = {w_.vocab.entity(w_.base_object(s, r))};
          found = true;
        }
        if (!found) continue;
      }
      pending.push_back(std::move(p));
    }

    std::vector<std::pair<Override, bool>> all = related;
    const std::set<int> related_subjects = subjects;
    for (std::size_t i = 0; i < related.size() && all.size() < n_edits; ++i) {
      if (rng.uniform() >= mix_.hard_negative_rate) continue;
      auto o = w_.sample_override(rng, used, related[i].first.subject);
      if (!o || held_out_.count({w_.key(o->subject, o->relation), o->new_object})) continue;
      used.insert(w_.key(o->subject, o->relation));
      all.emplace_back(*o, false);
    }
    for (int guard = 0; all.size() < n_edits && guard < 100000; ++guard) {
      auto o = fresh_override(rng, used, related_subjects);
      if (!o) continue;
      used.insert(w_.key(o->subject, o->relation));
      all.emplace_back(*o, false);
    }
    if (all.size() < n_edits) throw ContractError("curriculum: cannot sample " + std::to_string(n_edits) + " distinct edits");

    std::vector<std::size_t> slot(all.size());
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] = i;
    rng.shuffle(slot);
    Episode ep;
    ep.edits.resize(all.size());
    for (std::size_t k = 0; k < all.size(); ++k)
      ep.edits[slot[k]] = w_.edit_record(all[k].first, static_cast<std::int64_t>(slot[k]), all[k].second);
    for (auto& p : pending) {
      for (auto r : p.rel) p.item.related.push_back(slot[r]);
      p.item.golden.assign(p.item.answer.size(), -1);
      if (p.item.kind != CaseKind::locality)
        for (std::size_t j = 0; j < p.item.answer.size(); ++j) p.item.golden[j] = static_cast<int>(p.item.related[j]);
      ep.items.push_back(std::move(p.item));
    }
    return ep;
  }

  /// Training examples of an episode, all sharing the episode's edits.
  static std::vector<TrainingExample> examples(const Episode& ep, bool loss_on_query) {
    std::vector<TrainingExample> out;
    for (const auto& it : ep.items) out.push_back(make_example(ep.edits, it.related, it.query, it.answer, it.golden, loss_on_query));
    return out;
  }

 private:
  std::optional<Override> fresh_override(Rng& rng, const std::set<std::size_t>& used, const std::set<int>& banned) const {
    for (int a = 0; a < 256; ++a) {
      auto o = w_.sample_override(rng, used);
      if (!o) return std::nullopt;
      if (banned.count(o->subject) || held_out_.count({w_.key(o->subject, o->relation), o->new_object})) continue;
      return o;
    }
    return std::nullopt;
  }

  const SynthWorld& w_;
  CurriculumMix mix_;
  std::set<std::pair<std::size_t, int>> held_out_;
};

}  // namespace incomes
