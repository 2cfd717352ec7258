#pragma once

#include <ostream>

#include "incomes/bench/eval.hpp"
#include "incomes/core/optim.hpp"
#include "incomes/train/curriculum.hpp"

namespace incomes {

/// Language-model pretraining of the base model on the synthetic corpus:
/// in-context episodes (edits as a text prefix, then a question and answer)
/// and bare questions about base facts.
struct PretrainConfig {
  std::size_t max_steps = 6000;
  std::size_t episodes_per_step = 32;
  std::size_t base_questions_per_step = 16;
  std::size_t copy_sequences_per_step = 16;  // random entity strings repeated once; the repeat is the target
  std::size_t max_context_edits = 16;
  double context_token_weight = 0.25;  // loss weight of edit-text tokens relative to question/answer tokens
  LrSchedule schedule{2e-3, 1e-4, 200, 6000};
  double clip_norm = 1.0;
  std::size_t eval_every = 250;
  std::size_t eval_cases = 200;
  double target_recall = 0.95;
  std::size_t log_every = 50;
  CurriculumMix mix{0.35, 0.25, 0.3, 0.1, 4, 0.2};

  nlohmann::json to_json() const {
    return {{"max_steps", max_steps},
            {"episodes_per_step", episodes_per_step},
            {"base_questions_per_step", base_questions_per_step},
            {"copy_sequences_per_step", copy_sequences_per_step},
            {"max_context_edits", max_context_edits},
            {"context_token_weight", context_token_weight},
            {"max_lr", schedule.max_lr},
            {"min_lr", schedule.min_lr},
            {"warmup_steps", schedule.warmup_steps},
            {"total_steps", schedule.total_steps},
            {"clip_norm", clip_norm},
            {"eval_every", eval_every},
            {"eval_cases", eval_cases},
            {"target_recall", target_recall}};
  }

  static PretrainConfig from_json(const nlohmann::json& j) {
    PretrainConfig c;
    auto get = [&](const char* key, auto& field) {
      if (!j.contains(key)) return;
      try {
        j.at(key).get_to(field);
      } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("pretrain config: field 'pretrain.") + key + "': " + e.what());
      }
    };
    get("max_steps", c.max_steps);
    get("episodes_per_step", c.episodes_per_step);
    get("base_questions_per_step", c.base_questions_per_step);
    get("copy_sequences_per_step", c.copy_sequences_per_step);
    get("max_context_edits", c.max_context_edits);
    get("context_token_weight", c.context_token_weight);
    get("max_lr", c.schedule.max_lr);
    get("min_lr", c.schedule.min_lr);
    get("warmup_steps", c.schedule.warmup_steps);
    c.schedule.total_steps = static_cast<std::int64_t>(c.max_steps);
    get("total_steps", c.schedule.total_steps);
    get("clip_norm", c.clip_norm);
    get("eval_every", c.eval_every);
    get("eval_cases", c.eval_cases);
    get("target_recall", c.target_recall);
    c.validate();
    return c;
  }

  void validate() const {
    auto bad = [](const std::string& f, const std::string& why) { throw ContractError("pretrain config: pretrain." + f + ": " + why); };
    if (max_steps == 0) bad("max_steps", "must be positive");
    if (episodes_per_step + base_questions_per_step + copy_sequences_per_step == 0) bad("episodes_per_step", "no training sequences per step");
    if (!(schedule.max_lr > 0)) bad("max_lr", "must be positive");
    if (schedule.total_steps <= 0) bad("total_steps", "must be positive");
    if (context_token_weight < 0) bad("context_token_weight", "must be non-negative");
    if (eval_every == 0) bad("eval_every", "must be positive");
    if (eval_cases == 0) bad("eval_cases", "must be positive");
  }
};

struct PretrainReport {
  std::size_t steps = 0;
  double conditioned_recall = 0;
  bool reached_target = false;
  double last_loss = 0;
};

/// Single-edit conditioned recall: each override of the world as the only
/// context line, then its recall question.
template <class T>
double conditioned_recall(const ModelState<T>& model, const SynthWorld& world, std::size_t n, std::uint64_t seed) {
  CaseSpec spec;
  spec.kind = CaseKind::recall;
  spec.n_cases = n;
  spec.pool_size = 1;
  spec.seed = seed;
  auto cases = gen_cases(world, spec);
  std::size_t ok = 0;
  for (const auto& c : cases) ok += icl_predict(model, c, c.answer).success ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(cases.size());
}

namespace detail {

struct LmSequence {
  std::vector<int> tokens;
  std::vector<float> weights;  // per target token (index i predicts tokens[i])
};

inline void episode_sequences(const Episode& ep, Rng& rng, std::size_t max_ctx, std::size_t max_len, float ctx_w,
                              std::vector<LmSequence>& out) {
  for (const auto& it : ep.items) {
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < ep.edits.size(); ++i)
      if (std::find(it.related.begin(), it.related.end(), i) == it.related.end()) others.push_back(i);
    rng.shuffle(others);
    std::size_t k = rng.uniform() < 0.5 ? rng.below(4) : rng.below(max_ctx + 1);
    k = std::min(k, others.size());
    std::vector<std::size_t> ctx(it.related.begin(), it.related.end());
    ctx.insert(ctx.end(), others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k));
    rng.shuffle(ctx);
    std::vector<int> qa = it.query;
    qa.insert(qa.end(), it.answer.begin(), it.answer.end());
    std::vector<int> seq;
    while (true) {
      seq = conditioned_input(select_edits(ep.edits, ctx), qa);
      if (seq.size() <= max_len || ctx.empty()) break;
      // drop one unrelated edit
      auto pos = std::find_if(ctx.begin(), ctx.end(), [&](std::size_t c) {
        return std::find(it.related.begin(), it.related.end(), c) == it.related.end();
      });
      if (pos == ctx.end()) break;
      ctx.erase(pos);
    }
    if (seq.size() > max_len) continue;
    LmSequence s;
    s.tokens = std::move(seq);
    s.weights.assign(s.tokens.size(), ctx_w);
    for (std::size_t i = s.tokens.size() - qa.size(); i < s.tokens.size(); ++i) s.weights[i] = 1.0f;
    s.weights[0] = 0.0f;
    out.push_back(std::move(s));
  }
}

}  // namespace detail

/// Trains `model` in place until single-edit conditioned recall reaches the
/// target or max_steps. Progress lines go to `log` as JSON.
template <class T>
PretrainReport pretrain_base(ModelState<T>& model, const SynthWorld& world, const PretrainConfig& cfg, std::uint64_t seed,
                             std::ostream* log = nullptr) {
  if (model.extended()) throw ContractError("pretrain: expects a base model without cross-attention");
  Curriculum cur(world, cfg.mix);
  Rng rng = Rng::derive(seed, "pretrain");
  typename Adam<T>::Options aopt;
  aopt.clip_norm = cfg.clip_norm;
  Adam<T> adam(model.parameters(), cfg.schedule, aopt);
  PretrainReport rep;
  const std::size_t max_len = model.config.max_seq_len;
  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    std::vector<detail::LmSequence> seqs;
    while (seqs.size() < cfg.episodes_per_step) {
      const std::size_t n_edits = 1 + rng.below(cfg.max_context_edits + 4);
      Episode ep = cur.sample(rng, n_edits, 1 + rng.below(2));
      detail::episode_sequences(ep, rng, cfg.max_context_edits, max_len, static_cast<float>(cfg.context_token_weight), seqs);
    }
    for (std::size_t q = 0; q < cfg.base_questions_per_step; ++q) {
      const auto [s, r] = world.base_facts[rng.below(world.base_facts.size())];
      detail::LmSequence ls;
      ls.tokens = world.recall_query(s, r, static_cast<int>(rng.below(2)));
      ls.tokens.push_back(world.vocab.entity(world.base_object(s, r)));
      ls.weights.assign(ls.tokens.size(), 1.0f);
      ls.weights[0] = 0.0f;
      seqs.push_back(std::move(ls));
    }
    for (std::size_t q = 0; q < cfg.copy_sequences_per_step; ++q) {
      const std::size_t half = 4 + rng.below(std::min<std::size_t>(28, max_len / 2 - 4));
      detail::LmSequence ls;
      for (std::size_t i = 0; i < half; ++i) ls.tokens.push_back(world.vocab.entity(static_cast<int>(rng.below(world.n_entities))));
      ls.tokens.insert(ls.tokens.end(), ls.tokens.begin(), ls.tokens.end());
      ls.weights.assign(ls.tokens.size(), 0.0f);
      for (std::size_t i = half + 1; i < ls.tokens.size(); ++i) ls.weights[i] = 1.0f;
      seqs.push_back(std::move(ls));
    }
    std::vector<int> tokens, targets;
    std::vector<std::size_t> lengths;
    std::vector<T> weights;
    double wsum = 0;
    for (const auto& s : seqs) {
      for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        tokens.push_back(s.tokens[i]);
        // row i predicts token i + 1
        const bool last = i + 1 == s.tokens.size();
        targets.push_back(last ? -1 : s.tokens[i + 1]);
        weights.push_back(last ? T{0} : static_cast<T>(s.weights[i + 1]));
        wsum += last ? 0.0 : s.weights[i + 1];
      }
      lengths.push_back(s.tokens.size());
    }
    for (auto& w : weights) w = static_cast<T>(w / wsum);
    model.zero_grad();
    Graph<T> g(true);
    Var<T> logits = *run_transformer(g, model, tokens, SeqLayout::packed(lengths));
    Var<T> loss = weighted_cross_entropy(logits, targets, weights);
    rep.last_loss = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(rep.last_loss)) throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
    g.backward(loss);
    const double lr = adam.step();
    rep.steps = step + 1;
    if (log && step % cfg.log_every == 0)
      *log << nlohmann::json{{"step", step}, {"loss", rep.last_loss}, {"lr", lr}}.dump() << std::endl;
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps) {
      rep.conditioned_recall = conditioned_recall(model, world, cfg.eval_cases, seed);
      if (log)
        *log << nlohmann::json{{"step", step + 1}, {"conditioned_recall", rep.conditioned_recall}}.dump() << std::endl;
      if (rep.conditioned_recall >= cfg.target_recall) {
        rep.reached_target = true;
        break;
      }
    }
  }
  return rep;
}

}  // namespace incomes
