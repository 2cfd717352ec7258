#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "incomes/core/functional.hpp"
#include "incomes/core/rng.hpp"
#include "incomes/gist/compress.hpp"
#include "incomes/model/forward.hpp"
#include "incomes/train/format.hpp"

namespace incomes {

/// One supervised sequence. `tokens` = query ++ answer; the loss covers
/// token indices [span_begin, span_end). `golden[j]` names the edit (index
/// into `edits`) that answer token j depends on, or -1.
struct TrainingExample {
  std::vector<EditRecord> edits;
  std::vector<std::size_t> related;
  std::vector<int> tokens;
  std::size_t answer_begin = 0;
  std::size_t span_begin = 1, span_end = 0;
  std::vector<int> golden;

  std::size_t span_size() const { return span_end - span_begin; }

  void validate(const ModelConfig& cfg) const {
    for (auto r : related)
      if (r >= edits.size()) throw ContractError("example: related index " + std::to_string(r) + " out of range");
    if (span_begin < 1 || span_begin >= span_end || span_end > tokens.size())
      throw ContractError("example: loss span [" + std::to_string(span_begin) + ", " + std::to_string(span_end) +
                          ") invalid for " + std::to_string(tokens.size()) + " tokens");
    if (answer_begin < 1 || answer_begin > tokens.size()) throw ContractError("example: answer_begin out of range");
    if (!golden.empty() && golden.size() != tokens.size() - answer_begin)
      throw ContractError("example: golden annotation must cover every answer token");
    for (int t : tokens)
      if (t == cfg.gist_token_id) throw ContractError("example: tokens contain the gist token");
  }
};

/// Builds an example with the default span (query and answer) or the
/// answer-only span.
inline TrainingExample make_example(std::vector<EditRecord> edits, std::vector<std::size_t> related,
                                    const std::vector<int>& query, const std::vector<int>& answer,
                                    std::vector<int> golden, bool loss_on_query) {
  TrainingExample ex;
  ex.edits = std::move(edits);
  ex.related = std::move(related);
  ex.tokens = query;
  ex.tokens.insert(ex.tokens.end(), answer.begin(), answer.end());
  ex.answer_begin = query.size();
  ex.span_begin = loss_on_query ? 1 : query.size();
  ex.span_end = ex.tokens.size();
  ex.golden = std::move(golden);
  return ex;
}

template <class T>
struct TeacherOutputs {
  std::size_t span_begin = 0, span_end = 0;
  Tensor<T> cond_probs;  // [span, vocab]
  std::vector<T> cond_ce, uncond_ce;
};

template <class T>
struct TokenWeights {
  std::vector<T> w;
};

struct LossBreakdown {
  double weighted_ce = 0, kl = 0;
  std::optional<double> golden_aux;
  double total = 0;
};

struct LossFlags {
  bool golden_loss = false;
  double lambda_g = 0.1;
};

namespace detail {

template <class T>
void teacher_rows(const Tensor<T>& logits, std::size_t first_row, const TrainingExample& ex, Tensor<T>* probs,
                  std::vector<T>& ce) {
  const std::size_t v = logits.cols();
  std::vector<T> lp(v);
  for (std::size_t i = ex.span_begin; i < ex.span_end; ++i) {
    const std::size_t row = first_row + i - 1;
    auto lr = logits.row(row);
    log_softmax_row(lr.data(), lp.data(), v);
    ce.push_back(-lp[static_cast<std::size_t>(ex.tokens[i])]);
    if (probs) {
      T* p = probs->data() + (i - ex.span_begin) * v;
      for (std::size_t j = 0; j < v; ++j) p[j] = std::exp(lp[j]);
    }
  }
}

}  // namespace detail

/// Both teacher passes for a batch of examples, packed into a single
/// grad-free forward. The conditioned pass sees the related edits as a
/// text prefix; the unconditioned pass sees the example alone.
template <class T>
std::vector<TeacherOutputs<T>> teacher_passes(const ModelState<T>& teacher, std::span<const TrainingExample> examples) {
  const ModelConfig& cfg = teacher.config;
  std::vector<std::vector<int>> seqs;
  std::vector<std::size_t> prefix_len;
  for (const auto& ex : examples) {
    ex.validate(cfg);
    auto cond = conditioned_input(select_edits(ex.edits, ex.related), ex.tokens);
    if (cond.size() > cfg.max_seq_len)
      throw CapacityError("teacher_passes: conditioned input of " + std::to_string(cond.size()) +
                          " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    prefix_len.push_back(cond.size() - ex.tokens.size());
    seqs.push_back(std::move(cond));
    seqs.push_back(ex.tokens);
  }
  // no cross path: the teacher is the unextended model
  ModelState<T> const* base = &teacher;
  std::optional<ModelState<T>> stripped;
  if (teacher.extended()) {
    stripped = teacher;
    stripped->cross.clear();
    base = &*stripped;
  }
  auto logits = forward_packed(*base, seqs);
  std::vector<TeacherOutputs<T>> out;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    TeacherOutputs<T> o;
    o.span_begin = ex.span_begin;
    o.span_end = ex.span_end;
    o.cond_probs = Tensor<T>({ex.span_size(), cfg.vocab_size});
    detail::teacher_rows(logits[2 * e], prefix_len[e], ex, &o.cond_probs, o.cond_ce);
    detail::teacher_rows<T>(logits[2 * e + 1], 0, ex, nullptr, o.uncond_ce);
    out.push_back(std::move(o));
  }
  return out;
}

template <class T>
TeacherOutputs<T> teacher_passes(const ModelState<T>& teacher, const TrainingExample& example) {
  return teacher_passes(teacher, std::span<const TrainingExample>(&example, 1)).front();
}

/// w_i = max(0, CE_uncond_i - CE_cond_i).
template <class T>
TokenWeights<T> token_weights(const TeacherOutputs<T>& o) {
  if (o.cond_ce.size() != o.uncond_ce.size() || o.cond_ce.size() != o.span_end - o.span_begin)
    throw ContractError("token_weights: conditioned/unconditioned spans differ");
  TokenWeights<T> tw;
  tw.w.resize(o.cond_ce.size());
  for (std::size_t i = 0; i < tw.w.size(); ++i) tw.w[i] = std::max(T{0}, o.uncond_ce[i] - o.cond_ce[i]);
  return tw;
}

/// -log of the mean attention mass on golden entries. `targets` pairs a
/// token row with a pool index; the mean runs over cross layers, heads and
/// targets.
template <class T>
T golden_gist_loss(const AttnProbe<T>& probe, const std::vector<std::pair<std::size_t, std::size_t>>& targets) {
  if (targets.empty()) throw ContractError("golden_gist_loss: no golden annotation");
  if (probe.n_slots() == 0) throw ContractError("golden_gist_loss: probe has no cross layers");
  T mass{0};
  for (std::size_t s = 0; s < probe.n_slots(); ++s)
    for (auto [tok, gi] : targets) {
      if (tok >= probe.n_tokens() || probe.entry_of(gi) >= probe.n_entries())
        throw IndexError("golden_gist_loss: target out of range");
      mass += probe.golden_prob(s, tok, gi);
    }
  return -std::log(mass / static_cast<T>(probe.n_slots() * targets.size()));
}

/// Probe-side summaries of one training step.
struct StepDiagnostics {
  double mean_zero_gist_prob = 0, mean_golden_prob = 0, mean_entropy = 0;
};

template <class T>
struct StepLoss {
  Var<T> total;
  LossBreakdown breakdown;
  StepDiagnostics diag;
};

/// Student loss over examples sharing one candidate edit batch, whose
/// compressed pool is `pool`. Per example the terms are averaged over its
/// loss span; the step averages over examples.
template <class T>
StepLoss<T> compute_loss(Graph<T>& g, ModelState<T>& student, std::span<const TrainingExample> examples,
                         const GraphPool<T>& pool, std::span<const TeacherOutputs<T>> outputs,
                         std::span<const TokenWeights<T>> weights, const LossFlags& flags) {
  const ModelConfig& cfg = student.config;
  if (examples.empty()) throw ContractError("compute_loss: no examples");
  if (outputs.size() != examples.size() || weights.size() != examples.size())
    throw ContractError("compute_loss: teacher outputs/weights do not match examples");
  if (!student.extended()) throw ContractError("compute_loss: student has no cross-attention weights");
  const auto& ref_edits = examples[0].edits;
  const std::size_t n_pool = pool.keys.empty() || !pool.keys[0] ? 0 : pool.keys[0]->rows();
  if (n_pool != ref_edits.size())
    throw ContractError("compute_loss: pool has " + std::to_string(n_pool) + " entries for " +
                        std::to_string(ref_edits.size()) + " edits");
  std::vector<int> tokens;
  std::vector<std::size_t> lengths, offsets;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    ex.validate(cfg);
    if (ex.edits.size() != ref_edits.size())
      throw ContractError("compute_loss: examples of one step must share the edit batch");
    for (std::size_t i = 0; i < ex.edits.size(); ++i)
      if (ex.edits[i].edit_id != ref_edits[i].edit_id)
        throw ContractError("compute_loss: examples of one step must share the edit batch");
    if (outputs[e].span_begin != ex.span_begin || outputs[e].span_end != ex.span_end ||
        weights[e].w.size() != ex.span_size())
      throw ContractError("compute_loss: teacher span does not match example span");
    offsets.push_back(tokens.size());
    tokens.insert(tokens.end(), ex.tokens.begin(), ex.tokens.end());
    lengths.push_back(ex.tokens.size());
  }
  std::vector<CrossAttnTrace<T>> traces;
  std::vector<Var<T>> cross_q;
  RunOptions<T> opt;
  opt.pool = &pool;
  opt.temperature = static_cast<T>(cfg.train_temperature);
  opt.traces = &traces;
  opt.cross_queries = &cross_q;
  Var<T> logits = *run_transformer(g, student, tokens, SeqLayout::packed(lengths), opt);

  const std::size_t n = tokens.size(), v = cfg.vocab_size;
  const T inv_e = T{1} / static_cast<T>(examples.size());
  std::vector<int> targets(n, -1);
  std::vector<T> ce_w(n, T{0}), kl_w(n, T{0});
  Tensor<T> ref({n, v});
  std::vector<std::pair<std::size_t, std::size_t>> golden_targets;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    const T inv_n = inv_e / static_cast<T>(ex.span_size());
    for (std::size_t i = ex.span_begin; i < ex.span_end; ++i) {
      const std::size_t row = offsets[e] + i - 1;
      targets[row] = ex.tokens[i];
      ce_w[row] = weights[e].w[i - ex.span_begin] * inv_n;
      kl_w[row] = inv_n;
      std::copy_n(outputs[e].cond_probs.data() + (i - ex.span_begin) * v, v, ref.data() + row * v);
    }
    for (std::size_t j = 0; j < ex.golden.size(); ++j)
      if (ex.golden[j] >= 0) golden_targets.emplace_back(offsets[e] + ex.answer_begin + j - 1, static_cast<std::size_t>(ex.golden[j]));
  }
  Var<T> wce = weighted_cross_entropy(logits, targets, ce_w);
  Var<T> kl = weighted_kl(logits, ref, kl_w);
  StepLoss<T> out;
  out.total = add(wce, kl);
  out.breakdown.weighted_ce = static_cast<double>(wce.value()[0]);
  out.breakdown.kl = static_cast<double>(kl.value()[0]);

  const std::size_t z = cfg.zero_gist ? 1 : 0;
  if (flags.golden_loss) {
    if (golden_targets.empty()) throw ContractError("compute_loss: golden loss enabled but no example has a golden annotation");
    std::vector<std::pair<std::size_t, std::size_t>> entry_targets;
    for (auto [row, gi] : golden_targets) entry_targets.emplace_back(row, gi + z);
    std::optional<Var<T>> mass_sum;
    for (std::size_t s = 0; s < cfg.cross_layers.size(); ++s) {
      std::optional<Var<T>> keys = pool.keys[s];
      if (keys && cfg.canonical_gist_position >= 0)
        keys = rope(*keys, std::vector<int>(keys->rows(), cfg.canonical_gist_position), cfg.n_heads,
                    static_cast<T>(cfg.rope_base));
      std::optional<Var<T>> zk;
      if (cfg.zero_gist) zk = g.param(student.cross[s].zero_key);
      Var<T> m = cross_attention_mass(cross_q[s], keys, zk, cfg.n_heads, opt.temperature, entry_targets);
      mass_sum = mass_sum ? add(*mass_sum, m) : m;
    }
    Var<T> aux = neg_log(scale(*mass_sum, T{1} / static_cast<T>(cfg.cross_layers.size())));
    out.breakdown.golden_aux = static_cast<double>(aux.value()[0]);
    out.total = add(out.total, scale(aux, static_cast<T>(flags.lambda_g)));
  }
  out.breakdown.total = static_cast<double>(out.total.value()[0]);

  // diagnostics over loss-span prediction rows
  double zsum = 0, hsum = 0;
  std::size_t cnt = 0;
  AttnProbe<T> probe;
  probe.has_zero_gist = cfg.zero_gist;
  for (auto& t : traces) probe.probs.push_back(t.probs);
  for (std::size_t row = 0; row < n; ++row) {
    if (targets[row] < 0) continue;
    for (std::size_t s = 0; s < probe.n_slots(); ++s) {
      zsum += static_cast<double>(probe.zero_gist_prob(s, row));
      hsum += static_cast<double>(probe.entropy_at(s, row));
      ++cnt;
    }
  }
  double gsum = 0;
  for (auto [row, gi] : golden_targets)
    for (std::size_t s = 0; s < probe.n_slots(); ++s) gsum += static_cast<double>(probe.golden_prob(s, row, gi));
  if (cnt) {
    out.diag.mean_zero_gist_prob = zsum / static_cast<double>(cnt);
    out.diag.mean_entropy = hsum / static_cast<double>(cnt);
  }
  if (!golden_targets.empty())
    out.diag.mean_golden_prob = gsum / static_cast<double>(golden_targets.size() * probe.n_slots());
  return out;
}

/// One example against its own compressed edits: compression and loss in
/// one graph, so gradients reach the compressing pass as well.
template <class T>
StepLoss<T> full_loss(Graph<T>& g, ModelState<T>& student, std::span<const TrainingExample> examples,
                      std::span<const TeacherOutputs<T>> outputs, std::span<const TokenWeights<T>> weights,
                      const LossFlags& flags) {
  if (examples.empty()) throw ContractError("full_loss: no examples");
  GraphPool<T> pool = compress_in_graph(g, student, examples[0].edits);
  return compute_loss(g, student, examples, pool, outputs, weights, flags);
}

inline constexpr int kEditBatchSizes[] = {8, 16, 32, 64, 128};

/// Draws the number of candidate edits for one training step.
inline int sample_edit_batch_size(Rng& rng) {
  static const std::vector<double> rates{0.05, 0.05, 0.05, 0.15, 0.7};
  return kEditBatchSizes[rng.categorical(rates)];
}

}  // namespace incomes
