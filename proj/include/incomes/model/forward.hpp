#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "incomes/core/graph.hpp"
#include "incomes/core/ops.hpp"
#include "incomes/gist/pool.hpp"
#include "incomes/model/probe.hpp"
#include "incomes/model/state.hpp"

namespace incomes {

/// Graph-side view of a gist pool: stacked keys/values per cross layer.
/// Empty optionals mean "no edit entries" (zero-gist only).
template <class T>
struct GraphPool {
  std::vector<std::optional<Var<T>>> keys, values;
};

template <class T>
GraphPool<T> bind_pool(Graph<T>& g, const GistPool<T>& pool, std::size_t n_slots) {
  GraphPool<T> gp;
  gp.keys.resize(n_slots);
  gp.values.resize(n_slots);
  if (pool.empty()) return gp;
  if (pool[0].n_slots != n_slots) throw DimensionError("pool has " + std::to_string(pool[0].n_slots) +
                                                       " cross layers, model expects " + std::to_string(n_slots));
  for (std::size_t s = 0; s < n_slots; ++s) {
    gp.keys[s] = g.constant(pool.stacked(s, false));
    gp.values[s] = g.constant(pool.stacked(s, true));
  }
  return gp;
}

template <class T>
struct RunOptions {
  const GraphPool<T>* pool = nullptr;  // cross path runs iff set
  T temperature = T{1};
  std::vector<CrossAttnTrace<T>>* traces = nullptr;  // per cross slot
  std::vector<Var<T>>* cross_queries = nullptr;  // per cross slot, as fed to the cross attention
  /// >= 0: stop once this layer's self-attention K,V exist (no logits).
  int kv_capture_until = -1;
  std::vector<Var<T>>* keys_out = nullptr;  // per layer, before rotary mixing
  std::vector<Var<T>>* values_out = nullptr;
};

namespace detail {

inline void check_tokens(const ModelConfig& cfg, const std::vector<int>& tokens, const SeqLayout& layout) {
  if (layout.size() != tokens.size()) throw DimensionError("forward: layout/token length mismatch");
  for (int t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
      throw IndexError("forward: token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
  for (int p : layout.position)
    if (static_cast<std::size_t>(p) >= cfg.max_seq_len)
      throw CapacityError("forward: sequence longer than max_seq_len " + std::to_string(cfg.max_seq_len));
}

}  // namespace detail

/// Builds the decoder graph for packed token sequences. Returns the logits
/// node [tokens, vocab], or nothing when stopping early for K,V capture.
template <class T>
std::optional<Var<T>> run_transformer(Graph<T>& g, ModelState<T>& s, const std::vector<int>& tokens,
                                      const SeqLayout& layout, const RunOptions<T>& opt = {}) {
  const ModelConfig& cfg = s.config;
  detail::check_tokens(cfg, tokens, layout);
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  if (opt.pool && !s.extended()) throw ContractError("forward: pool given but model has no cross-attention weights");
  const std::size_t H = cfg.n_heads;
  const T eps = static_cast<T>(cfg.norm_eps);
  const T rope_base = static_cast<T>(cfg.rope_base);

  if (opt.traces) opt.traces->assign(cfg.cross_layers.size(), {});
  if (opt.cross_queries) opt.cross_queries->assign(cfg.cross_layers.size(), {});
  if (opt.keys_out) opt.keys_out->clear();
  if (opt.values_out) opt.values_out->clear();

  Var<T> x = gather_rows(g.param(s.tok_emb), tokens);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& lw = s.layers[l];
    Var<T> xn = rms_norm(x, g.param(lw.attn_norm), eps);
    Var<T> k = matmul(xn, g.param(lw.wk));
    Var<T> v = matmul(xn, g.param(lw.wv));
    if (opt.keys_out) opt.keys_out->push_back(k);
    if (opt.values_out) opt.values_out->push_back(v);
    if (opt.kv_capture_until == static_cast<int>(l)) return std::nullopt;

    Var<T> q = rope(matmul(xn, g.param(lw.wq)), layout.position, H, rope_base);
    Var<T> att = causal_attention(q, rope(k, layout.position, H, rope_base), v, layout, H);
    Var<T> h = add(x, matmul(att, g.param(lw.wo)));

    const int slot = cfg.cross_slot(static_cast<int>(l));
    if (opt.pool && slot >= 0) {
      auto& cw = s.cross[static_cast<std::size_t>(slot)];
      Var<T> cq = matmul(xn, g.param(cw.wq));
      std::optional<Var<T>> keys = opt.pool->keys[static_cast<std::size_t>(slot)];
      const std::optional<Var<T>>& values = opt.pool->values[static_cast<std::size_t>(slot)];
      if (cfg.canonical_gist_position >= 0) {
        cq = rope(cq, layout.position, H, rope_base);
        if (keys)
          keys = rope(*keys, std::vector<int>(keys->rows(), cfg.canonical_gist_position), H, rope_base);
      }
      std::optional<Var<T>> zk;
      if (cfg.zero_gist) zk = g.param(cw.zero_key);
      if (opt.cross_queries) (*opt.cross_queries)[static_cast<std::size_t>(slot)] = cq;
      CrossAttnTrace<T>* tr = opt.traces ? &(*opt.traces)[static_cast<std::size_t>(slot)] : nullptr;
      Var<T> co = cross_attention(cq, keys, values, zk, cw.zero_value, H, opt.temperature, tr);
      h = add(h, matmul(co, g.param(cw.wo)));
    }

    Var<T> hn = rms_norm(h, g.param(lw.ffn_norm), eps);
    Var<T> ff = silu_gate(matmul(hn, g.param(lw.w_gate)), matmul(hn, g.param(lw.w_up)));
    x = add(h, matmul(ff, g.param(lw.w_down)));
  }
  if (opt.kv_capture_until >= 0) throw ContractError("forward: kv_capture_until beyond last layer");
  return matmul(rms_norm(x, g.param(s.final_norm), eps), g.param(s.unembed));
}

/// Per-layer self-attention cache: keys (before rotary mixing) and values,
/// [seq, n_heads * head_dim] with head h in columns [h*head_dim, (h+1)*head_dim).
template <class T>
struct KVCache {
  std::size_t n_heads = 0;
  std::vector<Tensor<T>> keys, values;

  std::size_t seq_len() const { return keys.empty() ? 0 : keys[0].rows(); }
  std::span<const T> key(std::size_t layer, std::size_t head, std::size_t pos) const {
    const std::size_t hd = keys[layer].cols() / n_heads;
    return {keys[layer].data() + pos * keys[layer].cols() + head * hd, hd};
  }
  std::span<const T> value(std::size_t layer, std::size_t head, std::size_t pos) const {
    const std::size_t hd = values[layer].cols() / n_heads;
    return {values[layer].data() + pos * values[layer].cols() + head * hd, hd};
  }
};

/// Base-model prediction over one sequence: logits [seq, vocab] and the cache.
template <class T>
std::pair<Tensor<T>, KVCache<T>> forward_base(const ModelState<T>& state, const std::vector<int>& tokens) {
  if (tokens.size() > state.config.max_seq_len)
    throw CapacityError("forward_base: " + std::to_string(tokens.size()) + " tokens exceed max_seq_len " +
                        std::to_string(state.config.max_seq_len));
  Graph<T> g(false);
  std::vector<Var<T>> ks, vs;
  RunOptions<T> opt;
  opt.keys_out = &ks;
  opt.values_out = &vs;
  auto& s = const_cast<ModelState<T>&>(state);  // a grad-disabled graph only reads parameters
  Var<T> logits = *run_transformer(g, s, tokens, SeqLayout::single(tokens.size()), opt);
  KVCache<T> cache;
  cache.n_heads = state.config.n_heads;
  for (std::size_t l = 0; l < ks.size(); ++l) {
    cache.keys.push_back(ks[l].value());
    cache.values.push_back(vs[l].value());
  }
  return {logits.value(), std::move(cache)};
}

/// Prediction with gist cross-attention over `pool` (zero-gist added by the model).
template <class T>
std::pair<Tensor<T>, AttnProbe<T>> forward_with_pool(const ModelState<T>& state, const std::vector<int>& tokens,
                                                     const GistPool<T>& pool, T temperature) {
  if (!state.extended()) throw ContractError("forward_with_pool: model is not extended");
  if (tokens.size() > state.config.max_seq_len)
    throw CapacityError("forward_with_pool: " + std::to_string(tokens.size()) + " tokens exceed max_seq_len");
  Graph<T> g(false);
  auto& s = const_cast<ModelState<T>&>(state);
  GraphPool<T> gp = bind_pool(g, pool, state.config.cross_layers.size());
  std::vector<CrossAttnTrace<T>> traces;
  RunOptions<T> opt;
  opt.pool = &gp;
  opt.temperature = temperature;
  opt.traces = &traces;
  Var<T> logits = *run_transformer(g, s, tokens, SeqLayout::single(tokens.size()), opt);
  AttnProbe<T> probe;
  probe.layers = state.config.cross_layers;
  probe.has_zero_gist = state.config.zero_gist;
  for (auto& t : traces) probe.probs.push_back(std::move(t.probs));
  return {logits.value(), std::move(probe)};
}

/// Logits of several independent sequences computed in one packed pass.
/// With `pool`, every sequence attends to the same pool.
template <class T>
std::vector<Tensor<T>> forward_packed(const ModelState<T>& state, const std::vector<std::vector<int>>& seqs,
                                      const GistPool<T>* pool = nullptr, T temperature = T{1}) {
  std::vector<int> tokens;
  std::vector<std::size_t> lengths;
  for (const auto& s : seqs) {
    if (s.size() > state.config.max_seq_len) throw CapacityError("forward_packed: sequence exceeds max_seq_len");
    tokens.insert(tokens.end(), s.begin(), s.end());
    lengths.push_back(s.size());
  }
  Graph<T> g(false);
  auto& s = const_cast<ModelState<T>&>(state);
  GraphPool<T> gp;
  RunOptions<T> opt;
  if (pool) {
    gp = bind_pool(g, *pool, state.config.cross_layers.size());
    opt.pool = &gp;
    opt.temperature = temperature;
  }
  Var<T> logits = *run_transformer(g, s, tokens, SeqLayout::packed(lengths), opt);
  std::vector<Tensor<T>> out;
  std::size_t off = 0;
  const std::size_t v = state.config.vocab_size;
  for (std::size_t len : lengths) {
    Tensor<T> t({len, v});
    std::copy_n(logits.value().data() + off * v, len * v, t.data());
    out.push_back(std::move(t));
    off += len;
  }
  return out;
}

/// Greedy continuation of `prompt` by `n_new` tokens, with or without a pool.
template <class T>
std::vector<int> greedy_decode(const ModelState<T>& state, const std::vector<int>& prompt, std::size_t n_new,
                               const GistPool<T>* pool = nullptr, T temperature = T{1}) {
  std::vector<int> seq = prompt;
  std::vector<int> out;
  for (std::size_t i = 0; i < n_new; ++i) {
    Tensor<T> logits = pool ? forward_with_pool(state, seq, *pool, temperature).first : forward_base(state, seq).first;
    const int next = static_cast<int>(argmax(logits.row(logits.rows() - 1)));
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

}  // namespace incomes
