#pragma once

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "incomes/model/forward.hpp"

namespace incomes {

namespace detail {

inline void check_edit(const ModelConfig& cfg, const EditRecord& e) {
  if (e.tokens.empty()) throw ContractError("edit " + std::to_string(e.edit_id) + ": empty token sequence");
  if (std::find(e.tokens.begin(), e.tokens.end(), cfg.gist_token_id) != e.tokens.end())
    throw ContractError("edit " + std::to_string(e.edit_id) + ": contains the gist token");
  if (e.tokens.size() + 1 > cfg.max_seq_len)
    throw CapacityError("edit " + std::to_string(e.edit_id) + ": " + std::to_string(e.tokens.size()) +
                        " tokens plus gist exceed max_seq_len " + std::to_string(cfg.max_seq_len));
}

}  // namespace detail

/// Compresses edits inside `g`: the edits (each followed by the gist token)
/// are packed into one pass of the base path, and the self-attention K,V at
/// every gist position are gathered per cross layer. Gradients flow back
/// into the compressing model when `g` records them.
template <class T>
GraphPool<T> compress_in_graph(Graph<T>& g, ModelState<T>& state, const std::vector<EditRecord>& edits) {
  const ModelConfig& cfg = state.config;
  GraphPool<T> gp;
  gp.keys.resize(cfg.cross_layers.size());
  gp.values.resize(cfg.cross_layers.size());
  if (edits.empty() || cfg.cross_layers.empty()) return gp;
  std::vector<int> tokens;
  std::vector<std::size_t> lengths;
  std::vector<int> gist_rows;
  for (const auto& e : edits) {
    detail::check_edit(cfg, e);
    tokens.insert(tokens.end(), e.tokens.begin(), e.tokens.end());
    tokens.push_back(cfg.gist_token_id);
    lengths.push_back(e.tokens.size() + 1);
    gist_rows.push_back(static_cast<int>(tokens.size() - 1));
  }
  std::vector<Var<T>> ks, vs;
  RunOptions<T> opt;
  opt.kv_capture_until = cfg.last_cross_layer();
  opt.keys_out = &ks;
  opt.values_out = &vs;
  run_transformer(g, state, tokens, SeqLayout::packed(lengths), opt);
  for (std::size_t s = 0; s < cfg.cross_layers.size(); ++s) {
    const auto l = static_cast<std::size_t>(cfg.cross_layers[s]);
    gp.keys[s] = gather_rows(ks[l], gist_rows);
    gp.values[s] = gather_rows(vs[l], gist_rows);
  }
  return gp;
}

/// Runs the edit followed by the gist token through the model and keeps only
/// the gist position's K,V at each cross layer.
template <class T>
GistEntry<T> compress_edit(const ModelState<T>& state, const EditRecord& edit) {
  const ModelConfig& cfg = state.config;
  detail::check_edit(cfg, edit);
  Graph<T> g(false);
  GraphPool<T> gp = compress_in_graph(g, const_cast<ModelState<T>&>(state), {edit});
  GistEntry<T> e(edit.edit_id, cfg.cross_layers.size(), cfg.d_model);
  for (std::size_t s = 0; s < cfg.cross_layers.size(); ++s) {
    const auto& k = gp.keys[s]->value();
    const auto& v = gp.values[s]->value();
    std::copy(k.vec().begin(), k.vec().end(), e.key(s).begin());
    std::copy(v.vec().begin(), v.vec().end(), e.value(s).begin());
  }
  return e;
}

/// compress_edit over every edit, fanned out over `parallelism` workers.
/// Output order follows input order; results do not depend on worker count.
template <class T>
std::vector<GistEntry<T>> compress_batch(const ModelState<T>& state, const std::vector<EditRecord>& edits,
                                         std::size_t parallelism = 1) {
  std::vector<GistEntry<T>> out(edits.size());
  const std::size_t workers = std::max<std::size_t>(1, std::min(parallelism, edits.size()));
  std::vector<std::exception_ptr> errors(edits.size());
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < edits.size(); i += workers) {
      try {
        out[i] = compress_edit(state, edits[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
  }
  // per-edit errors already name their edit_id
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);
  return out;
}

}  // namespace incomes
