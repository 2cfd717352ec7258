#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "incomes/core/rng.hpp"
#include "incomes/core/tensor.hpp"
#include "incomes/model/config.hpp"

namespace incomes {

template <class T>
struct LayerWeights {
  Parameter<T> attn_norm;  // [d]
  Parameter<T> wq, wk, wv, wo;  // [d, d], applied as x * W
  Parameter<T> ffn_norm;  // [d]
  Parameter<T> w_gate, w_up;  // [d, ffn]
  Parameter<T> w_down;  // [ffn, d]
};

/// Gist cross-attention extension of one layer.
template <class T>
struct CrossAttnWeights {
  Parameter<T> wq;  // [d, d]
  Parameter<T> wo;  // [d, d], zero at extension time
  Parameter<T> zero_key;  // [n_heads * head_dim]
  Tensor<T> zero_value;  // [n_heads * head_dim], fixed zeros, never trained
};

/// All weights of the model. `cross` is empty for a base model and aligned
/// with config.cross_layers once extended.
template <class T>
class ModelState {
 public:
  ModelConfig config;
  Parameter<T> tok_emb;  // [vocab, d]
  std::vector<LayerWeights<T>> layers;
  Parameter<T> final_norm;  // [d]
  Parameter<T> unembed;  // [d, vocab]
  std::vector<CrossAttnWeights<T>> cross;

  bool extended() const { return !cross.empty(); }

  /// Fresh base model (no cross-attention weights).
  static ModelState init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelState s;
    s.config = cfg;
    const std::size_t d = cfg.d_model, f = cfg.ffn_dim(), v = cfg.vocab_size;
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    s.tok_emb = Parameter<T>(gaussian({v, d}, 1.0, rng));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      LayerWeights<T> lw;
      lw.attn_norm = Parameter<T>(Tensor<T>({d}, T{1}));
      lw.wq = Parameter<T>(gaussian({d, d}, 1.0 / std::sqrt(double(d)), rng));
      lw.wk = Parameter<T>(gaussian({d, d}, 1.0 / std::sqrt(double(d)), rng));
      lw.wv = Parameter<T>(gaussian({d, d}, 1.0 / std::sqrt(double(d)), rng));
      lw.wo = Parameter<T>(gaussian({d, d}, out_scale / std::sqrt(double(d)), rng));
      lw.ffn_norm = Parameter<T>(Tensor<T>({d}, T{1}));
      lw.w_gate = Parameter<T>(gaussian({d, f}, 1.0 / std::sqrt(double(d)), rng));
      lw.w_up = Parameter<T>(gaussian({d, f}, 1.0 / std::sqrt(double(d)), rng));
      lw.w_down = Parameter<T>(gaussian({f, d}, out_scale / std::sqrt(double(f)), rng));
      s.layers.push_back(std::move(lw));
    }
    s.final_norm = Parameter<T>(Tensor<T>({d}, T{1}));
    s.unembed = Parameter<T>(gaussian({d, v}, 1.0 / std::sqrt(double(d)), rng));
    return s;
  }

  std::vector<std::pair<std::string, Parameter<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Parameter<T>*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& lw = layers[l];
      out.emplace_back(p + "attn_norm", &lw.attn_norm);
      out.emplace_back(p + "wq", &lw.wq);
      out.emplace_back(p + "wk", &lw.wk);
      out.emplace_back(p + "wv", &lw.wv);
      out.emplace_back(p + "wo", &lw.wo);
      out.emplace_back(p + "ffn_norm", &lw.ffn_norm);
      out.emplace_back(p + "w_gate", &lw.w_gate);
      out.emplace_back(p + "w_up", &lw.w_up);
      out.emplace_back(p + "w_down", &lw.w_down);
    }
    out.emplace_back("final_norm", &final_norm);
    out.emplace_back("unembed", &unembed);
    for (std::size_t i = 0; i < cross.size(); ++i) {
      const std::string p = "cross." + std::to_string(config.cross_layers[i]) + ".";
      out.emplace_back(p + "wq", &cross[i].wq);
      out.emplace_back(p + "wo", &cross[i].wo);
      out.emplace_back(p + "zero_key", &cross[i].zero_key);
    }
    return out;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }

  /// Number of scalars in all parameters, trainable or not.
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, p] : const_cast<ModelState*>(this)->named_parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  bool all_finite() const {
    for (auto& [name, p] : const_cast<ModelState*>(this)->named_parameters())
      if (!p->value.all_finite()) return false;
    return true;
  }

  template <class U>
  ModelState<U> cast() const {
    ModelState<U> o;
    o.config = config;
    auto conv = [](const Parameter<T>& p) { return Parameter<U>(p.value.template cast<U>(), p.trainable); };
    o.tok_emb = conv(tok_emb);
    for (const auto& lw : layers)
      o.layers.push_back({conv(lw.attn_norm), conv(lw.wq), conv(lw.wk), conv(lw.wv), conv(lw.wo), conv(lw.ffn_norm),
                          conv(lw.w_gate), conv(lw.w_up), conv(lw.w_down)});
    o.final_norm = conv(final_norm);
    o.unembed = conv(unembed);
    for (const auto& c : cross)
      o.cross.push_back({conv(c.wq), conv(c.wo), conv(c.zero_key), c.zero_value.template cast<U>()});
    return o;
  }

  static Tensor<T> gaussian(Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& x : t.vec()) x = static_cast<T>(rng.normal(0.0, stddev));
    return t;
  }
};

/// Adds gist cross-attention to every layer in config.cross_layers. The
/// cross-query projection starts as a copy of the layer's self-attention
/// query projection and the cross-output projection starts at zero, so the
/// extended model initially computes exactly what the base model computes.
template <class T>
ModelState<T> extend_model(const ModelState<T>& base, Rng& rng) {
  if (base.extended()) throw ContractError("extend_model: model already has cross-attention weights");
  base.config.validate();
  ModelState<T> s = base;
  const std::size_t d = s.config.d_model;
  const double key_std = 1.0 / std::sqrt(static_cast<double>(s.config.head_dim()));
  for (int l : s.config.cross_layers) {
    CrossAttnWeights<T> c;
    c.wq = Parameter<T>(s.layers[static_cast<std::size_t>(l)].wq.value);
    c.wo = Parameter<T>(Tensor<T>({d, d}, T{0}));
    c.zero_key = Parameter<T>(ModelState<T>::gaussian({d}, key_std, rng), s.config.zero_gist);
    c.zero_value = Tensor<T>({d}, T{0});
    s.cross.push_back(std::move(c));
  }
  return s;
}

}  // namespace incomes
