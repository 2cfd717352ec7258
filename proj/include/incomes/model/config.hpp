#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "incomes/core/error.hpp"
#include "incomes/core/rng.hpp"

namespace incomes {

/// Architecture hyperparameters of the decoder and its gist cross-attention.
struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 512;
  int gist_token_id = 511;
  std::vector<int> cross_layers{2, 3};
  std::size_t max_seq_len = 256;
  double inference_temperature = 0.45;
  double train_temperature = 1.0;
  bool zero_gist = true;
  std::size_t gists_per_edit = 1;
  /// When >= 0, cross queries are rotated at their own positions and gist keys
  /// at this fixed position. Negative: no rotation on the cross path.
  int canonical_gist_position = -1;
  std::size_t ffn_mult = 4;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t ffn_dim() const { return ffn_mult * d_model; }

  static std::vector<int> upper_half(std::size_t n_layers) {
    std::vector<int> out;
    for (std::size_t l = (n_layers + 1) / 2; l < n_layers; ++l) out.push_back(static_cast<int>(l));
    return out;
  }
  static std::vector<int> all_layers(std::size_t n_layers) {
    std::vector<int> out;
    for (std::size_t l = 0; l < n_layers; ++l) out.push_back(static_cast<int>(l));
    return out;
  }

  /// Slot of `layer` inside cross_layers, or -1.
  int cross_slot(int layer) const {
    for (std::size_t i = 0; i < cross_layers.size(); ++i)
      if (cross_layers[i] == layer) return static_cast<int>(i);
    return -1;
  }
  int last_cross_layer() const { return cross_layers.empty() ? -1 : cross_layers.back(); }

  void validate() const {
    auto bad = [](const std::string& field, const std::string& why) { throw ContractError("model config: " + field + ": " + why); };
    if (n_layers == 0) bad("n_layers", "must be positive");
    if (d_model == 0) bad("d_model", "must be positive");
    if (n_heads == 0 || d_model % n_heads != 0) bad("n_heads", "must divide d_model");
    if (head_dim() % 2 != 0) bad("n_heads", "head_dim must be even for rotary mixing");
    if (vocab_size < 2) bad("vocab_size", "must be at least 2");
    if (gist_token_id < 0 || static_cast<std::size_t>(gist_token_id) >= vocab_size) bad("gist_token_id", "must be < vocab_size");
    if (max_seq_len == 0) bad("max_seq_len", "must be positive");
    if (!(inference_temperature > 0)) bad("inference_temperature", "must be positive");
    if (!(train_temperature > 0)) bad("train_temperature", "must be positive");
    if (gists_per_edit != 1) bad("gists_per_edit", "only one gist token per edit is supported");
    std::set<int> seen;
    int prev = -1;
    for (int l : cross_layers) {
      if (l < 0 || static_cast<std::size_t>(l) >= n_layers) bad("cross_layers", "layer " + std::to_string(l) + " out of range");
      if (l <= prev) bad("cross_layers", "must be strictly increasing");
      prev = l;
    }
  }

  nlohmann::json to_json() const {
    return {{"n_layers", n_layers},
            {"d_model", d_model},
            {"n_heads", n_heads},
            {"vocab_size", vocab_size},
            {"gist_token_id", gist_token_id},
            {"cross_layers", cross_layers},
            {"max_seq_len", max_seq_len},
            {"inference_temperature", inference_temperature},
            {"train_temperature", train_temperature},
            {"zero_gist", zero_gist},
            {"gists_per_edit", gists_per_edit},
            {"canonical_gist_position", canonical_gist_position},
            {"ffn_mult", ffn_mult},
            {"rope_base", rope_base},
            {"norm_eps", norm_eps}};
  }

  /// Missing keys keep their defaults; present keys must have the right type.
  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    auto get = [&](const char* key, auto& field) {
      if (!j.contains(key)) return;
      try {
        j.at(key).get_to(field);
      } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("model config: field '") + key + "': " + e.what());
      }
    };
    get("n_layers", c.n_layers);
    get("d_model", c.d_model);
    get("n_heads", c.n_heads);
    get("vocab_size", c.vocab_size);
    c.gist_token_id = static_cast<int>(c.vocab_size) - 1;
    get("gist_token_id", c.gist_token_id);
    c.cross_layers = upper_half(c.n_layers);
    if (j.contains("cross_layers") && j.at("cross_layers").is_string()) {
      const auto mode = j.at("cross_layers").get<std::string>();
      if (mode == "half") c.cross_layers = upper_half(c.n_layers);
      else if (mode == "all") c.cross_layers = all_layers(c.n_layers);
      else throw ContractError("model config: field 'cross_layers': expected half|all or a list, got " + mode);
    } else {
      get("cross_layers", c.cross_layers);
    }
    get("max_seq_len", c.max_seq_len);
    get("inference_temperature", c.inference_temperature);
    get("train_temperature", c.train_temperature);
    get("zero_gist", c.zero_gist);
    get("gists_per_edit", c.gists_per_edit);
    get("canonical_gist_position", c.canonical_gist_position);
    get("ffn_mult", c.ffn_mult);
    get("rope_base", c.rope_base);
    get("norm_eps", c.norm_eps);
    c.validate();
    return c;
  }

  /// Hash of the canonical config document; pools carry it to reject mismatched models.
  std::uint64_t fingerprint() const { return fnv1a64(to_json().dump()); }
};

}  // namespace incomes
