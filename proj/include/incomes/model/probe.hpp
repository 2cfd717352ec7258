#pragma once

#include <span>
#include <vector>

#include "incomes/core/functional.hpp"
#include "incomes/core/tensor.hpp"

namespace incomes {

/// Cross-attention distributions recorded by one forward pass: for every
/// cross layer, a [tokens, heads, entries] tensor. Entry 0 is the zero-gist
/// when the model has one; pool entry i is then entry i + 1.
template <class T>
struct AttnProbe {
  std::vector<int> layers;
  std::vector<Tensor<T>> probs;
  bool has_zero_gist = true;

  std::size_t n_slots() const { return probs.size(); }
  std::size_t n_tokens() const { return probs.empty() ? 0 : probs[0].dim(0); }
  std::size_t n_heads() const { return probs.empty() ? 0 : probs[0].dim(1); }
  std::size_t n_entries() const { return probs.empty() ? 0 : probs[0].dim(2); }

  /// Probe entry index of pool entry `pool_index`.
  std::size_t entry_of(std::size_t pool_index) const { return pool_index + (has_zero_gist ? 1 : 0); }

  std::span<const T> distribution(std::size_t slot, std::size_t token, std::size_t head) const {
    const std::size_t ne = n_entries();
    return {probs[slot].data() + (token * n_heads() + head) * ne, ne};
  }

  /// Head-averaged probability of probe entry `entry`.
  T entry_prob(std::size_t slot, std::size_t token, std::size_t entry) const {
    T s{0};
    for (std::size_t h = 0; h < n_heads(); ++h) s += distribution(slot, token, h)[entry];
    return s / static_cast<T>(n_heads());
  }

  T zero_gist_prob(std::size_t slot, std::size_t token) const {
    return has_zero_gist ? entry_prob(slot, token, 0) : T{0};
  }

  T golden_prob(std::size_t slot, std::size_t token, std::size_t golden_pool_index) const {
    return entry_prob(slot, token, entry_of(golden_pool_index));
  }

  /// Head-averaged entropy (nats).
  T entropy_at(std::size_t slot, std::size_t token) const {
    T s{0};
    for (std::size_t h = 0; h < n_heads(); ++h) s += entropy(distribution(slot, token, h));
    return s / static_cast<T>(n_heads());
  }
};

}  // namespace incomes
