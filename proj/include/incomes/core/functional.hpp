#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "incomes/core/error.hpp"
#include "incomes/core/tensor.hpp"

// Plain (non-recording) numeric routines used for evaluation, teacher passes
// and analytics. Their differentiable counterparts live in ops.hpp.

namespace incomes {

/// Softmax of logits / temperature along the last axis.
template <class T>
Tensor<T> softmax_t(const Tensor<T>& logits, T temperature) {
  if (!(temperature > T{0})) throw ParameterError("softmax_t: temperature must be positive, got " + std::to_string(temperature));
  if (logits.cols() == 0) throw DimensionError("softmax_t: last axis must be non-empty");
  Tensor<T> out(logits.shape());
  const std::size_t c = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto x = logits.row(r);
    auto o = out.row(r);
    const T mx = *std::max_element(x.begin(), x.end());
    T z{0};
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp((x[j] - mx) / temperature));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  return out;
}

template <class T>
std::vector<T> log_softmax(std::span<const T> x) {
  const T mx = *std::max_element(x.begin(), x.end());
  T z{0};
  for (T v : x) z += std::exp(v - mx);
  const T lse = mx + std::log(z);
  std::vector<T> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = x[j] - lse;
  return out;
}

/// -log softmax(logits)[target].
template <class T>
T cross_entropy(std::span<const T> logits, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
    throw IndexError("cross_entropy: target " + std::to_string(target) + " outside [0, " +
                     std::to_string(logits.size()) + ")");
  const T mx = *std::max_element(logits.begin(), logits.end());
  T z{0};
  for (T v : logits) z += std::exp(v - mx);
  return std::max(T{0}, mx + std::log(z) - logits[static_cast<std::size_t>(target)]);
}

/// KL(p || q) with q given as log-probabilities; 0 log 0 = 0.
template <class T>
T kl_divergence(std::span<const T> p, std::span<const T> q_logprobs) {
  if (p.size() != q_logprobs.size()) throw DimensionError("kl_divergence: length mismatch");
  T s{0};
  for (T v : p) {
    if (v < T{0}) throw ContractError("kl_divergence: negative probability");
    s += v;
  }
  if (std::abs(s - T{1}) > T(1e-6)) throw ContractError("kl_divergence: p is not normalized (sum " + std::to_string(s) + ")");
  T kl{0};
  for (std::size_t j = 0; j < p.size(); ++j)
    if (p[j] > T{0}) kl += p[j] * (std::log(p[j]) - q_logprobs[j]);
  return kl;
}

/// Shannon entropy in nats; 0 log 0 = 0.
template <class T>
T entropy(std::span<const T> p) {
  T h{0};
  for (T v : p)
    if (v > T{0}) h -= v * std::log(v);
  return h;
}

template <class T>
std::size_t argmax(std::span<const T> x) {
  return static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
}

template <class T>
std::size_t argmax(std::span<T> x) {
  return argmax(std::span<const T>(x));
}

}  // namespace incomes
