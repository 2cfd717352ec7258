#pragma once

#include <cstddef>
#include <vector>

// Row-major dense kernels. Each output row is reduced in a fixed order that
// does not depend on how many rows are processed together, so packing
// independent sequences into one call is bitwise-equivalent to running them
// one by one.

namespace incomes::kernels {

/// c[m,n] (+)= a[m,k] * b[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = T{0};
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

/// c[k,n] += a[m,k]^T * g[m,n]
template <class T>
void gemm_tn_acc(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      if (av == T{0}) continue;
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * gi[j];
    }
  }
}

/// c[m,k] += g[m,n] * b[k,n]^T
template <class T>
void gemm_nt_acc(const T* g, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  std::vector<T> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(g, bt.data(), c, m, n, k, true);
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T s{0};
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

}  // namespace incomes::kernels
