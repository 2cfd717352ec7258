#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "incomes/core/error.hpp"
#include "incomes/core/tensor.hpp"

namespace incomes {

/// Central-difference gradient (f(x+h) - f(x-h)) / 2h of a scalar function
/// with respect to every coordinate of `x`. `x` is restored on return.
template <class T>
std::vector<T> finite_diff_grad(const std::function<T()>& f, std::span<T> x, T step) {
  if (!(step > T{0})) throw ParameterError("finite_diff_grad: step must be positive");
  std::vector<T> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = x[i];
    x[i] = orig + step;
    const T fp = f();
    x[i] = orig - step;
    const T fm = f();
    x[i] = orig;
    g[i] = (fp - fm) / (T{2} * step);
  }
  return g;
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Per-coordinate relative error |a - n| / max(|a|, |n|, floor).
template <class T>
GradCheckReport compare_gradients(std::span<const T> analytic, std::span<const T> numeric, double floor = 1e-6) {
  if (analytic.size() != numeric.size()) throw DimensionError("compare_gradients: length mismatch");
  GradCheckReport r;
  r.checked = analytic.size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double abs_err = std::abs(a - n);
    const double rel = abs_err / std::max({std::abs(a), std::abs(n), floor});
    r.max_abs_error = std::max(r.max_abs_error, abs_err);
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = i;
    }
  }
  return r;
}

}  // namespace incomes
