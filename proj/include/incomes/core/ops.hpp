#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include "incomes/core/graph.hpp"
#include "incomes/core/kernels.hpp"

// Differentiable operations on Graph nodes. Matrices are rank-2 row-major;
// "rows" are tokens and "cols" are features unless noted.

namespace incomes {

namespace detail {

template <class T>
void check_same_graph(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.graph() != &b.graph()) throw ContractError(std::string(op) + ": operands belong to different graphs");
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src, T scale = T{1}) {
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += scale * s[i];
}

}  // namespace detail

/// Per-token sequence layout for packed batches: each token knows where its
/// segment begins and its position inside that segment. Attention never
/// crosses segment boundaries.
struct SeqLayout {
  std::vector<std::size_t> seg_begin;
  std::vector<int> position;

  std::size_t size() const { return position.size(); }

  static SeqLayout single(std::size_t n) {
    SeqLayout l;
    l.seg_begin.assign(n, 0);
    l.position.resize(n);
    for (std::size_t i = 0; i < n; ++i) l.position[i] = static_cast<int>(i);
    return l;
  }

  static SeqLayout packed(const std::vector<std::size_t>& lengths) {
    SeqLayout l;
    std::size_t off = 0;
    for (std::size_t len : lengths) {
      for (std::size_t i = 0; i < len; ++i) {
        l.seg_begin.push_back(off);
        l.position.push_back(static_cast<int>(i));
      }
      off += len;
    }
    return l;
  }
};

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b, "matmul");
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<T> out({m, n});
  kernels::gemm_nn(av.data(), bv.data(), out.data(), m, k, n, false);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("matmul", {ia, ib}, std::move(out), [ia, ib, m, k, n](Graph<T>& g, std::size_t self) {
    const Tensor<T>& go = g.grad_of(self);
    if (g.needs_grad(ia)) kernels::gemm_nt_acc(go.data(), g.value(ib).data(), g.grad_of(ia).data(), m, n, k);
    if (g.needs_grad(ib)) kernels::gemm_tn_acc(g.value(ia).data(), go.data(), g.grad_of(ib).data(), m, k, n);
  });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b, "add");
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  detail::add_into(out, b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("add", {ia, ib}, std::move(out), [ia, ib](Graph<T>& g, std::size_t self) {
    const Tensor<T>& go = g.grad_of(self);
    if (g.needs_grad(ia)) detail::add_into(g.grad_of(ia), go);
    if (g.needs_grad(ib)) detail::add_into(g.grad_of(ib), go);
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b, "mul");
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("mul", {ia, ib}, std::move(out), [ia, ib](Graph<T>& g, std::size_t self) {
    const Tensor<T>& go = g.grad_of(self);
    if (g.needs_grad(ia)) {
      auto& ga = g.grad_of(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * g.value(ib)[i];
    }
    if (g.needs_grad(ib)) {
      auto& gb = g.grad_of(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * g.value(ia)[i];
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& x : out.vec()) x *= s;
  const std::size_t ia = a.id();
  return a.graph().record("scale", {ia}, std::move(out),
                          [ia, s](Graph<T>& g, std::size_t self) { detail::add_into(g.grad_of(ia), g.grad_of(self), s); });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  T s{0};
  for (T x : a.value().vec()) s += x;
  const std::size_t ia = a.id();
  return a.graph().record("sum", {ia}, Tensor<T>({1}, std::vector<T>{s}), [ia](Graph<T>& g, std::size_t self) {
    const T go = g.grad_of(self)[0];
    for (auto& x : g.grad_of(ia).vec()) x += go;
  });
}

/// -log(x) of a positive scalar.
template <class T>
Var<T> neg_log(const Var<T>& a) {
  if (a.value().size() != 1) throw DimensionError("neg_log: expects a scalar, got " + shape_str(a.shape()));
  const T x = a.value()[0];
  if (!(x > T{0})) throw ParameterError("neg_log: argument must be positive");
  const std::size_t ia = a.id();
  return a.graph().record("neg_log", {ia}, Tensor<T>({1}, std::vector<T>{-std::log(x)}),
                          [ia, x](Graph<T>& g, std::size_t self) { g.grad_of(ia)[0] -= g.grad_of(self)[0] / x; });
}

/// Rows of `table` selected by `ids` (embedding lookup / gather).
template <class T>
Var<T> gather_rows(const Var<T>& table, const std::vector<int>& ids) {
  const auto& tv = table.value();
  const std::size_t d = tv.cols(), nrows = tv.rows();
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= nrows)
      throw IndexError("gather_rows: index " + std::to_string(ids[i]) + " outside [0, " + std::to_string(nrows) + ")");
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const std::size_t it = table.id();
  return table.graph().record("gather_rows", {it}, std::move(out), [it, ids, d](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    auto& gt = g.grad_of(it);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
      const T* src = go.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

/// Gain-only RMS normalization over the last axis.
template <class T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gain, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const std::size_t n = xv.rows(), d = xv.cols();
  if (gain.value().size() != d)
    throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " vs input " + shape_str(xv.shape()));
  Tensor<T> out(xv.shape());
  auto inv = std::make_shared<std::vector<T>>(n);
  const T* gv = gain.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = xv.data() + r * d;
    T ss{0};
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const T rinv = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
    (*inv)[r] = rinv;
    T* orow = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) orow[j] = xr[j] * rinv * gv[j];
  }
  const std::size_t ix = x.id(), ig = gain.id();
  return x.graph().record("rms_norm", {ix, ig}, std::move(out), [ix, ig, inv, n, d](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    const auto& xv = g.value(ix);
    const T* gv = g.value(ig).data();
    const bool gx = g.needs_grad(ix), gg = g.needs_grad(ig);
    T* dg = gg ? g.grad_of(ig).data() : nullptr;
    T* dx = gx ? g.grad_of(ix).data() : nullptr;
    for (std::size_t r = 0; r < n; ++r) {
      const T rinv = (*inv)[r];
      const T* xr = xv.data() + r * d;
      const T* gr = go.data() + r * d;
      if (gg)
        for (std::size_t j = 0; j < d; ++j) dg[j] += gr[j] * xr[j] * rinv;
      if (gx) {
        T m{0};
        for (std::size_t j = 0; j < d; ++j) m += gr[j] * gv[j] * xr[j] * rinv;
        m /= static_cast<T>(d);
        T* dr = dx + r * d;
        for (std::size_t j = 0; j < d; ++j) dr[j] += rinv * (gr[j] * gv[j] - xr[j] * rinv * m);
      }
    }
  });
}

namespace detail {

template <class T>
void rope_rotate(T* row, std::size_t d, std::size_t n_heads, int pos, T base, bool inverse) {
  const std::size_t hd = d / n_heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    T* v = row + h * hd;
    for (std::size_t i = 0; i + 1 < hd; i += 2) {
      const T theta = static_cast<T>(pos) * std::pow(base, -static_cast<T>(i) / static_cast<T>(hd));
      const T c = std::cos(theta), s = inverse ? -std::sin(theta) : std::sin(theta);
      const T a = v[i], b = v[i + 1];
      v[i] = a * c - b * s;
      v[i + 1] = a * s + b * c;
    }
  }
}

}  // namespace detail

/// Rotary position mixing applied independently to each head.
template <class T>
Var<T> rope(const Var<T>& x, const std::vector<int>& positions, std::size_t n_heads, T base = T(10000)) {
  Tensor<T> out = x.value();
  const std::size_t n = out.rows(), d = out.cols();
  if (positions.size() != n) throw DimensionError("rope: positions/rows mismatch");
  if (d % n_heads != 0) throw DimensionError("rope: width not divisible by heads");
  for (std::size_t r = 0; r < n; ++r) detail::rope_rotate(out.data() + r * d, d, n_heads, positions[r], base, false);
  const std::size_t ix = x.id();
  return x.graph().record("rope", {ix}, std::move(out), [ix, positions, n, d, n_heads, base](Graph<T>& g, std::size_t self) {
    Tensor<T> back = g.grad_of(self);
    for (std::size_t r = 0; r < n; ++r) detail::rope_rotate(back.data() + r * d, d, n_heads, positions[r], base, true);
    detail::add_into(g.grad_of(ix), back);
  });
}

/// Multi-head causal self-attention over packed segments. q, k, v: [n, d].
template <class T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, const SeqLayout& layout,
                        std::size_t n_heads) {
  const auto& qv = q.value();
  const std::size_t n = qv.rows(), d = qv.cols();
  if (k.shape() != qv.shape() || v.shape() != qv.shape())
    throw DimensionError("causal_attention: q/k/v shape mismatch " + shape_str(qv.shape()) + " " +
                         shape_str(k.shape()) + " " + shape_str(v.shape()));
  if (layout.size() != n) throw DimensionError("causal_attention: layout length mismatch");
  const std::size_t hd = d / n_heads;
  const T sc = T{1} / std::sqrt(static_cast<T>(hd));
  // Row t stores n_heads probability vectors of length span(t) starting at offsets[t].
  auto offsets = std::make_shared<std::vector<std::size_t>>(n + 1, 0);
  for (std::size_t t = 0; t < n; ++t) (*offsets)[t + 1] = (*offsets)[t] + (t - layout.seg_begin[t] + 1) * n_heads;
  auto probs = std::make_shared<std::vector<T>>((*offsets)[n]);
  Tensor<T> out({n, d});
  const auto& kv = k.value();
  const auto& vv = v.value();
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t b = layout.seg_begin[t], span = t - b + 1;
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* p = probs->data() + (*offsets)[t] + h * span;
      const T* qt = qv.data() + t * d + h * hd;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t u = 0; u < span; ++u) {
        p[u] = kernels::dot(qt, kv.data() + (b + u) * d + h * hd, hd) * sc;
        mx = std::max(mx, p[u]);
      }
      T z{0};
      for (std::size_t u = 0; u < span; ++u) {
        p[u] = std::exp(p[u] - mx);
        z += p[u];
      }
      T* o = out.data() + t * d + h * hd;
      for (std::size_t u = 0; u < span; ++u) {
        p[u] /= z;
        const T* vu = vv.data() + (b + u) * d + h * hd;
        for (std::size_t j = 0; j < hd; ++j) o[j] += p[u] * vu[j];
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  auto seg = std::make_shared<std::vector<std::size_t>>(layout.seg_begin);
  return q.graph().record(
      "causal_attention", {iq, ik, iv}, std::move(out),
      [iq, ik, iv, n, d, hd, n_heads, sc, offsets, probs, seg](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_of(self);
        const auto& qv = g.value(iq);
        const auto& kv = g.value(ik);
        const auto& vv = g.value(iv);
        T* dq = g.needs_grad(iq) ? g.grad_of(iq).data() : nullptr;
        T* dk = g.needs_grad(ik) ? g.grad_of(ik).data() : nullptr;
        T* dv = g.needs_grad(iv) ? g.grad_of(iv).data() : nullptr;
        std::vector<T> dp;
        for (std::size_t t = 0; t < n; ++t) {
          const std::size_t b = (*seg)[t], span = t - b + 1;
          dp.resize(span);
          for (std::size_t h = 0; h < n_heads; ++h) {
            const T* p = probs->data() + (*offsets)[t] + h * span;
            const T* got = go.data() + t * d + h * hd;
            T acc{0};
            for (std::size_t u = 0; u < span; ++u) {
              const T* vu = vv.data() + (b + u) * d + h * hd;
              dp[u] = kernels::dot(got, vu, hd);
              acc += p[u] * dp[u];
              if (dv) {
                T* dvu = dv + (b + u) * d + h * hd;
                for (std::size_t j = 0; j < hd; ++j) dvu[j] += p[u] * got[j];
              }
            }
            const T* qt = qv.data() + t * d + h * hd;
            for (std::size_t u = 0; u < span; ++u) {
              const T ds = p[u] * (dp[u] - acc) * sc;
              if (ds == T{0}) continue;
              const T* ku = kv.data() + (b + u) * d + h * hd;
              if (dq) {
                T* dqt = dq + t * d + h * hd;
                for (std::size_t j = 0; j < hd; ++j) dqt[j] += ds * ku[j];
              }
              if (dk) {
                T* dku = dk + (b + u) * d + h * hd;
                for (std::size_t j = 0; j < hd; ++j) dku[j] += ds * qt[j];
              }
            }
          }
        }
      });
}

/// Per-call record of cross-attention distributions: [tokens, heads, entries].
template <class T>
struct CrossAttnTrace {
  Tensor<T> probs;
};

/// Attention of every row of `q` over a pool of gist entries. Entry 0 is the
/// zero-gist (learnable key, fixed value) when `zero_key` is given; pool
/// entries follow in order. Scores are (q.k)/sqrt(head_dim)/temperature.
template <class T>
Var<T> cross_attention(const Var<T>& q, const std::optional<Var<T>>& keys, const std::optional<Var<T>>& values,
                       const std::optional<Var<T>>& zero_key, const Tensor<T>& zero_value, std::size_t n_heads,
                       T temperature, CrossAttnTrace<T>* trace = nullptr) {
  if (!(temperature > T{0})) throw ParameterError("cross_attention: temperature must be positive");
  const auto& qv = q.value();
  const std::size_t n = qv.rows(), d = qv.cols();
  const std::size_t m = keys ? keys->rows() : 0;
  if (keys.has_value() != values.has_value()) throw ContractError("cross_attention: keys and values must come together");
  if (keys && (keys->cols() != d || values->cols() != d || values->rows() != m))
    throw DimensionError("cross_attention: pool shape " + shape_str(keys->shape()) + "/" + shape_str(values->shape()) +
                         " incompatible with queries " + shape_str(qv.shape()));
  const std::size_t z = zero_key ? 1 : 0;
  const std::size_t ne = z + m;
  if (ne == 0) throw ContractError("cross_attention: empty pool (no zero-gist and no entries)");
  if (zero_key && (zero_key->value().size() != d || zero_value.size() != d))
    throw DimensionError("cross_attention: zero-gist key/value width mismatch");
  const std::size_t hd = d / n_heads;
  const T sc = T{1} / (std::sqrt(static_cast<T>(hd)) * temperature);

  const T* kdata = keys ? keys->value().data() : nullptr;
  const T* vdata = values ? values->value().data() : nullptr;
  const T* zk = zero_key ? zero_key->value().data() : nullptr;
  auto key_at = [&](std::size_t e) { return e < z ? zk : kdata + (e - z) * d; };
  auto val_at = [&](std::size_t e) { return e < z ? zero_value.data() : vdata + (e - z) * d; };

  auto probs = std::make_shared<Tensor<T>>(Shape{n, n_heads, ne});
  Tensor<T> out({n, d});
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* p = probs->data() + (t * n_heads + h) * ne;
      const T* qt = qv.data() + t * d + h * hd;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < ne; ++e) {
        p[e] = kernels::dot(qt, key_at(e) + h * hd, hd) * sc;
        mx = std::max(mx, p[e]);
      }
      T zsum{0};
      for (std::size_t e = 0; e < ne; ++e) {
        p[e] = std::exp(p[e] - mx);
        zsum += p[e];
      }
      T* o = out.data() + t * d + h * hd;
      for (std::size_t e = 0; e < ne; ++e) {
        p[e] /= zsum;
        const T* ve = val_at(e) + h * hd;
        for (std::size_t j = 0; j < hd; ++j) o[j] += p[e] * ve[j];
      }
    }
  }
  if (trace) trace->probs = *probs;

  std::vector<std::size_t> inputs{q.id()};
  const std::size_t iq = q.id();
  const std::size_t ik = keys ? keys->id() : 0, iv = values ? values->id() : 0, iz = zero_key ? zero_key->id() : 0;
  if (keys) {
    inputs.push_back(ik);
    inputs.push_back(iv);
  }
  if (zero_key) inputs.push_back(iz);
  const bool has_pool = keys.has_value();
  return q.graph().record(
      "cross_attention", std::move(inputs), std::move(out),
      [=, zv = zero_value](Graph<T>& g, std::size_t self) {
        const auto& go = g.grad_of(self);
        const T* qd = g.value(iq).data();
        const T* kd = has_pool ? g.value(ik).data() : nullptr;
        const T* vd = has_pool ? g.value(iv).data() : nullptr;
        const T* zkd = z ? g.value(iz).data() : nullptr;
        T* dq = g.needs_grad(iq) ? g.grad_of(iq).data() : nullptr;
        T* dk = has_pool && g.needs_grad(ik) ? g.grad_of(ik).data() : nullptr;
        T* dv = has_pool && g.needs_grad(iv) ? g.grad_of(iv).data() : nullptr;
        T* dz = z && g.needs_grad(iz) ? g.grad_of(iz).data() : nullptr;
        auto kat = [&](std::size_t e) { return e < z ? zkd : kd + (e - z) * d; };
        auto vat = [&](std::size_t e) { return e < z ? zv.data() : vd + (e - z) * d; };
        std::vector<T> dp(ne);
        for (std::size_t t = 0; t < n; ++t) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const T* p = probs->data() + (t * n_heads + h) * ne;
            const T* got = go.data() + t * d + h * hd;
            T acc{0};
            for (std::size_t e = 0; e < ne; ++e) {
              dp[e] = kernels::dot(got, vat(e) + h * hd, hd);
              acc += p[e] * dp[e];
              if (dv && e >= z) {
                T* dve = dv + (e - z) * d + h * hd;
                for (std::size_t j = 0; j < hd; ++j) dve[j] += p[e] * got[j];
              }
            }
            const T* qt = qd + t * d + h * hd;
            for (std::size_t e = 0; e < ne; ++e) {
              const T ds = p[e] * (dp[e] - acc) * sc;
              if (ds == T{0}) continue;
              const T* ke = kat(e) + h * hd;
              if (dq) {
                T* dqt = dq + t * d + h * hd;
                for (std::size_t j = 0; j < hd; ++j) dqt[j] += ds * ke[j];
              }
              T* dke = e < z ? (dz ? dz + h * hd : nullptr) : (dk ? dk + (e - z) * d + h * hd : nullptr);
              if (dke)
                for (std::size_t j = 0; j < hd; ++j) dke[j] += ds * qt[j];
            }
          }
        }
      });
}

/// Mean cross-attention probability placed on designated entries:
/// mean over `targets` (token row, entry index) and heads. Entry indexing
/// matches cross_attention (0 = zero-gist when present).
template <class T>
Var<T> cross_attention_mass(const Var<T>& q, const std::optional<Var<T>>& keys, const std::optional<Var<T>>& zero_key,
                            std::size_t n_heads, T temperature,
                            const std::vector<std::pair<std::size_t, std::size_t>>& targets) {
  if (targets.empty()) throw ContractError("cross_attention_mass: no targets");
  const auto& qv = q.value();
  const std::size_t d = qv.cols(), hd = d / n_heads;
  const std::size_t z = zero_key ? 1 : 0, m = keys ? keys->rows() : 0, ne = z + m;
  const T sc = T{1} / (std::sqrt(static_cast<T>(hd)) * temperature);
  const T inv_count = T{1} / static_cast<T>(targets.size() * n_heads);
  auto probs = std::make_shared<std::vector<T>>(targets.size() * n_heads * ne);
  const T* kd = keys ? keys->value().data() : nullptr;
  const T* zk = zero_key ? zero_key->value().data() : nullptr;
  T mass{0};
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto [t, tgt] = targets[i];
    if (t >= qv.rows() || tgt >= ne) throw IndexError("cross_attention_mass: target out of range");
    for (std::size_t h = 0; h < n_heads; ++h) {
      T* p = probs->data() + (i * n_heads + h) * ne;
      const T* qt = qv.data() + t * d + h * hd;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < ne; ++e) {
        const T* ke = (e < z ? zk : kd + (e - z) * d) + h * hd;
        p[e] = kernels::dot(qt, ke, hd) * sc;
        mx = std::max(mx, p[e]);
      }
      T zs{0};
      for (std::size_t e = 0; e < ne; ++e) zs += (p[e] = std::exp(p[e] - mx));
      for (std::size_t e = 0; e < ne; ++e) p[e] /= zs;
      mass += p[tgt] * inv_count;
    }
  }
  std::vector<std::size_t> inputs{q.id()};
  const std::size_t iq = q.id(), ik = keys ? keys->id() : 0, iz = zero_key ? zero_key->id() : 0;
  if (keys) inputs.push_back(ik);
  if (zero_key) inputs.push_back(iz);
  const bool has_pool = keys.has_value();
  return q.graph().record(
      "cross_attention_mass", std::move(inputs), Tensor<T>({1}, std::vector<T>{mass}),
      [=](Graph<T>& g, std::size_t self) {
        const T go = g.grad_of(self)[0] * inv_count;
        const T* qd = g.value(iq).data();
        const T* kd = has_pool ? g.value(ik).data() : nullptr;
        const T* zkd = z ? g.value(iz).data() : nullptr;
        T* dq = g.needs_grad(iq) ? g.grad_of(iq).data() : nullptr;
        T* dk = has_pool && g.needs_grad(ik) ? g.grad_of(ik).data() : nullptr;
        T* dz = z && g.needs_grad(iz) ? g.grad_of(iz).data() : nullptr;
        for (std::size_t i = 0; i < targets.size(); ++i) {
          const auto [t, tgt] = targets[i];
          for (std::size_t h = 0; h < n_heads; ++h) {
            const T* p = probs->data() + (i * n_heads + h) * ne;
            const T* qt = qd + t * d + h * hd;
            for (std::size_t e = 0; e < ne; ++e) {
              // d p_tgt / d s_e = p_tgt (1[e==tgt] - p_e)
              const T ds = go * p[tgt] * ((e == tgt ? T{1} : T{0}) - p[e]) * sc;
              if (ds == T{0}) continue;
              const T* ke = (e < z ? zkd : kd + (e - z) * d) + h * hd;
              if (dq) {
                T* dqt = dq + t * d + h * hd;
                for (std::size_t j = 0; j < hd; ++j) dqt[j] += ds * ke[j];
              }
              T* dke = e < z ? (dz ? dz + h * hd : nullptr) : (dk ? dk + (e - z) * d + h * hd : nullptr);
              if (dke)
                for (std::size_t j = 0; j < hd; ++j) dke[j] += ds * qt[j];
            }
          }
        }
      });
}

/// silu(a) * b, elementwise (gated feed-forward activation).
template <class T>
Var<T> silu_gate(const Var<T>& a, const Var<T>& b) {
  detail::check_same_graph(a, b, "silu_gate");
  if (a.shape() != b.shape())
    throw DimensionError("silu_gate: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T s = T{1} / (T{1} + std::exp(-av[i]));
    out[i] = av[i] * s * bv[i];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().record("silu_gate", {ia, ib}, std::move(out), [ia, ib](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    const auto& av = g.value(ia);
    const auto& bv = g.value(ib);
    T* da = g.needs_grad(ia) ? g.grad_of(ia).data() : nullptr;
    T* db = g.needs_grad(ib) ? g.grad_of(ib).data() : nullptr;
    for (std::size_t i = 0; i < go.size(); ++i) {
      const T s = T{1} / (T{1} + std::exp(-av[i]));
      if (da) da[i] += go[i] * bv[i] * s * (T{1} + av[i] * (T{1} - s));
      if (db) db[i] += go[i] * av[i] * s;
    }
  });
}

/// Row-wise softmax of logits / temperature.
template <class T>
Var<T> softmax_rows(const Var<T>& x, T temperature) {
  if (!(temperature > T{0})) throw ParameterError("softmax_rows: temperature must be positive");
  Tensor<T> out(x.shape());
  const auto& xv = x.value();
  const std::size_t n = xv.rows(), c = xv.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = xv.data() + r * c;
    T* o = out.data() + r * c;
    T mx = *std::max_element(xr, xr + c);
    T z{0};
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp((xr[j] - mx) / temperature));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  const std::size_t ix = x.id();
  return x.graph().record("softmax_rows", {ix}, std::move(out), [ix, n, c, temperature](Graph<T>& g, std::size_t self) {
    const auto& go = g.grad_of(self);
    const auto& p = g.value(self);
    auto& gx = g.grad_of(ix);
    for (std::size_t r = 0; r < n; ++r) {
      T acc{0};
      for (std::size_t j = 0; j < c; ++j) acc += go[r * c + j] * p[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += p[r * c + j] * (go[r * c + j] - acc) / temperature;
    }
  });
}

namespace detail {

template <class T>
void log_softmax_row(const T* x, T* out, std::size_t c) {
  T mx = *std::max_element(x, x + c);
  T z{0};
  for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
  const T lse = mx + std::log(z);
  for (std::size_t j = 0; j < c; ++j) out[j] = x[j] - lse;
}

}  // namespace detail

/// sum_i w_i * CE(logits_i, target_i). Rows with target < 0 are skipped.
template <class T>
Var<T> weighted_cross_entropy(const Var<T>& logits, const std::vector<int>& targets, const std::vector<T>& weights) {
  const auto& lv = logits.value();
  const std::size_t n = lv.rows(), c = lv.cols();
  if (targets.size() != n || weights.size() != n)
    throw DimensionError("weighted_cross_entropy: targets/weights length must equal rows " + std::to_string(n));
  std::vector<T> lp(c);
  T total{0};
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= c)
      throw IndexError("weighted_cross_entropy: target " + std::to_string(targets[r]) + " >= " + std::to_string(c));
    detail::log_softmax_row(lv.data() + r * c, lp.data(), c);
    total -= weights[r] * lp[static_cast<std::size_t>(targets[r])];
  }
  const std::size_t il = logits.id();
  return logits.graph().record(
      "weighted_cross_entropy", {il}, Tensor<T>({1}, std::vector<T>{total}),
      [il, targets, weights, n, c](Graph<T>& g, std::size_t self) {
        const T go = g.grad_of(self)[0];
        const auto& lv = g.value(il);
        auto& gl = g.grad_of(il);
        std::vector<T> lp(c);
        for (std::size_t r = 0; r < n; ++r) {
          if (targets[r] < 0 || weights[r] == T{0}) continue;
          detail::log_softmax_row(lv.data() + r * c, lp.data(), c);
          T* gr = gl.data() + r * c;
          const T s = go * weights[r];
          for (std::size_t j = 0; j < c; ++j) gr[j] += s * std::exp(lp[j]);
          gr[targets[r]] -= s;
        }
      });
}

/// sum_i w_i * KL(p_i || softmax(logits_i)) for fixed reference rows p_i.
/// Rows with w_i == 0 are skipped.
template <class T>
Var<T> weighted_kl(const Var<T>& logits, const Tensor<T>& ref_probs, const std::vector<T>& weights) {
  const auto& lv = logits.value();
  const std::size_t n = lv.rows(), c = lv.cols();
  if (ref_probs.rows() != n || ref_probs.cols() != c || weights.size() != n)
    throw DimensionError("weighted_kl: reference " + shape_str(ref_probs.shape()) + " vs logits " +
                         shape_str(lv.shape()));
  std::vector<T> lp(c);
  T total{0};
  for (std::size_t r = 0; r < n; ++r) {
    if (weights[r] == T{0}) continue;
    detail::log_softmax_row(lv.data() + r * c, lp.data(), c);
    const T* p = ref_probs.data() + r * c;
    T kl{0};
    for (std::size_t j = 0; j < c; ++j)
      if (p[j] > T{0}) kl += p[j] * (std::log(p[j]) - lp[j]);
    total += weights[r] * kl;
  }
  const std::size_t il = logits.id();
  auto ref = std::make_shared<Tensor<T>>(ref_probs);
  return logits.graph().record("weighted_kl", {il}, Tensor<T>({1}, std::vector<T>{total}),
                               [il, ref, weights, n, c](Graph<T>& g, std::size_t self) {
                                 const T go = g.grad_of(self)[0];
                                 const auto& lv = g.value(il);
                                 auto& gl = g.grad_of(il);
                                 std::vector<T> lp(c);
                                 for (std::size_t r = 0; r < n; ++r) {
                                   if (weights[r] == T{0}) continue;
                                   detail::log_softmax_row(lv.data() + r * c, lp.data(), c);
                                   const T* p = ref->data() + r * c;
                                   T* gr = gl.data() + r * c;
                                   const T s = go * weights[r];
                                   for (std::size_t j = 0; j < c; ++j) gr[j] += s * (std::exp(lp[j]) - p[j]);
                                 }
                               });
}

/// Throws NumericError if any value or parameter gradient in the graph is not finite.
template <class T>
void check_finite(const Tensor<T>& t, const std::string& what) {
  if (!t.all_finite()) throw NumericError("non-finite values in " + what);
}

}  // namespace incomes
