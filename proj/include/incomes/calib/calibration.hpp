#pragma once

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "incomes/bench/eval.hpp"

namespace incomes {

/// One probe instance: an edit read back to itself (its text as both query
/// and answer) against a pool of the edit plus distractors.
struct ProbeInstance {
  EditRecord edit;
  std::vector<EditRecord> distractors;  // nested: the first k are the distractors of a pool of k + 1
};

inline std::vector<int> self_copy_input(const EditRecord& e) {
  std::vector<int> t = e.tokens;
  t.insert(t.end(), e.tokens.begin(), e.tokens.end());
  return t;
}

/// Probe instances from the world's overrides, each with `max_distractors`
/// distractors sharing no subject with the probed edit.
inline std::vector<ProbeInstance> make_probe_set(const SynthWorld& w, std::size_t n, std::size_t max_distractors,
                                                 std::uint64_t seed) {
  CaseSpec spec;
  spec.kind = CaseKind::recall;
  spec.n_cases = n;
  spec.pool_size = max_distractors + 1;
  spec.seed = seed;
  std::vector<ProbeInstance> out;
  for (auto& c : gen_cases(w, spec)) {
    ProbeInstance p;
    p.edit = c.edits[c.related[0]];
    for (std::size_t i = 0; i < c.edits.size(); ++i)
      if (i != c.related[0]) p.distractors.push_back(c.edits[i]);
    out.push_back(std::move(p));
  }
  return out;
}

/// Cross-attention log-probabilities at T = 1, one vector per (instance,
/// token, head), grouped by cross layer. Softmax at temperature T of these
/// equals the attention the model would compute at T.
struct ScoreSet {
  std::size_t n_entries = 0;
  std::vector<std::vector<double>> per_slot;  // flattened [vector][entry]

  std::size_t n_vectors(std::size_t slot) const { return per_slot[slot].size() / n_entries; }
};

template <class T>
ScoreSet collect_scores(const ModelState<T>& model, const std::vector<ProbeInstance>& probes, std::size_t pool_size,
                        std::size_t parallelism = 1) {
  if (probes.empty()) throw ContractError("calibration: empty probe set");
  if (pool_size == 0) throw ContractError("calibration: pool size must be positive");
  const std::size_t slots = model.config.cross_layers.size();
  std::vector<ScoreSet> parts(probes.size());
  GistCache<T> cache(model);
  parallel_for(probes.size(), parallelism, [&](std::size_t i) {
    const auto& p = probes[i];
    if (p.distractors.size() + 1 < pool_size) throw ContractError("calibration: probe has too few distractors");
    std::vector<EditRecord> edits{p.edit};
    edits.insert(edits.end(), p.distractors.begin(), p.distractors.begin() + static_cast<std::ptrdiff_t>(pool_size - 1));
    auto pool = cache.pool_for(edits);
    auto probe = forward_with_pool(model, self_copy_input(p.edit), pool, T{1}).second;
    ScoreSet& s = parts[i];
    s.n_entries = probe.n_entries();
    s.per_slot.resize(slots);
    for (std::size_t sl = 0; sl < slots; ++sl)
      for (std::size_t t = 0; t < probe.n_tokens(); ++t)
        for (std::size_t h = 0; h < probe.n_heads(); ++h)
          for (T v : probe.distribution(sl, t, h)) s.per_slot[sl].push_back(std::log(static_cast<double>(v)));
  });
  ScoreSet all;
  all.n_entries = parts[0].n_entries;
  all.per_slot.resize(slots);
  for (auto& p : parts)
    for (std::size_t sl = 0; sl < slots; ++sl) all.per_slot[sl].insert(all.per_slot[sl].end(), p.per_slot[sl].begin(), p.per_slot[sl].end());
  return all;
}

/// Mean entropy of softmax(scores / T) over every vector of a slot, and its
/// derivative with respect to log T.
inline std::pair<double, double> mean_entropy(const ScoreSet& s, std::size_t slot, double temperature) {
  const auto& v = s.per_slot[slot];
  const std::size_t ne = s.n_entries, nv = s.n_vectors(slot);
  std::vector<double> p(ne);
  double hsum = 0, dsum = 0;
  for (std::size_t k = 0; k < nv; ++k) {
    const double* x = v.data() + k * ne;
    double mx = -INFINITY;
    for (std::size_t e = 0; e < ne; ++e)
      if (std::isfinite(x[e])) mx = std::max(mx, x[e]);
    double z = 0;
    for (std::size_t e = 0; e < ne; ++e) z += (p[e] = std::isfinite(x[e]) ? std::exp((x[e] - mx) / temperature) : 0.0);
    double h = 0, m1 = 0, m2 = 0;
    for (std::size_t e = 0; e < ne; ++e) {
      if (p[e] == 0) continue;
      const double pe = p[e] / z, se = x[e] - mx;
      h -= pe * std::log(pe);
      m1 += pe * se;
      m2 += pe * se * se;
    }
    hsum += h;
    dsum += (m2 - m1 * m1) / (temperature * temperature);
  }
  return {hsum / static_cast<double>(nv), dsum / static_cast<double>(nv)};
}

/// Per-layer reference: mean entropy with the edit alone in the pool, T = 1.
template <class T>
std::vector<double> reference_entropy(const ModelState<T>& model, const std::vector<ProbeInstance>& probes,
                                      std::size_t parallelism = 1) {
  ScoreSet s = collect_scores(model, probes, 1, parallelism);
  std::vector<double> out;
  for (std::size_t sl = 0; sl < s.per_slot.size(); ++sl) out.push_back(mean_entropy(s, sl, 1.0).first);
  return out;
}

struct CalibrationOptions {
  double lr = 0.05;
  std::size_t max_iters = 500;
  double tolerance = 1e-4;  // on the squared entropy gap
};

struct CalibrationRow {
  std::size_t pool_size = 0;
  int layer = 0;
  double temperature = 1, reference_entropy = 0, achieved_entropy = 0;
  bool converged = false;
  std::size_t iterations = 0;
  std::vector<double> objective_trace;  // accepted iterations
};

/// Fits T on one slot so that the mean entropy matches `target`, by gradient
/// descent on log T. A step is kept only if it lowers the objective;
/// otherwise the step size is halved.
inline CalibrationRow fit_temperature(const ScoreSet& s, std::size_t slot, double target, const CalibrationOptions& opt) {
  CalibrationRow row;
  row.reference_entropy = target;
  double tau = 0, lr = opt.lr;
  auto [h, dh] = mean_entropy(s, slot, 1.0);
  double obj = (h - target) * (h - target);
  row.objective_trace.push_back(obj);
  std::size_t it = 0;
  for (; it < opt.max_iters && obj > opt.tolerance; ++it) {
    const double grad = 2 * (h - target) * dh;
    if (grad == 0) break;
    const double cand = tau - lr * grad;
    auto [h2, dh2] = mean_entropy(s, slot, std::exp(cand));
    const double obj2 = (h2 - target) * (h2 - target);
    if (obj2 < obj) {
      tau = cand;
      h = h2;
      dh = dh2;
      obj = obj2;
      row.objective_trace.push_back(obj);
      lr = std::min(lr * 1.5, 64 * opt.lr);
    } else {
      lr *= 0.5;
      if (lr < 1e-12) break;
    }
  }
  row.iterations = it;
  row.temperature = std::exp(tau);
  row.achieved_entropy = h;
  row.converged = obj <= opt.tolerance;
  return row;
}

template <class T>
std::vector<CalibrationRow> calibrate_temperature(const ModelState<T>& model, const std::vector<ProbeInstance>& probes,
                                                  const std::vector<std::size_t>& pool_sizes,
                                                  const CalibrationOptions& opt = {}, std::size_t parallelism = 1) {
  const auto ref = reference_entropy(model, probes, parallelism);
  std::vector<CalibrationRow> out;
  for (std::size_t ps : pool_sizes) {
    ScoreSet s = collect_scores(model, probes, ps, parallelism);
    for (std::size_t sl = 0; sl < ref.size(); ++sl) {
      CalibrationRow row = fit_temperature(s, sl, ref[sl], opt);
      row.pool_size = ps;
      row.layer = model.config.cross_layers[sl];
      out.push_back(std::move(row));
    }
  }
  return out;
}

inline void write_calibration_tsv(const std::vector<CalibrationRow>& rows, std::ostream& os) {
  os << "pool_size\tlayer\tfitted_T\treference_entropy\tachieved_entropy\tconverged\titerations\n";
  for (const auto& r : rows)
    os << r.pool_size << '\t' << r.layer << '\t' << r.temperature << '\t' << r.reference_entropy << '\t'
       << r.achieved_entropy << '\t' << (r.converged ? 1 : 0) << '\t' << r.iterations << '\n';
}

// ---- information-flow probes ----

struct ProbePoint {
  std::size_t position = 0;
  double zero_gist_prob = 0, golden_prob = 0, entropy = 0;  // mean over heads and cross layers
  std::vector<double> layer_zero_gist, layer_golden, layer_entropy;
};

struct ProbeTrace {
  std::string run_tag;
  std::vector<int> layers;
  std::vector<ProbePoint> points;
};

/// Per-token selection traces of one forward pass over `tokens`.
template <class T>
ProbeTrace probe_run(const ModelState<T>& model, const GistPool<T>& pool, const std::vector<int>& tokens,
                     std::optional<std::size_t> golden_index, T temperature, std::string run_tag = "") {
  auto probe = forward_with_pool(model, tokens, pool, temperature).second;
  ProbeTrace tr;
  tr.run_tag = std::move(run_tag);
  tr.layers = probe.layers;
  for (std::size_t t = 0; t < probe.n_tokens(); ++t) {
    ProbePoint p;
    p.position = t;
    for (std::size_t s = 0; s < probe.n_slots(); ++s) {
      p.layer_zero_gist.push_back(static_cast<double>(probe.zero_gist_prob(s, t)));
      p.layer_golden.push_back(golden_index ? static_cast<double>(probe.golden_prob(s, t, *golden_index)) : 0.0);
      p.layer_entropy.push_back(static_cast<double>(probe.entropy_at(s, t)));
    }
    const double n = static_cast<double>(probe.n_slots());
    for (std::size_t s = 0; s < probe.n_slots(); ++s) {
      p.zero_gist_prob += p.layer_zero_gist[s] / n;
      p.golden_prob += p.layer_golden[s] / n;
      p.entropy += p.layer_entropy[s] / n;
    }
    tr.points.push_back(std::move(p));
  }
  return tr;
}

inline void write_probe_header(std::ostream& os) { os << "position\tzero_gist_prob\tgolden_prob\tentropy\trun_tag\n"; }

inline void write_probe_tsv(const ProbeTrace& tr, std::ostream& os) {
  for (const auto& p : tr.points)
    os << p.position << '\t' << p.zero_gist_prob << '\t' << p.golden_prob << '\t' << p.entropy << '\t' << tr.run_tag << '\n';
}

/// Mean zero-gist probability per cross layer over many traces.
inline std::vector<double> layer_zero_gist_means(const std::vector<ProbeTrace>& traces) {
  std::vector<double> sum;
  std::size_t n = 0;
  for (const auto& tr : traces)
    for (const auto& p : tr.points) {
      if (sum.empty()) sum.assign(p.layer_zero_gist.size(), 0.0);
      for (std::size_t s = 0; s < sum.size(); ++s) sum[s] += p.layer_zero_gist[s];
      ++n;
    }
  for (auto& x : sum) x /= static_cast<double>(std::max<std::size_t>(n, 1));
  return sum;
}

}  // namespace incomes
