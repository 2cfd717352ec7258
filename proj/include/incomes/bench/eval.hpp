#pragma once

#include <algorithm>
#include <chrono>
#include <map>
#include <mutex>
#include <ostream>
#include <thread>

#include "incomes/bench/cases.hpp"
#include "incomes/gist/compress.hpp"
#include "incomes/train/format.hpp"

namespace incomes {

enum class Method { incomes, icl, base };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::incomes: return "incomes";
    case Method::icl: return "icl";
    case Method::base: return "base";
  }
  return "?";
}

struct CaseOutcome {
  std::int64_t case_id = 0;
  bool success = false;
  bool excluded = false;  // did not fit max_seq_len
  std::vector<int> prediction;
  double golden_prob = 0, zero_gist_prob = 0;  // incomes only; averaged over answer rows
  /// Output distributions at the answer rows (kept on request).
  std::vector<std::vector<float>> answer_dists;
};

/// Runs fn(i) for i in [0, n) over `workers` threads; i is visited once.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errs(workers);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < n; i += workers) fn(i);
        } catch (...) {
          errs[w] = std::current_exception();
        }
      });
  }
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

namespace detail {

/// Greedy answer read off a teacher-forced pass: the argmax at every answer
/// row. The match with `answer` is exact iff greedy decoding would emit it.
template <class T>
std::vector<int> forced_argmax(const Tensor<T>& logits, std::size_t first_row, std::size_t n) {
  std::vector<int> out;
  for (std::size_t j = 0; j < n; ++j) out.push_back(static_cast<int>(argmax(logits.row(first_row + j))));
  return out;
}

template <class T>
std::vector<float> softmax_row(std::span<const T> logits, T temperature = T{1}) {
  std::vector<float> p(logits.size());
  T mx = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = static_cast<float>(std::exp((logits[i] - mx) / temperature)));
  for (auto& x : p) x = static_cast<float>(x / z);
  return p;
}

}  // namespace detail

/// The unedited model's greedy answer for each query (answer length taken
/// from the case). Used as locality gold and by the base method.
template <class T>
std::vector<std::vector<int>> base_answers(const ModelState<T>& base, const std::vector<BenchmarkCase>& cases,
                                           std::size_t parallelism = 1) {
  std::vector<std::vector<int>> out(cases.size());
  parallel_for(cases.size(), parallelism, [&](std::size_t i) {
    const auto& c = cases[i];
    std::vector<int> seq = c.query;
    // greedy, one token at a time (answers are short)
    for (std::size_t j = 0; j < c.answer.size(); ++j) {
      auto logits = forward_base(base, seq).first;
      const int t = static_cast<int>(argmax(logits.row(logits.rows() - 1)));
      out[i].push_back(t);
      seq.push_back(t);
    }
  });
  return out;
}

/// Gold answer of a case: the stored answer, or the base model's own
/// prediction for locality cases.
inline const std::vector<int>& gold_of(const BenchmarkCase& c, const std::vector<std::vector<int>>* base_gold, std::size_t i) {
  if (c.kind == CaseKind::locality && base_gold) return (*base_gold)[i];
  return c.answer;
}

/// Teacher-forced scoring of `seq = prefix ++ query ++ gold`.
template <class T>
CaseOutcome score_sequence(const ModelState<T>& model, const std::vector<int>& prefix, const std::vector<int>& query,
                           const std::vector<int>& gold, bool keep_dists) {
  CaseOutcome o;
  std::vector<int> seq = prefix;
  seq.insert(seq.end(), query.begin(), query.end());
  const std::size_t first = seq.size() - 1;
  seq.insert(seq.end(), gold.begin(), gold.end() - 1);
  if (seq.size() > model.config.max_seq_len) {
    o.excluded = true;
    return o;
  }
  auto logits = forward_base(model, seq).first;
  o.prediction = detail::forced_argmax(logits, first, gold.size());
  o.success = o.prediction == gold;
  if (keep_dists)
    for (std::size_t j = 0; j < gold.size(); ++j) o.answer_dists.push_back(detail::softmax_row<T>(logits.row(first + j)));
  return o;
}

/// In-context baseline: every candidate edit as a text prefix, in pool order.
template <class T>
CaseOutcome icl_predict(const ModelState<T>& base, const BenchmarkCase& c, const std::vector<int>& gold) {
  std::vector<const EditRecord*> edits;
  for (const auto& e : c.edits) edits.push_back(&e);
  CaseOutcome o = score_sequence(base, context_prefix(edits), c.query, gold, false);
  o.case_id = c.case_id;
  return o;
}

template <class T>
CaseOutcome base_predict(const ModelState<T>& base, const BenchmarkCase& c, const std::vector<int>& gold) {
  CaseOutcome o = score_sequence(base, {}, c.query, gold, false);
  o.case_id = c.case_id;
  return o;
}

/// Compressed edits reused across cases; compression of an edit depends on
/// its tokens only.
template <class T>
class GistCache {
 public:
  explicit GistCache(const ModelState<T>& model) : model_(model) {}

  GistPool<T> pool_for(const std::vector<EditRecord>& edits) {
    std::vector<GistEntry<T>> entries;
    for (const auto& e : edits) {
      GistEntry<T> g = lookup(e);
      g.edit_id = e.edit_id;
      entries.push_back(std::move(g));
    }
    return GistPool<T>::build(std::move(entries));
  }

  /// Seeds the cache with an entry compressed elsewhere.
  void insert(const std::vector<int>& tokens, const GistEntry<T>& entry) {
    std::lock_guard lk(mu_);
    cache_.insert_or_assign(tokens, entry);
  }
  std::size_t size() {
    std::lock_guard lk(mu_);
    return cache_.size();
  }

  void warm(const std::vector<EditRecord>& edits, std::size_t parallelism) {
    std::vector<EditRecord> missing;
    {
      std::lock_guard lk(mu_);
      std::set<std::vector<int>> seen;
      for (const auto& e : edits)
        if (!cache_.count(e.tokens) && seen.insert(e.tokens).second) missing.push_back(e);
    }
    auto done = compress_batch(model_, missing, parallelism);
    std::lock_guard lk(mu_);
    for (std::size_t i = 0; i < missing.size(); ++i) cache_.emplace(missing[i].tokens, std::move(done[i]));
  }

 private:
  GistEntry<T> lookup(const EditRecord& e) {
    {
      std::lock_guard lk(mu_);
      auto it = cache_.find(e.tokens);
      if (it != cache_.end()) return it->second;
    }
    GistEntry<T> g = compress_edit(model_, e);
    std::lock_guard lk(mu_);
    cache_.emplace(e.tokens, g);
    return g;
  }

  const ModelState<T>& model_;
  std::mutex mu_;
  std::map<std::vector<int>, GistEntry<T>> cache_;
};

/// Gist-pool prediction at temperature T. The probe scalars average heads
/// and cross layers over the rows that predict answer tokens.
template <class T>
CaseOutcome incomes_predict(const ModelState<T>& student, const GistPool<T>& pool, const BenchmarkCase& c,
                            const std::vector<int>& gold, T temperature, bool keep_dists = false) {
  CaseOutcome o;
  o.case_id = c.case_id;
  std::vector<int> seq = c.query;
  const std::size_t first = seq.size() - 1;
  seq.insert(seq.end(), gold.begin(), gold.end() - 1);
  if (seq.size() > student.config.max_seq_len) {
    o.excluded = true;
    return o;
  }
  auto [logits, probe] = forward_with_pool(student, seq, pool, temperature);
  o.prediction = detail::forced_argmax(logits, first, gold.size());
  o.success = o.prediction == gold;
  double gsum = 0, zsum = 0;
  std::size_t gcnt = 0, zcnt = 0;
  for (std::size_t j = 0; j < gold.size(); ++j)
    for (std::size_t s = 0; s < probe.n_slots(); ++s) {
      zsum += static_cast<double>(probe.zero_gist_prob(s, first + j));
      ++zcnt;
      if (j < c.golden.size() && c.golden[j] >= 0) {
        gsum += static_cast<double>(probe.golden_prob(s, first + j, static_cast<std::size_t>(c.golden[j])));
        ++gcnt;
      }
    }
  o.zero_gist_prob = zcnt ? zsum / static_cast<double>(zcnt) : 0.0;
  o.golden_prob = gcnt ? gsum / static_cast<double>(gcnt) : 0.0;
  if (keep_dists)
    for (std::size_t j = 0; j < gold.size(); ++j) o.answer_dists.push_back(detail::softmax_row<T>(logits.row(first + j)));
  return o;
}

/// One evaluated condition. Rates divide by n_cases, so capacity-excluded
/// cases count against a method.
struct ConditionResult {
  std::string method, kind;
  std::size_t pool_size = 0;
  std::size_t n_cases = 0, success = 0, failure = 0, excluded = 0;
  double mean_golden_prob = 0, mean_zero_gist_prob = 0;
  double seconds = 0;
  std::size_t memory_bytes = 0;

  double rate() const { return n_cases ? static_cast<double>(success) / static_cast<double>(n_cases) : 0.0; }

  nlohmann::json to_json() const {
    return {{"method", method},       {"kind", kind},           {"pool_size", pool_size},
            {"n_cases", n_cases},     {"success", success},     {"failure", failure},
            {"excluded", excluded},   {"rate", rate()},         {"mean_golden_prob", mean_golden_prob},
            {"mean_zero_gist_prob", mean_zero_gist_prob},       {"seconds", seconds},
            {"memory_bytes", memory_bytes}};
  }
  static ConditionResult from_json(const nlohmann::json& j) {
    ConditionResult r;
    r.method = j.at("method");
    r.kind = j.at("kind");
    r.pool_size = j.at("pool_size");
    r.n_cases = j.at("n_cases");
    r.success = j.at("success");
    r.failure = j.at("failure");
    r.excluded = j.at("excluded");
    r.mean_golden_prob = j.value("mean_golden_prob", 0.0);
    r.mean_zero_gist_prob = j.value("mean_zero_gist_prob", 0.0);
    r.seconds = j.value("seconds", 0.0);
    r.memory_bytes = j.value("memory_bytes", std::size_t{0});
    return r;
  }
};

struct EvalReport {
  std::vector<ConditionResult> rows;

  const ConditionResult* find(const std::string& method, const std::string& kind, std::size_t pool) const {
    for (const auto& r : rows)
      if (r.method == method && r.kind == kind && r.pool_size == pool) return &r;
    return nullptr;
  }

  void write_jsonl(std::ostream& os) const {
    for (const auto& r : rows) os << r.to_json().dump() << '\n';
  }
  void write_tsv(std::ostream& os) const {
    os << "method\tkind\tpool_size\tn_cases\tsuccess\tfailure\texcluded\trate\tmean_golden_prob\tmean_zero_gist_prob\tseconds\tmemory_bytes\n";
    for (const auto& r : rows)
      os << r.method << '\t' << r.kind << '\t' << r.pool_size << '\t' << r.n_cases << '\t' << r.success << '\t' << r.failure
         << '\t' << r.excluded << '\t' << r.rate() << '\t' << r.mean_golden_prob << '\t' << r.mean_zero_gist_prob << '\t'
         << r.seconds << '\t' << r.memory_bytes << '\n';
  }
  static EvalReport read_jsonl(std::istream& is) {
    EvalReport rep;
    std::string line;
    while (std::getline(is, line))
      if (!line.empty()) rep.rows.push_back(ConditionResult::from_json(nlohmann::json::parse(line)));
    return rep;
  }
};

struct EvalOptions {
  std::vector<Method> methods{Method::incomes, Method::icl, Method::base};
  std::size_t parallelism = 1;
  double temperature = 0.45;
  bool keep_dists = false;
};

/// Outcomes of one method over a case set that shares a kind and pool size.
struct MethodRun {
  ConditionResult summary;
  std::vector<CaseOutcome> outcomes;
};

template <class T>
MethodRun evaluate_method(Method m, const ModelState<T>* student, const ModelState<T>& base,
                          const std::vector<BenchmarkCase>& cases, const std::vector<std::vector<int>>& base_gold,
                          const EvalOptions& opt, GistCache<T>* cache = nullptr) {
  MethodRun run;
  run.outcomes.resize(cases.size());
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<GistCache<T>> local;
  if (m == Method::incomes) {
    if (!student) throw ContractError("evaluate: incomes method needs a student model");
    if (!cache) cache = &local.emplace(*student);
    std::vector<EditRecord> all;
    for (const auto& c : cases) all.insert(all.end(), c.edits.begin(), c.edits.end());
    cache->warm(all, opt.parallelism);
  }
  parallel_for(cases.size(), opt.parallelism, [&](std::size_t i) {
    const auto& c = cases[i];
    const auto& gold = gold_of(c, &base_gold, i);
    switch (m) {
      case Method::incomes: {
        auto pool = cache->pool_for(c.edits);
        run.outcomes[i] = incomes_predict(*student, pool, c, gold, static_cast<T>(opt.temperature), opt.keep_dists);
        break;
      }
      case Method::icl: run.outcomes[i] = icl_predict(base, c, gold); break;
      case Method::base: run.outcomes[i] = base_predict(base, c, gold); break;
    }
  });
  auto& s = run.summary;
  s.method = to_string(m);
  s.kind = cases.empty() ? "" : cases[0].label();
  s.pool_size = cases.empty() ? 0 : cases[0].edits.size();
  s.n_cases = cases.size();
  double g = 0, z = 0;
  for (const auto& o : run.outcomes) {
    if (o.excluded) ++s.excluded;
    else if (o.success) ++s.success;
    else ++s.failure;
    g += o.golden_prob;
    z += o.zero_gist_prob;
  }
  const std::size_t scored = s.n_cases - s.excluded;
  if (m == Method::incomes && scored) {
    s.mean_golden_prob = g / static_cast<double>(scored);
    s.mean_zero_gist_prob = z / static_cast<double>(scored);
  }
  s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!cases.empty()) {
    const ModelConfig& cfg = base.config;
    const std::size_t n = cases[0].edits.size();
    if (m == Method::incomes) {
      s.memory_bytes = pool_bytes_formula(n, student->config);
    } else if (m == Method::icl) {
      std::vector<const EditRecord*> edits;
      for (const auto& e : cases[0].edits) edits.push_back(&e);
      s.memory_bytes = context_prefix(edits).size() * cfg.n_layers * cfg.n_heads * 2 * cfg.head_dim() * 4;
    }
  }
  return run;
}

/// Every requested method on one case set.
template <class T>
EvalReport evaluate(const ModelState<T>* student, const ModelState<T>& base, const std::vector<BenchmarkCase>& cases,
                    const EvalOptions& opt, GistCache<T>* cache = nullptr) {
  EvalReport rep;
  // group by (label, pool size) so each row is one condition
  std::map<std::pair<std::string, std::size_t>, std::vector<BenchmarkCase>> groups;
  for (const auto& c : cases) groups[{c.label(), c.edits.size()}].push_back(c);
  for (auto& [key, group] : groups) {
    auto gold = base_answers(base, group, opt.parallelism);
    for (Method m : opt.methods) rep.rows.push_back(evaluate_method(m, student, base, group, gold, opt, cache).summary);
  }
  return rep;
}

/// Recall success per method across pool sizes (fresh cases per size).
template <class T>
EvalReport scaling_sweep(const ModelState<T>& student, const ModelState<T>& base, const SynthWorld& world,
                         const std::vector<std::size_t>& pool_sizes, std::size_t n_cases, std::uint64_t seed,
                         const EvalOptions& opt) {
  EvalReport rep;
  GistCache<T> cache(student);
  for (std::size_t ps : pool_sizes) {
    CaseSpec spec;
    spec.kind = CaseKind::recall;
    spec.n_cases = n_cases;
    spec.pool_size = ps;
    spec.seed = seed;
    auto cases = gen_cases(world, spec);
    auto part = evaluate(&student, base, cases, opt, &cache);
    rep.rows.insert(rep.rows.end(), part.rows.begin(), part.rows.end());
  }
  return rep;
}

// ---- efficiency ----

struct EfficiencyReport {
  std::size_t n_edits = 0, total_prefix_tokens = 0;
  double compress_median_s = 0, concat_median_s = 0;
  std::vector<double> compress_runs, concat_runs;
  std::size_t gist_bytes = 0, serialized_payload_bytes = 0, icl_kv_bytes = 0;
  double memory_ratio = 0, ratio_closed_form = 0;

  nlohmann::json to_json() const {
    return {{"n_edits", n_edits},
            {"total_prefix_tokens", total_prefix_tokens},
            {"compress_median_s", compress_median_s},
            {"concat_median_s", concat_median_s},
            {"compress_runs", compress_runs},
            {"concat_runs", concat_runs},
            {"gist_bytes", gist_bytes},
            {"serialized_payload_bytes", serialized_payload_bytes},
            {"icl_kv_bytes", icl_kv_bytes},
            {"memory_ratio", memory_ratio},
            {"ratio_closed_form", ratio_closed_form}};
  }
};

inline double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Times (a) compressing every edit separately and (b) one forward over all
/// edits as a single text prefix, on one worker. Warmup runs are dropped.
template <class T>
EfficiencyReport efficiency_bench(const ModelState<T>& student, const std::vector<EditRecord>& edits, std::size_t repeats,
                                  std::size_t warmup = 1) {
  const ModelConfig& cfg = student.config;
  EfficiencyReport r;
  r.n_edits = edits.size();
  std::vector<const EditRecord*> ptrs;
  for (const auto& e : edits) ptrs.push_back(&e);
  const std::vector<int> prefix = context_prefix(ptrs);
  r.total_prefix_tokens = prefix.size();
  ModelState<T> base = student;
  base.cross.clear();
  if (prefix.size() > cfg.max_seq_len) base.config.max_seq_len = prefix.size();  // timing only
  using clock = std::chrono::steady_clock;
  GistPool<T> pool;
  for (std::size_t i = 0; i < warmup + repeats; ++i) {
    auto t0 = clock::now();
    auto entries = compress_batch(student, edits, 1);
    auto t1 = clock::now();
    auto logits = forward_base(base, prefix);
    auto t2 = clock::now();
    if (i >= warmup) {
      r.compress_runs.push_back(std::chrono::duration<double>(t1 - t0).count());
      r.concat_runs.push_back(std::chrono::duration<double>(t2 - t1).count());
    }
    if (i + 1 == warmup + repeats) pool = GistPool<T>::build(std::move(entries));
  }
  r.compress_median_s = median(r.compress_runs);
  r.concat_median_s = median(r.concat_runs);
  r.gist_bytes = pool_bytes_formula(edits.size(), cfg);
  r.serialized_payload_bytes = pool.payload_bytes();
  r.icl_kv_bytes = r.total_prefix_tokens * cfg.n_layers * cfg.n_heads * 2 * cfg.head_dim() * 4;
  r.memory_ratio = static_cast<double>(r.icl_kv_bytes) / static_cast<double>(r.gist_bytes);
  r.ratio_closed_form = (static_cast<double>(r.total_prefix_tokens) / static_cast<double>(edits.size())) *
                        (static_cast<double>(cfg.n_layers) / static_cast<double>(cfg.cross_layers.size()));
  return r;
}

}  // namespace incomes
