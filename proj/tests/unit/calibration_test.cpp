#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "incomes/calib/calibration.hpp"

using namespace incomes;

namespace {

SynthWorld small_world() {
  WorldSpec ws;
  ws.seed = 3;
  ws.vocab_size = 160;
  ws.n_relations = 6;
  ws.density = 0.5;
  ws.n_chains = 10;
  ws.n_singles = 60;
  return gen_world(ws);
}

ModelState<double> small_model(std::uint64_t seed, bool zero_gist = true) {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab_size = 160;
  c.gist_token_id = 159;
  c.cross_layers = {1, 2};
  c.zero_gist = zero_gist;
  Rng rng(seed);
  auto s = extend_model(ModelState<double>::init(c, rng), rng);
  for (auto& cw : s.cross) {
    for (auto& x : cw.wq.value.vec()) x = rng.normal(0, 0.5);
    for (auto& x : cw.wo.value.vec()) x = rng.normal(0, 0.3);
  }
  return s;
}

}  // namespace

TEST(ProbeSet, NestedDistractorsAvoidTheProbedSubject) {
  auto w = small_world();
  auto probes = make_probe_set(w, 20, 8, 1);
  ASSERT_EQ(probes.size(), 20u);
  for (const auto& p : probes) {
    EXPECT_EQ(p.distractors.size(), 8u);
    for (const auto& d : p.distractors) EXPECT_NE(d.tokens, p.edit.tokens);
  }
  auto again = make_probe_set(w, 20, 8, 1);
  EXPECT_EQ(again[7].edit.tokens, probes[7].edit.tokens);
  EXPECT_EQ(self_copy_input(probes[0].edit).size(), 2 * probes[0].edit.tokens.size());
}

TEST(Entropy, SingleEditPoolIsAtMostLn2) {
  auto w = small_world();
  auto m = small_model(1);
  auto s = collect_scores(m, make_probe_set(w, 10, 4, 2), 1);
  EXPECT_EQ(s.n_entries, 2u);
  for (std::size_t sl = 0; sl < 2; ++sl) EXPECT_LE(mean_entropy(s, sl, 1.0).first, std::log(2.0) + 1e-12);
}

TEST(Entropy, RescaledScoresMatchAttentionAtThatTemperature) {
  auto w = small_world();
  auto probes = make_probe_set(w, 3, 6, 3);
  // the first cross layer sees T = 1 inputs either way; the second one does
  // only when the first layer's cross output is switched off
  for (std::size_t slot : {0, 1}) {
    auto m = small_model(2);
    if (slot == 1)
      for (auto& x : m.cross[0].wo.value.vec()) x = 0;
    auto s = collect_scores(m, probes, 5);
    for (double T : {0.3, 0.45, 2.0}) {
      double h = 0;
      std::size_t n = 0;
      GistCache<double> cache(m);
      for (const auto& p : probes) {
        std::vector<EditRecord> edits{p.edit};
        edits.insert(edits.end(), p.distractors.begin(), p.distractors.begin() + 4);
        auto probe = forward_with_pool(m, self_copy_input(p.edit), cache.pool_for(edits), T).second;
        for (std::size_t t = 0; t < probe.n_tokens(); ++t)
          for (std::size_t hd = 0; hd < probe.n_heads(); ++hd, ++n) h += entropy(probe.distribution(slot, t, hd));
      }
      EXPECT_NEAR(mean_entropy(s, slot, T).first, h / static_cast<double>(n), 1e-9) << "slot " << slot << " T=" << T;
    }
  }
}

TEST(Entropy, IncreasesWithTemperatureAndDerivativeMatches) {
  auto w = small_world();
  auto m = small_model(3);
  auto s = collect_scores(m, make_probe_set(w, 6, 10, 4), 11);
  double prev = -1;
  for (double T = 0.05; T < 20; T *= 1.5) {
    auto [h, dh] = mean_entropy(s, 0, T);
    EXPECT_GT(h, prev);
    EXPECT_GE(dh, 0.0);
    prev = h;
    const double eps = 1e-5;
    const double num = (mean_entropy(s, 0, T * std::exp(eps)).first - mean_entropy(s, 0, T * std::exp(-eps)).first) / (2 * eps);
    EXPECT_NEAR(dh, num, 1e-5 * std::max(1.0, std::abs(num)));
  }
  EXPECT_LE(mean_entropy(s, 0, 1e3).first, std::log(12.0) + 1e-9);
}

TEST(Calibration, PoolOfOneKeepsUnitTemperature) {
  auto w = small_world();
  auto m = small_model(4);
  auto rows = calibrate_temperature(m, make_probe_set(w, 8, 4, 5), {1});
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.temperature, 1.0);
    EXPECT_TRUE(r.converged);
    EXPECT_EQ(r.iterations, 0u);
  }
}

TEST(Calibration, ObjectiveNeverIncreasesAndLargerPoolsCoolDown) {
  auto w = small_world();
  auto m = small_model(5);
  auto probes = make_probe_set(w, 8, 31, 6);
  auto rows = calibrate_temperature(m, probes, {8, 32});
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& r : rows) {
    for (std::size_t i = 1; i < r.objective_trace.size(); ++i) EXPECT_LE(r.objective_trace[i], r.objective_trace[i - 1]);
    EXPECT_GT(r.temperature, 0.0);
    if (r.converged) EXPECT_NEAR(r.achieved_entropy, r.reference_entropy, 1e-2);
    // more entries spread mass, so matching the single-edit entropy needs T < 1
    EXPECT_LT(r.temperature, 1.0);
  }
  EXPECT_EQ(rows[0].pool_size, 8u);
  EXPECT_EQ(rows[1].layer, 2);
  std::ostringstream os;
  write_calibration_tsv(rows, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "pool_size\tlayer\tfitted_T\treference_entropy\tachieved_entropy\tconverged\titerations");
  std::size_t n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, 4u);
}

TEST(Calibration, FitterReachesAKnownTarget) {
  ScoreSet s;
  s.n_entries = 3;
  s.per_slot = {{0.0, -1.0, -2.0, 0.0, -0.5, -3.0}};
  const double target = mean_entropy(s, 0, 0.37).first;
  auto r = fit_temperature(s, 0, target, CalibrationOptions{0.05, 500, 1e-12});
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.temperature, 0.37, 1e-4);
}

TEST(Probe, TraceValuesAreDistributions) {
  auto w = small_world();
  auto m = small_model(6);
  auto p = make_probe_set(w, 1, 7, 7)[0];
  std::vector<EditRecord> edits{p.edit};
  edits.insert(edits.end(), p.distractors.begin(), p.distractors.end());
  GistCache<double> cache(m);
  auto pool = cache.pool_for(edits);
  auto tr = probe_run(m, pool, self_copy_input(p.edit), std::optional<std::size_t>(0), 0.45, "full");
  ASSERT_EQ(tr.points.size(), 2 * p.edit.tokens.size());
  for (const auto& pt : tr.points) {
    EXPECT_GE(pt.zero_gist_prob, 0.0);
    EXPECT_LE(pt.zero_gist_prob + pt.golden_prob, 1.0 + 1e-9);
    EXPECT_LE(pt.entropy, std::log(9.0) + 1e-9);
    EXPECT_EQ(pt.layer_entropy.size(), 2u);
  }
  auto none = probe_run(m, pool, self_copy_input(p.edit), std::nullopt, 0.45);
  for (const auto& pt : none.points) EXPECT_EQ(pt.golden_prob, 0.0);
  auto means = layer_zero_gist_means({tr});
  ASSERT_EQ(means.size(), 2u);
  std::ostringstream os;
  write_probe_header(os);
  write_probe_tsv(tr, os);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "position\tzero_gist_prob\tgolden_prob\tentropy\trun_tag");
  auto no_zg = small_model(6, false);
  auto tr2 = probe_run(no_zg, GistCache<double>(no_zg).pool_for(edits), p.edit.tokens, std::optional<std::size_t>(0), 0.45);
  for (const auto& pt : tr2.points) EXPECT_EQ(pt.zero_gist_prob, 0.0);
}

TEST(Calibration, RejectsBadInputs) {
  auto w = small_world();
  auto m = small_model(7);
  EXPECT_THROW(collect_scores(m, {}, 1), ContractError);
  EXPECT_THROW(collect_scores(m, make_probe_set(w, 2, 3, 1), 0), ContractError);
  EXPECT_THROW(collect_scores(m, make_probe_set(w, 2, 3, 1), 5), ContractError);
}
