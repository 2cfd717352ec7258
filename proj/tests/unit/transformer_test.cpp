#include <gtest/gtest.h>

#include <filesystem>

#include "incomes/gist/compress.hpp"
#include "incomes/model/checkpoint.hpp"
#include "incomes/model/forward.hpp"

using namespace incomes;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab_size = 32;
  c.gist_token_id = 31;
  c.cross_layers = {1};
  c.max_seq_len = 64;
  return c;
}

std::vector<int> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.below(vocab - 1));
  return t;
}

template <class T>
void randomize_cross(ModelState<T>& s, Rng& rng) {
  for (auto& c : s.cross) {
    for (auto& x : c.wo.value.vec()) x = static_cast<T>(rng.normal(0, 0.3));
    for (auto& x : c.wq.value.vec()) x = static_cast<T>(rng.normal(0, 0.3));
  }
}

template <class T>
GistPool<T> random_pool(const ModelState<T>& s, Rng& rng, std::size_t n) {
  std::vector<EditRecord> edits;
  for (std::size_t i = 0; i < n; ++i)
    edits.push_back({static_cast<std::int64_t>(i), random_tokens(rng, 5 + rng.below(6), s.config.vocab_size), EditKind::fact_triple});
  return GistPool<T>::build(compress_batch(s, edits));
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST(Extend, ZeroInitIdentityOverSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto base = ModelState<float>::init(ModelConfig{}, rng);
    auto ext = extend_model(base, rng);
    auto pool = random_pool(ext, rng, 1 + rng.below(16));
    auto tokens = random_tokens(rng, 20, 511);
    auto a = forward_base(base, tokens).first;
    auto b = forward_with_pool(ext, tokens, pool, 0.45f).first;
    EXPECT_LE(max_abs_diff(a, b), 1e-6) << "seed " << seed;
  }
}

TEST(Extend, CrossQueryStartsAsSelfQueryAndOutputAtZero) {
  Rng rng(4);
  auto base = ModelState<float>::init(ModelConfig{}, rng);
  auto ext = extend_model(base, rng);
  ASSERT_EQ(ext.cross.size(), 2u);
  EXPECT_EQ(ext.cross[0].wq.value, base.layers[2].wq.value);
  for (float x : ext.cross[1].wo.value.vec()) EXPECT_EQ(x, 0.0f);
  for (float x : ext.cross[1].zero_value.vec()) EXPECT_EQ(x, 0.0f);
  EXPECT_THROW(extend_model(ext, rng), ContractError);
}

TEST(Extend, NoZeroGistMakesZeroKeyFrozen) {
  Rng rng(5);
  ModelConfig c = tiny_config();
  c.zero_gist = false;
  auto ext = extend_model(ModelState<float>::init(c, rng), rng);
  EXPECT_FALSE(ext.cross[0].zero_key.trainable);
}

TEST(Forward, ZeroPoolIdentityForTrainedLikeWeights) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(100 + seed);
    auto base = ModelState<float>::init(ModelConfig{}, rng);
    auto ext = extend_model(base, rng);
    randomize_cross(ext, rng);
    for (auto& x : ext.cross[0].zero_key.value.vec()) x = static_cast<float>(rng.normal(0, 3));
    auto tokens = random_tokens(rng, 17, 511);
    auto a = forward_base(base, tokens).first;
    auto b = forward_with_pool(ext, tokens, GistPool<float>{}, 0.45f);
    EXPECT_LE(max_abs_diff(a, b.first), 1e-6);
    for (std::size_t s = 0; s < b.second.n_slots(); ++s)
      for (std::size_t t = 0; t < b.second.n_tokens(); ++t) EXPECT_EQ(b.second.zero_gist_prob(s, t), 1.0f);
  }
}

TEST(Forward, EmptyPoolWithoutZeroGistIsRejected) {
  Rng rng(6);
  ModelConfig c = tiny_config();
  c.zero_gist = false;
  auto ext = extend_model(ModelState<float>::init(c, rng), rng);
  EXPECT_THROW(forward_with_pool(ext, {1, 2, 3}, GistPool<float>{}, 1.0f), ContractError);
}

TEST(Forward, CausalMaskIgnoresFutureTokens) {
  Rng rng(7);
  auto s = extend_model(ModelState<double>::init(tiny_config(), rng), rng);
  randomize_cross(s, rng);
  auto pool = random_pool(s, rng, 4);
  auto t1 = random_tokens(rng, 12, 32);
  auto t2 = t1;
  t2[8] = (t2[8] + 5) % 30;
  auto a = forward_with_pool(s, t1, pool, 0.45).first;
  auto b = forward_with_pool(s, t2, pool, 0.45).first;
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(a.at(r, j), b.at(r, j));
  bool changed = false;
  for (std::size_t j = 0; j < 32; ++j) changed = changed || a.at(8, j) != b.at(8, j);
  EXPECT_TRUE(changed);
}

TEST(Forward, PackedSequencesMatchSingleRunsBitwise) {
  Rng rng(8);
  auto s = ModelState<float>::init(tiny_config(), rng);
  std::vector<std::vector<int>> seqs{random_tokens(rng, 7, 32), random_tokens(rng, 13, 32), random_tokens(rng, 3, 32)};
  auto packed = forward_packed(s, seqs);
  for (std::size_t i = 0; i < seqs.size(); ++i) EXPECT_EQ(packed[i], forward_base(s, seqs[i]).first);
}

TEST(Forward, PoolOrderDoesNotMatter) {
  Rng rng(9);
  auto s = extend_model(ModelState<double>::init(tiny_config(), rng), rng);
  randomize_cross(s, rng);
  auto pool = random_pool(s, rng, 6);
  auto tokens = random_tokens(rng, 10, 32);
  auto a = forward_with_pool(s, tokens, pool, 0.45).first;
  auto b = forward_with_pool(s, tokens, pool.subset({5, 3, 1, 0, 2, 4}), 0.45).first;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Forward, ProbeDistributionsSumToOne) {
  Rng rng(10);
  auto s = extend_model(ModelState<double>::init(tiny_config(), rng), rng);
  randomize_cross(s, rng);
  auto pool = random_pool(s, rng, 5);
  auto probe = forward_with_pool(s, random_tokens(rng, 9, 32), pool, 0.45).second;
  EXPECT_EQ(probe.n_entries(), 6u);
  for (std::size_t t = 0; t < probe.n_tokens(); ++t)
    for (std::size_t h = 0; h < probe.n_heads(); ++h) {
      double z = 0;
      for (double p : probe.distribution(0, t, h)) z += p;
      EXPECT_NEAR(z, 1.0, 1e-6);
    }
}

TEST(Forward, RejectsBadInputs) {
  Rng rng(11);
  auto base = ModelState<float>::init(tiny_config(), rng);
  EXPECT_THROW(forward_base(base, {1, 40}), IndexError);
  EXPECT_THROW(forward_base(base, std::vector<int>(65, 1)), CapacityError);
  EXPECT_THROW(forward_with_pool(base, {1, 2}, GistPool<float>{}, 1.0f), ContractError);
  auto ext = extend_model(base, rng);
  EXPECT_THROW(forward_with_pool(ext, {1, 2}, GistPool<float>{}, 0.0f), ParameterError);
}

TEST(Forward, CacheHoldsKeysBeforeRotation) {
  Rng rng(12);
  auto s = ModelState<double>::init(tiny_config(), rng);
  auto tokens = random_tokens(rng, 6, 32);
  auto cache = forward_base(s, tokens).second;
  ASSERT_EQ(cache.keys.size(), 2u);
  EXPECT_EQ(cache.seq_len(), 6u);
  // key = rms_norm(embedding) * wk for layer 0
  const auto& emb = s.tok_emb.value;
  const std::size_t d = 16;
  std::vector<double> xn(d);
  double ms = 0;
  for (std::size_t j = 0; j < d; ++j) ms += emb.at(tokens[3], j) * emb.at(tokens[3], j);
  const double inv = 1.0 / std::sqrt(ms / d + 1e-5);
  for (std::size_t j = 0; j < d; ++j) xn[j] = emb.at(tokens[3], j) * inv;
  auto k = cache.key(0, 1, 3);
  for (std::size_t j = 0; j < k.size(); ++j) {
    double ref = 0;
    for (std::size_t p = 0; p < d; ++p) ref += xn[p] * s.layers[0].wk.value.at(p, 8 + j);
    EXPECT_NEAR(k[j], ref, 1e-12);
  }
}

TEST(Forward, GreedyDecodeIsDeterministic) {
  Rng rng(13);
  auto s = ModelState<float>::init(tiny_config(), rng);
  auto a = greedy_decode(s, {1, 2, 3}, 5);
  EXPECT_EQ(a.size(), 5u);
  EXPECT_EQ(a, greedy_decode(s, {1, 2, 3}, 5));
}

TEST(Config, JsonRoundTripAndNamedErrors) {
  ModelConfig c = tiny_config();
  c.canonical_gist_position = 3;
  EXPECT_EQ(ModelConfig::from_json(c.to_json()).to_json(), c.to_json());
  auto j = c.to_json();
  j["cross_layers"] = "all";
  EXPECT_EQ(ModelConfig::from_json(j).cross_layers, (std::vector<int>{0, 1}));
  j["n_heads"] = 3;
  try {
    ModelConfig::from_json(j);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("n_heads"), std::string::npos);
  }
  j = c.to_json();
  j["cross_layers"] = "most";
  EXPECT_THROW(ModelConfig::from_json(j), ContractError);
  j["cross_layers"] = {1, 5};
  EXPECT_THROW(ModelConfig::from_json(j), ContractError);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  Rng rng(14);
  auto s = extend_model(ModelState<float>::init(tiny_config(), rng), rng);
  randomize_cross(s, rng);
  const auto path = std::filesystem::temp_directory_path() / "incomes_ckpt_test.bin";
  save_checkpoint(s, path);
  auto r = load_checkpoint<float>(path);
  EXPECT_EQ(r.config.to_json(), s.config.to_json());
  auto a = s.named_parameters();
  auto b = r.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second->value, b[i].second->value);
    EXPECT_EQ(a[i].second->trainable, b[i].second->trainable);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "incomes_ckpt_bad.bin";
  {
    std::ofstream os(path, std::ios::binary);
    os << "nope";
  }
  EXPECT_THROW(load_checkpoint<float>(path), FormatError);
  std::filesystem::remove(path);
}

TEST(State, CastPreservesValues) {
  Rng rng(15);
  auto s = extend_model(ModelState<float>::init(tiny_config(), rng), rng);
  auto d = s.cast<double>();
  auto tokens = random_tokens(rng, 8, 32);
  auto a = forward_base(s, tokens).first;
  auto b = forward_base(d, tokens).first;
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4);
}
