#include <gtest/gtest.h>

#include <filesystem>

#include "incomes/gist/compress.hpp"

using namespace incomes;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab_size = 40;
  c.gist_token_id = 39;
  c.cross_layers = {1, 2};
  c.max_seq_len = 32;
  return c;
}

std::vector<EditRecord> random_edits(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<EditRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    EditRecord e;
    e.edit_id = static_cast<std::int64_t>(1000 + i);
    e.tokens.resize(8 + rng.below(8));
    for (auto& t : e.tokens) t = static_cast<int>(rng.below(vocab - 1));
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

TEST(Compress, ParallelMatchesSequentialBitwise) {
  Rng rng(1);
  auto s = extend_model(ModelState<float>::init(ModelConfig{}, rng), rng);
  auto edits = random_edits(rng, 100, 511);
  auto par = compress_batch(s, edits, 8);
  ASSERT_EQ(par.size(), 100u);
  for (std::size_t i = 0; i < edits.size(); ++i) {
    EXPECT_EQ(par[i], compress_edit(s, edits[i])) << "edit " << i;
    EXPECT_EQ(par[i].edit_id, edits[i].edit_id);
  }
}

TEST(Compress, PackedGraphMatchesPerEdit) {
  Rng rng(2);
  auto s = extend_model(ModelState<float>::init(small_config(), rng), rng);
  auto edits = random_edits(rng, 5, 40);
  Graph<float> g(false);
  auto gp = compress_in_graph(g, s, edits);
  for (std::size_t i = 0; i < edits.size(); ++i) {
    auto e = compress_edit(s, edits[i]);
    for (std::size_t sl = 0; sl < 2; ++sl) {
      auto k = gp.keys[sl]->value().row(i);
      auto v = gp.values[sl]->value().row(i);
      EXPECT_TRUE(std::equal(k.begin(), k.end(), e.key(sl).begin()));
      EXPECT_TRUE(std::equal(v.begin(), v.end(), e.value(sl).begin()));
    }
  }
}

TEST(Compress, GistEntryIsTheCachedKeyValueAtTheGistPosition) {
  Rng rng(3);
  auto s = extend_model(ModelState<double>::init(small_config(), rng), rng);
  auto edit = random_edits(rng, 1, 40)[0];
  auto entry = compress_edit(s, edit);
  auto tokens = edit.tokens;
  tokens.push_back(39);
  ModelState<double> base = s;
  base.cross.clear();
  auto cache = forward_base(base, tokens).second;
  const std::size_t last = tokens.size() - 1;
  for (std::size_t sl = 0; sl < 2; ++sl) {
    const std::size_t layer = static_cast<std::size_t>(s.config.cross_layers[sl]);
    for (std::size_t h = 0; h < 2; ++h) {
      auto k = cache.key(layer, h, last);
      auto v = cache.value(layer, h, last);
      for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_EQ(entry.key(sl)[h * 8 + j], k[j]);
        EXPECT_EQ(entry.value(sl)[h * 8 + j], v[j]);
      }
    }
  }
}

TEST(Compress, NamesTheOffendingEdit) {
  Rng rng(4);
  auto s = extend_model(ModelState<float>::init(small_config(), rng), rng);
  EditRecord bad{77, {1, 2, 39, 4}, EditKind::fact_triple};
  try {
    compress_edit(s, bad);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("77"), std::string::npos);
  }
  EXPECT_THROW(compress_edit(s, EditRecord{5, {}, EditKind::fact_triple}), ContractError);
  EXPECT_THROW(compress_edit(s, EditRecord{6, std::vector<int>(32, 1), EditKind::fact_triple}), CapacityError);
  EXPECT_NO_THROW(compress_edit(s, EditRecord{7, std::vector<int>(31, 1), EditKind::fact_triple}));
  std::vector<EditRecord> batch = random_edits(rng, 10, 39);
  batch[6] = bad;
  EXPECT_THROW(compress_batch(s, batch, 4), ContractError);
}

TEST(Pool, DuplicateIdsRejected) {
  GistEntry<float> a(1, 2, 4), b(1, 2, 4);
  EXPECT_THROW(GistPool<float>::build({a, b}), ContractError);
}

TEST(Pool, BytesMatchClosedForm) {
  Rng rng(5);
  auto s = extend_model(ModelState<float>::init(ModelConfig{}, rng), rng);
  auto pool = GistPool<float>::build(compress_batch(s, random_edits(rng, 37, 511)));
  EXPECT_EQ(pool.payload_bytes(), pool_bytes_formula(37, s.config));
  EXPECT_EQ(pool_bytes_formula(37, s.config), 37u * 2 * 4 * 2 * 16 * 4);
  const auto path = std::filesystem::temp_directory_path() / "incomes_pool_bytes.bin";
  save_pool(pool, s.config, path);
  const std::size_t header = 4 + 4 + 8 + 8, per_entry_id = 8;
  EXPECT_EQ(std::filesystem::file_size(path), header + 37 * per_entry_id + pool_bytes_formula(37, s.config));
  std::filesystem::remove(path);
}

TEST(Pool, SaveLoadRoundTripAndFingerprint) {
  Rng rng(6);
  auto s = extend_model(ModelState<float>::init(small_config(), rng), rng);
  auto pool = GistPool<float>::build(compress_batch(s, random_edits(rng, 9, 40)));
  const auto path = std::filesystem::temp_directory_path() / "incomes_pool_rt.bin";
  save_pool(pool, s.config, path);
  EXPECT_EQ(load_pool<float>(path, s.config), pool);
  ModelConfig other = s.config;
  other.cross_layers = {2};
  EXPECT_THROW(load_pool<float>(path, other), ContractError);
  {
    std::ofstream os(path, std::ios::binary);
    os << "XXXX";
  }
  EXPECT_THROW(load_pool<float>(path, s.config), FormatError);
  std::filesystem::remove(path);
}

TEST(Pool, SubsetKeepsOrderAndStacks) {
  GistEntry<float> a(1, 1, 2), b(2, 1, 2);
  a.payload = {1, 2, 3, 4};
  b.payload = {5, 6, 7, 8};
  auto p = GistPool<float>::build({a, b});
  auto q = p.subset({1, 0});
  EXPECT_EQ(q[0].edit_id, 2);
  EXPECT_EQ(q.stacked(0, false), Tensor<float>({2, 2}, {5, 6, 1, 2}));
  EXPECT_EQ(q.stacked(0, true), Tensor<float>({2, 2}, {7, 8, 3, 4}));
}
