// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "moekit/mjpk.hpp"
#include "test_util.hpp"

using namespace moekit;

namespace {

namespace fs = std::filesystem;

class StoreTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("moekit_store_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

DenseCheckpoint random_checkpoint(std::uint64_t seed, CheckpointMeta meta = {}) {
  Rng rng(seed);
  DenseCheckpoint ckpt;
  ckpt.meta = meta;
  for (const auto& [name, shape] : implied_tensors(meta)) {
    ckpt.tensors.emplace(name, Tensor::randn(shape, rng, 0.5));
  }
  return ckpt;
}

std::vector<std::uint8_t> read_bytes(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

ActivationProfile sample_profile() {
  ActivationProfile p;
  p.n_layers = 2;
  p.channels = 3;
  p.hidden = 4;
  p.n_tokens = 100;
  p.channel_mean_abs = {{0.5, 0.25, 1.0}, {0.0, 2.0, 0.125}};
  p.neuron_mean_abs = {{1, 2, 3, 4}, {0.5, 0, 0.25, 8}};
  p.coactivation = {{{0, 2, 40}, {1, 3, 7}}, {}};
  return p;
}

MoEInitBundle sample_bundle(std::uint64_t seed) {
  Rng rng(seed);
  MoEInitBundle b;
  b.meta.n_layers = 2;
  b.meta.d_prime = 4;
  b.meta.n_heads = 2;
  b.meta.patch_size = 4;
  b.meta.image_size = 8;
  b.meta.n_classes = 3;
  b.meta.moe_from = 2;
  b.meta.moe_to = 2;
  b.meta.e_core = 2;
  b.meta.e_univ = 1;
  b.meta.slots = 1;
  b.meta.h_core = 4;
  b.meta.h_univ = 2;
  b.meta.strategy = "random";
  b.meta.seed = seed;
  b.meta.source_d = 8;
  b.meta.source_hidden = 32;
  b.channels = {0, 2, 5, 7};
  b.dense_tensors.emplace("patch_embed.w", Tensor::randn({4, 48}, rng));
  b.dense_tensors.emplace("blocks.1.ln2.gamma", Tensor::randn({4}, rng));
  ExpertStackInit core{Tensor::randn({2, 4, 4}, rng), Tensor::randn({2, 4}, rng),
                       Tensor::randn({2, 4, 4}, rng), Tensor::randn({2, 4}, rng)};
  ExpertStackInit univ{Tensor::randn({1, 2, 4}, rng), Tensor::randn({1, 2}, rng),
                       Tensor::randn({1, 4, 2}, rng), Tensor::randn({1, 4}, rng)};
  b.core_stacks.push_back(core);
  b.univ_stacks.push_back(univ);
  b.provenance.push_back({1, "random", {{3, 9, 12, 30}, {0, 1, 2, 4}}, {{5, 6}}});
  return b;
}

}  // namespace

TEST_F(StoreTest, CheckpointRoundTripIsBitExact) {
  const DenseCheckpoint ckpt = random_checkpoint(99, CheckpointMeta{2, 8, 32, 2, 4, 8, 5});
  save_checkpoint(path("a.mjpk"), ckpt);
  const DenseCheckpoint loaded = load_checkpoint(path("a.mjpk"));
  EXPECT_EQ(loaded.meta, ckpt.meta);
  ASSERT_EQ(loaded.tensors.size(), ckpt.tensors.size());
  for (const auto& [name, t] : ckpt.tensors) {
    const Tensor& l = loaded.tensors.at(name);
    ASSERT_EQ(l.shape, t.shape);
    EXPECT_EQ(std::memcmp(l.ptr(), t.ptr(), t.data.size() * sizeof(float)), 0) << name;
  }
  save_checkpoint(path("b.mjpk"), loaded);
  EXPECT_EQ(read_bytes(path("a.mjpk")), read_bytes(path("b.mjpk")));
}

TEST_F(StoreTest, SavingTwiceIsDeterministic) {
  const MoEInitBundle b = sample_bundle(5);
  save_bundle(path("x.mjpk"), b);
  save_bundle(path("y.mjpk"), b);
  EXPECT_EQ(read_bytes(path("x.mjpk")), read_bytes(path("y.mjpk")));
}

TEST_F(StoreTest, WrongMagicIsRejected) {
  auto bytes = std::vector<std::uint8_t>{'N', 'O', 'P', 'E', 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  write_bytes(path("bad.mjpk"), bytes);
  EXPECT_ERR(Err::BadMagic, load_archive(path("bad.mjpk")));
}

TEST_F(StoreTest, VersionMismatchIsRejected) {
  const DenseCheckpoint ckpt = random_checkpoint(1, CheckpointMeta{1, 4, 16, 1, 4, 4, 2});
  save_checkpoint(path("v.mjpk"), ckpt);
  auto bytes = read_bytes(path("v.mjpk"));
  bytes[4] = 9;
  write_bytes(path("v.mjpk"), bytes);
  EXPECT_ERR(Err::VersionMismatch, load_archive(path("v.mjpk")));
}

TEST_F(StoreTest, ShapeMetaConflictIsRejected) {
  const std::string header =
      R"({"meta":{"kind":"x"},"tensors":{"t":{"dtype":"f32","shape":[2,3],"offset":0,"bytes":20}}})";
  std::vector<std::uint8_t> bytes = {'M', 'J', 'P', 'K', 1, 0, 0, 0};
  const std::uint64_t hlen = header.size();
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(hlen >> (8 * i)));
  bytes.insert(bytes.end(), header.begin(), header.end());
  bytes.insert(bytes.end(), 20, 0);
  write_bytes(path("conflict.mjpk"), bytes);
  EXPECT_ERR(Err::ShapeMetaConflict, load_archive(path("conflict.mjpk")));
}

TEST_F(StoreTest, TruncationsErrorButNeverCrash) {
  const DenseCheckpoint ckpt = random_checkpoint(7, CheckpointMeta{1, 4, 16, 1, 4, 4, 2});
  save_checkpoint(path("full.mjpk"), ckpt);
  const auto full = read_bytes(path("full.mjpk"));
  for (std::size_t len = 0; len < full.size(); len += 13) {
    write_bytes(path("cut.mjpk"), {full.begin(), full.begin() + static_cast<long>(len)});
    EXPECT_THROW(load_archive(path("cut.mjpk")), Error) << "length " << len;
  }
}

TEST_F(StoreTest, ByteFlipsNeverCrash) {
  const DenseCheckpoint ckpt = random_checkpoint(8, CheckpointMeta{1, 4, 16, 1, 4, 4, 2});
  save_checkpoint(path("full.mjpk"), ckpt);
  const auto full = read_bytes(path("full.mjpk"));
  Rng rng(123);
  for (int trial = 0; trial < 200; ++trial) {
    auto mutated = full;
    const std::size_t pos = rng.below(mutated.size());
    mutated[pos] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    write_bytes(path("mut.mjpk"), mutated);
    try {
      (void)load_checkpoint(path("mut.mjpk"));
    } catch (const Error&) {
      // rejected corruption is fine; crashing is not
    }
  }
}

TEST_F(StoreTest, ProfileRoundTripsLosslessly) {
  const ActivationProfile p = sample_profile();
  save_profile(path("p.mjpk"), p);
  const ActivationProfile q = load_profile(path("p.mjpk"));
  EXPECT_EQ(q.n_layers, p.n_layers);
  EXPECT_EQ(q.n_tokens, p.n_tokens);
  EXPECT_EQ(q.channel_mean_abs, p.channel_mean_abs);
  EXPECT_EQ(q.neuron_mean_abs, p.neuron_mean_abs);
  ASSERT_EQ(q.coactivation.size(), p.coactivation.size());
  for (std::size_t i = 0; i < p.coactivation.size(); ++i) {
    ASSERT_EQ(q.coactivation[i].size(), p.coactivation[i].size());
    for (std::size_t j = 0; j < p.coactivation[i].size(); ++j) {
      EXPECT_EQ(q.coactivation[i][j].a, p.coactivation[i][j].a);
      EXPECT_EQ(q.coactivation[i][j].b, p.coactivation[i][j].b);
      EXPECT_EQ(q.coactivation[i][j].count, p.coactivation[i][j].count);
    }
  }
}

TEST_F(StoreTest, BundleRoundTripsBitExact) {
  const MoEInitBundle b = sample_bundle(77);
  save_bundle(path("b.mjpk"), b);
  const MoEInitBundle l = load_bundle(path("b.mjpk"));
  EXPECT_EQ(l.meta, b.meta);
  EXPECT_EQ(l.channels, b.channels);
  ASSERT_EQ(l.provenance.size(), b.provenance.size());
  EXPECT_EQ(l.provenance[0].core_neurons, b.provenance[0].core_neurons);
  EXPECT_EQ(l.provenance[0].univ_neurons, b.provenance[0].univ_neurons);
  EXPECT_EQ(l.dense_tensors.at("patch_embed.w").data, b.dense_tensors.at("patch_embed.w").data);
  EXPECT_EQ(l.core_stacks[0].w1.data, b.core_stacks[0].w1.data);
  EXPECT_EQ(l.univ_stacks[0].w2.data, b.univ_stacks[0].w2.data);
}

TEST_F(StoreTest, MissingTensorIsMetaConflict) {
  DenseCheckpoint ckpt = random_checkpoint(3, CheckpointMeta{1, 4, 16, 1, 4, 4, 2});
  ckpt.tensors.erase("head.b");
  EXPECT_ERR(Err::MetaConflict, save_checkpoint(path("m.mjpk"), ckpt));
}
