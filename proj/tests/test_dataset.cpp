// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "moekit/dataset.hpp"
#include "test_util.hpp"

using namespace moekit;

namespace {
namespace fs = std::filesystem;
}

TEST(SyntheticDataset, DeterministicGivenSeed) {
  SynthConfig cfg;
  cfg.seed = 7;
  cfg.n_classes = 10;
  cfg.n = 128;
  Dataset a = make_synthetic(cfg);
  Dataset b = make_synthetic(cfg);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);

  cfg.seed = 8;
  Dataset c = make_synthetic(cfg);
  EXPECT_NE(a.images, c.images);
}

TEST(SyntheticDataset, BalancedLabelsAndValidRange) {
  SynthConfig cfg;
  cfg.n = 100;
  cfg.n_classes = 10;
  Dataset ds = make_synthetic(cfg);
  std::vector<int> counts(10, 0);
  for (auto l : ds.labels) {
    ASSERT_GE(l, 0);
    ASSERT_LT(l, 10);
    counts[l]++;
  }
  for (int c : counts) EXPECT_EQ(c, 10);
}

TEST(IdxFiles, RoundTripIsLossless) {
  const auto dir = fs::temp_directory_path() / "moekit_idx_test";
  fs::create_directories(dir);
  SynthConfig cfg;
  cfg.n = 32;
  cfg.image_size = 16;
  Dataset ds = make_synthetic(cfg);
  const std::string ip = (dir / "img.idx").string(), lp = (dir / "lab.idx").string();
  save_idx(ds, ip, lp);
  Dataset loaded = load_idx(ip, lp, ds.n_classes, ds.split);
  EXPECT_EQ(loaded.images, ds.images);
  EXPECT_EQ(loaded.labels, ds.labels);
  EXPECT_EQ(loaded.image_size, ds.image_size);
  fs::remove_all(dir);
}

TEST(IdxFiles, TruncatedFileIsParseError) {
  const auto dir = fs::temp_directory_path() / "moekit_idx_trunc";
  fs::create_directories(dir);
  SynthConfig cfg;
  cfg.n = 8;
  cfg.image_size = 8;
  Dataset ds = make_synthetic(cfg);
  const std::string ip = (dir / "img.idx").string(), lp = (dir / "lab.idx").string();
  save_idx(ds, ip, lp);

  std::ifstream in(ip, std::ios::binary);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  std::ofstream out(ip, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  out.close();
  EXPECT_ERR(Err::ParseError, load_idx(ip, lp, ds.n_classes, "train"));
  fs::remove_all(dir);
}

TEST(IdxFiles, LabelOutOfRangeIsRejected) {
  const auto dir = fs::temp_directory_path() / "moekit_idx_label";
  fs::create_directories(dir);
  SynthConfig cfg;
  cfg.n = 8;
  cfg.image_size = 8;
  Dataset ds = make_synthetic(cfg);
  const std::string ip = (dir / "img.idx").string(), lp = (dir / "lab.idx").string();
  save_idx(ds, ip, lp);
  EXPECT_ERR(Err::LabelOutOfRange, load_idx(ip, lp, 3, "train"));  // labels go up to 9
  fs::remove_all(dir);
}

TEST(Batches, NormalizationAndOrder) {
  SynthConfig cfg;
  cfg.n = 16;
  cfg.image_size = 8;
  Dataset ds = make_synthetic(cfg);
  Tensor batch = batch_images(ds, {0, 5, 3});
  EXPECT_EQ(batch.shape, Shape({3, 3, 8, 8}));
  for (float v : batch.data) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  const auto labels = batch_labels(ds, {0, 5, 3});
  EXPECT_EQ(labels, (std::vector<std::int32_t>{ds.labels[0], ds.labels[5], ds.labels[3]}));
}

TEST(Batches, EpochOrderIsSeededPermutation) {
  const auto a = epoch_order(100, 1, 0);
  const auto b = epoch_order(100, 1, 0);
  const auto c = epoch_order(100, 1, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  std::vector<std::int64_t> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::int64_t i = 0; i < 100; ++i) EXPECT_EQ(sorted[i], i);
}
