// Copyright (c) 2026 The dialogbert-cpp Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace dialogbert {
namespace {

TEST(CheckpointTest, RoundTripIsBitExactForFloat) {
  auto cfg = testing::micro_config(24);
  cfg.init_std = 0.07;
  DialogBert<float> m(cfg, 3);
  const auto dir = testing::scratch_dir("ckpt");
  save_checkpoint(dir / "m.bin", m, 0xabcdef0123456789ULL);
  const auto loaded = load_checkpoint<float>(dir / "m.bin");
  EXPECT_EQ(loaded.vocab_hash, 0xabcdef0123456789ULL);
  EXPECT_EQ(loaded.model->config(), m.config());
  const auto& a = m.params().params();
  const auto& b = loaded.model->params().params();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    ASSERT_EQ(a[i].tensor.shape(), b[i].tensor.shape());
    EXPECT_TRUE(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin()))
        << a[i].name;
  }
  // Saving the loaded model reproduces the same bytes.
  save_checkpoint(dir / "again.bin", *loaded.model, loaded.vocab_hash);
  EXPECT_EQ(testing::slurp(dir / "m.bin"), testing::slurp(dir / "again.bin"));
}

TEST(CheckpointTest, ModelConfigJsonRoundTrip) {
  auto cfg = ModelConfig::small(77);
  cfg.init_std = 0.05;
  cfg.tie_word_embeddings = false;
  EXPECT_EQ(model_config_from_json(to_json(cfg)), cfg);
}

TEST(CheckpointTest, RejectsCorruptFiles) {
  DialogBert<float> m(testing::micro_config(24), 3);
  const auto dir = testing::scratch_dir("ckpt_bad");
  save_checkpoint(dir / "m.bin", m, 1);
  const std::string good = testing::slurp(dir / "m.bin");

  auto write = [&](const std::string& bytes) {
    std::ofstream(dir / "bad.bin", std::ios::binary) << bytes;
    return dir / "bad.bin";
  };
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(load_checkpoint<float>(write(bad_magic)), FormatError);
  EXPECT_THROW(load_checkpoint<float>(write(good.substr(0, good.size() - 4))), FormatError);
  EXPECT_THROW(load_checkpoint<float>(write(good.substr(0, 30))), FormatError);
  std::string bad_version = good;
  bad_version[8] = 9;
  EXPECT_THROW(load_checkpoint<float>(write(bad_version)), FormatError);
  EXPECT_THROW(load_checkpoint<float>(dir / "missing.bin"), IoError);
}

TEST(CheckpointTest, HexHash) {
  EXPECT_EQ(hex64(0x1fULL), "000000000000001f");
}

}  // namespace
}  // namespace dialogbert
