#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "../support/toy_setup.hpp"
#include "json.hpp"
#include "komet/checkpoint.hpp"
#include "komet/errors.hpp"
#include "komet/trainer.hpp"
#include "test_util.hpp"

namespace komet {
namespace {

using komet::testing::ScratchDir;

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Checkpoint full_checkpoint() {
  auto toy = komet::testing::make_toy();
  Checkpoint c;
  c.epoch = 4;
  c.step = 40;
  c.eval_loss = 1.25;
  c.model = toy.student;
  c.projection = toy.projection;
  AdamWState opt;
  opt.t = 7;
  std::int64_t k = 0;
  for (const auto& p : trainable_parameters(toy.student, toy.projection)) {
    opt.m.push_back(Tensor<float>::Array::Constant(p.tensor.size(), 0.001f * static_cast<float>(++k)));
    opt.v.push_back(Tensor<float>::Array::Constant(p.tensor.size(), 0.002f * static_cast<float>(k)));
  }
  c.optimizer = opt;
  c.vocab = toy.vocab;
  c.extra.push_back({"classifier.bias", Tensor<float>({3}, {0.5f, -0.5f, 2.0f})});
  return c;
}

TEST(Checkpoint, RoundTripRestoresEverything) {
  ScratchDir dir("ckpt");
  const auto c = full_checkpoint();
  save_checkpoint(dir / "c", c);
  const auto back = load_checkpoint(dir / "c");
  EXPECT_EQ(back.epoch, 4);
  EXPECT_EQ(back.step, 40);
  EXPECT_EQ(back.eval_loss, 1.25);
  EXPECT_EQ(back.model.config, c.model.config);
  const auto a = c.model.named_parameters();
  const auto b = back.model.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].tensor.shape(), b[i].tensor.shape());
    EXPECT_TRUE((a[i].tensor.values() == b[i].tensor.values()).all()) << a[i].name;
  }
  ASSERT_TRUE(back.projection && back.optimizer && back.vocab);
  EXPECT_TRUE((back.projection->weight.values() == c.projection->weight.values()).all());
  EXPECT_EQ(*back.optimizer, *c.optimizer);
  EXPECT_EQ(back.vocab->tokens(), c.vocab->tokens());
  ASSERT_EQ(back.extra.size(), 1u);
  EXPECT_EQ(back.extra[0].tensor.values()[2], 2.0f);
}

TEST(Checkpoint, WeightsAreLittleEndianFloatsInManifestOrder) {
  ScratchDir dir("ckpt");
  const auto c = full_checkpoint();
  save_checkpoint(dir / "c", c);
  const auto bytes = slurp(dir / "c" / "weights.bin");
  const auto entries = read_manifest_entries(dir / "c");
  const auto params = c.model.named_parameters();
  ASSERT_GE(entries.size(), params.size());
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(entries[i].name, params[i].name);
    EXPECT_EQ(entries[i].offset, expected_offset);
    for (Eigen::Index j = 0; j < params[i].tensor.size(); j += 17) {
      const auto at = entries[i].offset + 4 * static_cast<std::uint64_t>(j);
      std::uint32_t bits = 0;
      for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + k])) << (8 * k);
      EXPECT_EQ(std::bit_cast<float>(bits), params[i].tensor.values()[j]);
    }
    expected_offset += 4 * static_cast<std::uint64_t>(params[i].tensor.size());
  }
  const auto manifest = nlohmann::json::parse(slurp(dir / "c" / "manifest.json"));
  EXPECT_EQ(manifest["epoch"], 4);
  EXPECT_TRUE(manifest.contains("tensors"));
}

TEST(Checkpoint, SavingTwiceIsByteIdentical) {
  ScratchDir dir("ckpt");
  const auto c = full_checkpoint();
  save_checkpoint(dir / "a", c);
  save_checkpoint(dir / "b", c);
  for (const char* f : {"manifest.json", "weights.bin", "optimizer.bin"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
}

TEST(Checkpoint, CorruptionIsDetected) {
  ScratchDir dir("ckpt");
  save_checkpoint(dir / "c", full_checkpoint());
  const auto weights = slurp(dir / "c" / "weights.bin");
  std::ofstream(dir / "c" / "weights.bin", std::ios::binary) << weights.substr(0, weights.size() - 4);
  EXPECT_THROW(load_checkpoint(dir / "c"), IoError);
  std::ofstream(dir / "c" / "weights.bin", std::ios::binary) << weights << "xxxx";
  EXPECT_THROW(load_checkpoint(dir / "c"), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing"), IoError);
}

TEST(CheckpointManager, KeepsLimitAndNeverDropsBest) {
  ScratchDir dir("mgr");
  auto c = full_checkpoint();
  c.optimizer.reset();
  CheckpointManager mgr(dir.path(), 3);
  for (int e = 0; e <= 7; ++e) {
    c.epoch = e;
    mgr.save(c, e == 1);
    EXPECT_LE(mgr.retained_epochs().size(), 3u);
    if (e >= 1) {
      EXPECT_EQ(mgr.best_epoch(), 1);
      EXPECT_TRUE(std::filesystem::exists(mgr.path_for(1) / "manifest.json"));
    }
  }
  EXPECT_EQ(mgr.retained_epochs(), (std::vector<int>{1, 6, 7}));
  EXPECT_EQ(slurp(dir / "best"), "ckpt-1\n");
  EXPECT_EQ(load_checkpoint(mgr.path_for(1)).epoch, 1);
  EXPECT_THROW(CheckpointManager(dir.path(), 0), ConfigError);
}

}  // namespace
}  // namespace komet
