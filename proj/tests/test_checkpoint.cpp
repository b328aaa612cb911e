#include <gtest/gtest.h>

#include <fstream>
#include <numeric>

#include "l2ae/checkpoint.hpp"
#include "support/tempdir.hpp"

namespace l2ae {
namespace {

ImageDataset sample(std::size_t n) {
  static const ImageDataset ds = load_mnist_idx(testing::mnist5k_images(), testing::mnist5k_labels());
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return select(ds, idx, "head");
}

Checkpoint trained(NormalizationMode mode, Variant variant = Variant::dense) {
  auto spec = variant == Variant::dense ? AutoencoderSpec::dense_for(28, 28, 1, mode)
                                        : AutoencoderSpec::conv_for(28, 28, 1, mode);
  if (variant == Variant::dense) {
    spec.hidden = {24, 12};
    spec.latent_dim = 5;
  } else {
    spec.conv = {{5, 4, 2}, {3, 6, 2}};
    spec.latent_dim = 5;
  }
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 20;
  cfg.seed = 11;
  return train(sample(60), spec, cfg).checkpoint;
}

std::vector<std::uint8_t> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void expect_format_error(const std::vector<std::uint8_t>& bytes, const std::string& needle) {
  try {
    parse_checkpoint(bytes, "ckpt");
    FAIL() << "accepted a damaged checkpoint (" << needle << ")";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, ReloadReproducesEncodeBitForBit) {
  testing::TempDir dir;
  const auto ds = sample(30);
  for (auto variant : {Variant::dense, Variant::conv}) {
    for (auto mode : {NormalizationMode::none, NormalizationMode::unit_ball, NormalizationMode::batch,
                      NormalizationMode::layer}) {
      const auto ck = trained(mode, variant);
      const auto path = dir.file("model.l2ck");
      save_checkpoint(path, ck);
      const auto back = load_checkpoint(path);
      EXPECT_EQ(back, ck);
      EXPECT_EQ(encode_dataset(back, ds), encode_dataset(ck, ds)) << to_string(variant) << "/" << to_string(mode);
      EXPECT_EQ(reconstruction_errors(back, ds), reconstruction_errors(ck, ds));
    }
  }
}

TEST(Checkpoint, SerializationIsDeterministic) {
  testing::TempDir dir;
  const auto ck = trained(NormalizationMode::unit_ball);
  save_checkpoint(dir.file("a"), ck);
  save_checkpoint(dir.file("b"), load_checkpoint(dir.file("a")));
  EXPECT_EQ(read_all(dir.file("a")), read_all(dir.file("b")));
  EXPECT_EQ(read_all(dir.file("a")), checkpoint_bytes(ck));
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = checkpoint_bytes(trained(NormalizationMode::none));
  ASSERT_GE(bytes.size(), 24u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "L2AECKPT");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9] | bytes[10] | bytes[11], 0);
}

TEST(Checkpoint, BadMagic) {
  auto bytes = checkpoint_bytes(trained(NormalizationMode::none));
  bytes[0] = 'X';
  expect_format_error(bytes, "bad magic");
}

TEST(Checkpoint, UnsupportedVersion) {
  auto bytes = checkpoint_bytes(trained(NormalizationMode::none));
  bytes[8] = 9;
  expect_format_error(bytes, "unsupported version 9");
}

TEST(Checkpoint, TruncatedAnywhere) {
  const auto bytes = checkpoint_bytes(trained(NormalizationMode::none));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{12}, std::size_t{30}, bytes.size() / 2,
                          bytes.size() - 1}) {
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + cut);
    EXPECT_THROW(parse_checkpoint(part, "ckpt"), FormatError) << "cut at " << cut;
  }
}

TEST(Checkpoint, TrailingBytes) {
  auto bytes = checkpoint_bytes(trained(NormalizationMode::none));
  bytes.push_back(0);
  expect_format_error(bytes, "value block holds");
}

TEST(Checkpoint, CorruptedMetadata) {
  auto bytes = checkpoint_bytes(trained(NormalizationMode::none));
  bytes[24] = '#';
  expect_format_error(bytes, "malformed metadata");
}

TEST(Checkpoint, ShapeMismatchWithSpec) {
  auto ck = trained(NormalizationMode::none);
  auto& bias = ck.params.trainable.at("encoder/dense0/bias");
  bias = Tensor<float>({bias.size() + 1}, 0.0f);
  expect_format_error(checkpoint_bytes(ck), "encoder/dense0/bias");
}

TEST(Checkpoint, MissingTensor) {
  auto ck = trained(NormalizationMode::batch);
  ck.params.state.erase(ck.params.state.begin());
  expect_format_error(checkpoint_bytes(ck), "does not match the spec");
}

TEST(Checkpoint, MissingFile) {
  testing::TempDir dir;
  EXPECT_THROW(load_checkpoint(dir.file("absent")), FormatError);
}

}  // namespace
}  // namespace l2ae
