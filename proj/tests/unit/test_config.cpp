#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "vce/config.hpp"

using namespace vce;
using config::json;

TEST(Config, EmptyGivesPublishedDefaults) {
  const auto c = config::from_json(json::object());
  EXPECT_EQ(c.loss_weights.lambda_l1, 100.0);
  EXPECT_EQ(c.loss_weights.lambda_cycle, 10.0);
  EXPECT_EQ(c.loss_weights.lambda_identity, 5.0);
  EXPECT_EQ(c.loss_weights.lambda_supervised, 0.0);
  EXPECT_EQ(c.train.max_epochs, 200);
  EXPECT_EQ(c.train.early_stop_patience, 50);
  EXPECT_EQ(c.optimizer.autoencoder.lr, 1e-3);
  EXPECT_EQ(c.optimizer.autoencoder.beta1, 0.9);
  EXPECT_EQ(c.optimizer.pix2pix.lr, 2e-4);
  EXPECT_EQ(c.optimizer.pix2pix.beta1, 0.5);
  EXPECT_EQ(c.optimizer.cyclegan.lr, 1e-5);
  EXPECT_EQ(c.optimizer.cyclegan.beta1, 0.5);
  for (auto k : {losses::ModelKind::autoencoder, losses::ModelKind::pix2pix, losses::ModelKind::cyclegan}) {
    EXPECT_EQ(c.optimizer.of(k).weight_decay, 1e-5);
    EXPECT_EQ(c.optimizer.of(k).beta2, 0.999);
  }
  EXPECT_EQ(c.preprocess.target_size, 256);
  EXPECT_EQ(c.data.n_folds, 10);
  EXPECT_EQ(c.metrics.ssim.window, 11);
  EXPECT_FALSE(c.metrics.psnr_fixed_range.has_value());
}

TEST(Config, PatienceNotBelowMaxEpochsRejected) {
  json j = {{"train", {{"early_stop_patience", 300}, {"max_epochs", 200}}}};
  try {
    config::from_json(j);
    FAIL();
  } catch (const config::ConfigError& e) {
    EXPECT_EQ(e.key, "train.early_stop_patience");
    EXPECT_NE(std::string(e.what()).find("max_epochs"), std::string::npos);
  }
}

TEST(Config, UnknownKeysRejected) {
  for (const json& j : {json{{"bogus", 1}}, json{{"train", {{"epochs", 5}}}},
                        json{{"optimizer", {{"pix2pix", {{"lr", 1e-3}}}}}},
                        json{{"models", {{"cyclegan", {{"discriminator", {{"depth", 3}}}}}}}}}) {
    EXPECT_THROW(config::from_json(j), config::ConfigError) << j.dump();
  }
  try {
    config::from_json(json{{"train", {{"epochs", 5}}}});
  } catch (const config::ConfigError& e) {
    EXPECT_EQ(e.key, "train.epochs");
  }
}

TEST(Config, WrongTypesAndRangesNameTheKey) {
  auto key_of = [](const json& j) {
    try {
      config::from_json(j);
    } catch (const config::ConfigError& e) {
      return e.key;
    }
    return std::string("<none>");
  };
  EXPECT_EQ(key_of({{"train", {{"max_epochs", "many"}}}}), "train.max_epochs");
  EXPECT_EQ(key_of({{"train", {{"batch_size", 2.5}}}}), "train.batch_size");
  EXPECT_EQ(key_of({{"optimizer", {{"cyclegan", {{"learning_rate", 0}}}}}}), "optimizer.cyclegan.learning_rate");
  EXPECT_EQ(key_of({{"optimizer", {{"pix2pix", {{"beta1", 1.0}}}}}}), "optimizer.pix2pix.beta1");
  EXPECT_EQ(key_of({{"preprocess", {{"target_size", 100}}}}), "preprocess.target_size");
  EXPECT_EQ(key_of({{"data", {{"n_folds", 2}}}}), "data.n_folds");
  EXPECT_EQ(key_of({{"loss_weights", {{"lambda_l1", -1}}}}), "loss_weights.lambda_l1");
  EXPECT_EQ(key_of({{"metrics", {{"ssim", {{"window", 10}}}}}}), "metrics.ssim.window");
  EXPECT_EQ(key_of({{"augment", {{"seed", -3}}}}), "augment.seed");
}

TEST(Config, MomentumAcceptedAndIgnored) {
  const auto c = config::from_json({{"optimizer", {{"autoencoder", {{"momentum", 1}, {"beta1", 0.9}}}}}});
  EXPECT_EQ(c.optimizer.autoencoder.beta1, 0.9);
}

TEST(Config, RoundTrip) {
  json j = {{"train", {{"max_epochs", 7}, {"early_stop_patience", 3}, {"batch_size", 2}, {"seed", 9}}},
            {"preprocess", {{"target_size", 64}}},
            {"loss_weights", {{"lambda_supervised", 2.5}}},
            {"metrics", {{"psnr_fixed_range", 1.0}}},
            {"models", {{"cyclegan", {{"n_residual_blocks", 3}}}}}};
  const auto a = config::from_json(j);
  const auto b = config::from_json(config::to_json(a));
  EXPECT_TRUE(a == b);
  EXPECT_EQ(config::to_json(b).dump(), config::to_json(a).dump());
  EXPECT_EQ(b.train.max_epochs, 7);
  EXPECT_EQ(*b.metrics.psnr_fixed_range, 1.0);
  // defaults round-trip as well
  const auto d = config::from_json(json::object());
  EXPECT_TRUE(config::from_json(config::to_json(d)) == d);
}

TEST(Config, OverridesBeatFileValues) {
  const auto dir = std::filesystem::temp_directory_path() / "vce_config_test";
  std::filesystem::create_directories(dir);
  const auto p = dir / "run.json";
  std::ofstream(p) << R"({"train": {"max_epochs": 20, "early_stop_patience": 5}})";
  const auto c = config::load(p, {"train.max_epochs=30", "data.dicom_root=/tmp/x", "augment.enabled=false"});
  EXPECT_EQ(c.train.max_epochs, 30);
  EXPECT_EQ(c.train.early_stop_patience, 5);
  EXPECT_EQ(c.data.dicom_root, "/tmp/x");
  EXPECT_FALSE(c.augment.enabled);
  EXPECT_THROW(config::load(p, {"noequals"}), config::ConfigError);
  EXPECT_THROW(config::load(dir / "missing.json"), config::ConfigError);
  std::filesystem::remove_all(dir);
}

TEST(Config, ModelSpecsFollowKind) {
  auto c = config::from_json({{"preprocess", {{"target_size", 64}}}});
  const auto p = config::model_specs(c, losses::ModelKind::pix2pix);
  EXPECT_EQ(p.generator.kind, models::GeneratorKind::unet);
  EXPECT_EQ(p.generator.in_size, 64);
  EXPECT_EQ(p.discriminator.in_channels, 2);
  EXPECT_TRUE(p.discriminator.sigmoid_output);
  const auto g = config::model_specs(c, losses::ModelKind::cyclegan);
  EXPECT_EQ(g.generator.kind, models::GeneratorKind::resnet);
  EXPECT_EQ(g.discriminator.in_channels, 1);
  EXPECT_FALSE(g.discriminator.sigmoid_output);
  const auto rt = config::generator_spec_from_json(config::to_json(g.generator));
  EXPECT_EQ(config::to_json(rt), config::to_json(g.generator));
  const auto drt = config::discriminator_spec_from_json(config::to_json(g.discriminator));
  EXPECT_EQ(config::to_json(drt), config::to_json(g.discriminator));
}
