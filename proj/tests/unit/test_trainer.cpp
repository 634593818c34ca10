#include <gtest/gtest.h>

#include <filesystem>
#include <limits>

#include "vce/synth.hpp"
#include "vce/trainer.hpp"

using namespace vce;
using trainer::EarlyStopping;
using losses::ModelKind;
namespace fs = std::filesystem;

namespace {

config::RunConfig tiny_config(int max_epochs = 3, int patience = 2) {
  config::json j = {
      {"preprocess", {{"target_size", 64}}},
      {"train", {{"max_epochs", max_epochs}, {"early_stop_patience", patience}, {"batch_size", 4}, {"seed", 3}}},
      {"models",
       {{"autoencoder", {{"base_channels", 4}}},
        {"pix2pix", {{"base_channels", 4}, {"discriminator", {{"base_channels", 4}}}}},
        {"cyclegan", {{"base_channels", 4}, {"n_residual_blocks", 2}, {"discriminator", {{"base_channels", 4}}}}}}}};
  auto c = config::from_json(config::json::object());
  if (patience < max_epochs) return config::from_json(j);
  // single-epoch runs are only reachable programmatically
  j["train"]["early_stop_patience"] = 1;
  j["train"]["max_epochs"] = 2;
  c = config::from_json(j);
  c.train.max_epochs = max_epochs;
  c.train.early_stop_patience = patience;
  return c;
}

std::vector<trainer::PairImages<float>> blobs(int n, std::uint64_t seed = 11) {
  synth::BlobConfig c;
  c.n_pairs = n;
  c.seed = seed;
  return synth::make_blob_pairs<float>(c);
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("vce_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Stop epoch and best epoch computed directly from the sequence: the run stops
// at the first epoch e where e minus the first argmin of losses[1..e] reaches
// the patience, or at the end.
std::pair<int, int> oracle_stop(const std::vector<double>& losses, int patience, int max_epochs) {
  const int n = std::min<int>(static_cast<int>(losses.size()), max_epochs);
  for (int e = 1; e <= n; ++e) {
    const auto first_min = std::min_element(losses.begin(), losses.begin() + e) - losses.begin() + 1;
    if (e - first_min >= patience || e == n) return {e, static_cast<int>(first_min)};
  }
  return {0, 0};
}

}  // namespace

TEST(EarlyStoppingTest, ScriptedExample) {
  EarlyStopping es(2, 200);
  const std::vector<double> seq{1.0, 0.9, 0.95, 0.96, 0.97};
  int ran = 0;
  for (double v : seq) {
    if (es.should_stop()) break;
    es.update(v);
    ++ran;
  }
  EXPECT_EQ(ran, 4);
  EXPECT_EQ(es.epoch(), 4);
  EXPECT_EQ(es.best_epoch(), 2);
  EXPECT_DOUBLE_EQ(es.best(), 0.9);
  EXPECT_TRUE(es.stopped_by_patience());
}

TEST(EarlyStoppingTest, RandomizedSequencesMatchOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const int patience = 1 + static_cast<int>(rng.index(60));
    const int max_epochs = patience + 1 + static_cast<int>(rng.index(200));
    std::vector<double> seq;
    double level = 1.0;
    for (int e = 0; e < max_epochs; ++e) {
      level *= rng.bernoulli(0.1) ? rng.uniform(0.9, 1.0) : rng.uniform(1.0, 1.02);
      // repeated values exercise the strict-improvement rule
      seq.push_back(rng.bernoulli(0.1) && !seq.empty() ? seq.back() : level);
    }
    EarlyStopping es(patience, max_epochs);
    for (double v : seq) {
      if (es.should_stop()) break;
      es.update(v);
      const auto& h = es.history();
      ASSERT_EQ(es.best(), *std::min_element(h.begin(), h.end()));
      ASSERT_LE(es.epochs_since_best(), patience);
    }
    const auto [stop, best] = oracle_stop(seq, patience, max_epochs);
    EXPECT_EQ(es.epoch(), stop) << "trial " << trial;
    EXPECT_EQ(es.best_epoch(), best) << "trial " << trial;
    EXPECT_TRUE(es.epoch() == max_epochs || es.epochs_since_best() == patience);
  }
}

TEST(EarlyStoppingTest, DefaultPatienceRunsToCapOrFifty) {
  EarlyStopping es(50, 200);
  for (int e = 0; e < 200 && !es.should_stop(); ++e) es.update(e < 30 ? 1.0 - e * 0.01 : 0.8);
  EXPECT_EQ(es.best_epoch(), 30);
  EXPECT_EQ(es.epoch(), 80);
  EXPECT_THROW(es.update(0.1), std::logic_error);
}

TEST(Trainer, MaxEpochsOneRunsOneEpoch) {
  auto data = blobs(8);
  trainer::Trainer<float> tr(ModelKind::autoencoder, tiny_config(1, 1));
  auto st = tr.fit({data.begin(), data.begin() + 6}, {data.begin() + 6, data.end()});
  EXPECT_EQ(st.epoch, 1);
  ASSERT_EQ(st.history.size(), 1u);
  EXPECT_EQ(st.best_epoch, 1);
  EXPECT_EQ(tr.optimizer("g").steps(), 2);  // 6 pairs at batch 4
}

TEST(Trainer, CycleGanStepsAllFourNetworks) {
  auto data = blobs(10);
  auto cfg = tiny_config(1, 1);
  cfg.augment.enabled = false;
  trainer::Trainer<float> tr(ModelKind::cyclegan, cfg);
  const auto names = tr.optimizer_names();
  EXPECT_EQ(names, (std::vector<std::string>{"d", "d_x", "f", "g"}));
  tr.fit({data.begin(), data.begin() + 8}, {data.begin() + 8, data.end()});
  for (const auto& n : names) EXPECT_EQ(tr.optimizer(n).steps(), 2) << n;
}

TEST(Trainer, Pix2PixStepsGeneratorAndDiscriminator) {
  auto data = blobs(4);
  trainer::Trainer<float> tr(ModelKind::pix2pix, tiny_config());
  std::vector<const ImageF*> xs, ys;
  for (auto& p : data) {
    xs.push_back(&p.x);
    ys.push_back(&p.y);
  }
  const auto s = tr.train_step(trainer::stack_images(xs), trainer::stack_images(ys));
  EXPECT_GT(s.d, 0);
  EXPECT_GT(s.g, 100 * s.l1 - 1e-6);
  EXPECT_EQ(tr.optimizer("g").steps(), 1);
  EXPECT_EQ(tr.optimizer("d").steps(), 1);
}

TEST(Trainer, LossFallsOnOneBatchForEveryKind) {
  auto data = blobs(4);
  std::vector<const ImageF*> xs, ys;
  for (auto& p : data) {
    xs.push_back(&p.x);
    ys.push_back(&p.y);
  }
  const auto x = trainer::stack_images(xs), y = trainer::stack_images(ys);
  for (auto kind : {ModelKind::autoencoder, ModelKind::pix2pix, ModelKind::cyclegan}) {
    auto cfg = tiny_config();
    cfg.optimizer.cyclegan.lr = 2e-3;
    cfg.optimizer.pix2pix.lr = 2e-3;
    cfg.loss_weights.lambda_supervised = kind == ModelKind::cyclegan ? 10 : 0;
    trainer::Trainer<float> tr(kind, cfg);
    const double first = tr.train_step(x, y).l1;
    double last = first;
    for (int i = 0; i < 40; ++i) last = tr.train_step(x, y).l1;
    EXPECT_LT(last, 0.7 * first) << losses::to_string(kind);
  }
}

TEST(Trainer, SameSeedSameCurves) {
  auto data = blobs(10);
  auto run = [&] {
    trainer::Trainer<float> tr(ModelKind::pix2pix, tiny_config(2, 1));
    return tr.fit({data.begin(), data.begin() + 8}, {data.begin() + 8, data.end()});
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_g, b.history[i].train_g);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
  }
}

TEST(Trainer, NonFiniteLossAbortsWithDump) {
  auto data = blobs(4);
  for (auto& v : data[1].x.pixels()) v = std::numeric_limits<float>::quiet_NaN();
  const auto dir = scratch("nan");
  trainer::Trainer<float> tr(ModelKind::autoencoder, tiny_config(), dir);
  try {
    tr.fit({data.begin(), data.begin() + 2}, {data.begin() + 2, data.end()});
    FAIL() << "expected NonFiniteLoss";
  } catch (const trainer::NonFiniteLoss& e) {
    EXPECT_EQ(e.dump_dir, dir / "nan_dump");
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
    const auto info = config::json::parse(io::read_file(dir / "nan_dump" / "info.json"));
    EXPECT_EQ(info.at("epoch"), 1);
    EXPECT_EQ(info.at("batch"), 2);
    EXPECT_TRUE(fs::exists(dir / "nan_dump" / "x_0.f32"));
  }
  fs::remove_all(dir);
}

TEST(Trainer, ResumeReplaysTheSameRun) {
  auto data = blobs(10);
  const std::vector<trainer::PairImages<float>> train(data.begin(), data.begin() + 8), val(data.begin() + 8, data.end());
  const auto d1 = scratch("straight"), d2 = scratch("resumed");
  trainer::Trainer<float> straight(ModelKind::autoencoder, tiny_config(3, 2), d1);
  const auto a = straight.fit(train, val);
  {
    trainer::Trainer<float> first(ModelKind::autoencoder, tiny_config(3, 2), d2);
    first.fit(train, val, [](const trainer::EpochRecord& r) { return r.epoch < 1; });
  }
  trainer::Trainer<float> second(ModelKind::autoencoder, tiny_config(3, 2), d2);
  const auto b = second.fit(train, val, {}, true);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_FLOAT_EQ(a.history[i].val_loss, b.history[i].val_loss) << i;
  }
  EXPECT_EQ(a.best_epoch, b.best_epoch);
  EXPECT_EQ(straight.optimizer("g").steps(), second.optimizer("g").steps());
  EXPECT_EQ(io::read_file(d1 / "checkpoints" / "last.ckpt"), io::read_file(d2 / "checkpoints" / "last.ckpt"));
  EXPECT_TRUE(fs::exists(d2 / "history.jsonl"));
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Trainer, BestCheckpointIsReturnedAndLoadable) {
  auto data = blobs(10);
  const auto dir = scratch("best");
  trainer::Trainer<float> tr(ModelKind::autoencoder, tiny_config(3, 2), dir);
  const auto st = tr.fit({data.begin(), data.begin() + 8}, {data.begin() + 8, data.end()});
  EXPECT_EQ(st.best_checkpoint, (dir / "checkpoints" / "best.ckpt").string());
  const auto out = tr.predict(data[9].x);
  trainer::Trainer<float> other(ModelKind::autoencoder, tiny_config(3, 2));
  other.load_pretrained(st.best_checkpoint);
  EXPECT_EQ(other.predict(data[9].x), out);
  const double best_min = std::min_element(st.history.begin(), st.history.end(), [](auto& l, auto& r) {
                            return l.val_loss < r.val_loss;
                          })->val_loss;
  EXPECT_EQ(st.best_val_loss, best_min);
  EXPECT_NEAR(tr.evaluate({data.begin() + 8, data.end()}).monitored, best_min, 1e-6);
  trainer::Trainer<float> wrong(ModelKind::pix2pix, tiny_config(3, 2));
  EXPECT_THROW(wrong.load_pretrained(st.best_checkpoint), io::IoError);
  fs::remove_all(dir);
}

TEST(Trainer, ValidationIgnoresAugmentation) {
  auto data = blobs(4);
  auto on = tiny_config(), off = tiny_config();
  off.augment.enabled = false;
  trainer::Trainer<float> a(ModelKind::autoencoder, on), b(ModelKind::autoencoder, off);
  EXPECT_EQ(a.evaluate(data).monitored, b.evaluate(data).monitored);
}

TEST(Trainer, RejectsWrongImageSize) {
  synth::BlobConfig c;
  c.n_pairs = 4;
  c.size = 32;
  auto data = synth::make_blob_pairs<float>(c);
  trainer::Trainer<float> tr(ModelKind::autoencoder, tiny_config());
  EXPECT_THROW(tr.fit({data.begin(), data.begin() + 2}, {data.begin() + 2, data.end()}), ShapeError);
}

TEST(PairIndex, RoundTripAndRelativePaths) {
  const auto dir = scratch("index");
  synth::BlobConfig c;
  c.n_pairs = 6;
  const auto idx = synth::write_blob_dataset(dir, c);
  const auto back = trainer::read_pair_index(dir / "pairs.jsonl");
  ASSERT_EQ(back.size(), 6u);
  EXPECT_EQ(back[0].pair_id, idx[0].pair_id);
  EXPECT_EQ(back[0].x_path, (dir / idx[0].x_path).string());
  const auto imgs = trainer::load_pair_images<float>(back);
  const auto direct = synth::make_blob_pairs<float>(c);
  EXPECT_EQ(imgs[3].y, direct[3].y);
  fs::remove_all(dir);
}

TEST(RunCv, EveryTestPatientOnceAndFailuresIsolated) {
  synth::BlobConfig c;
  c.n_pairs = 12;
  c.pairs_per_patient = 2;
  const auto data = synth::make_blob_pairs<float>(c);
  std::vector<std::string> ids;
  for (auto& p : data) ids.push_back(p.meta.patient_id);
  const auto plans = dataset::make_folds(ids, 3, 5);
  auto bad = plans;
  bad[1].val_patients.clear();  // fold 1 cannot validate
  const auto root = scratch("cv");
  auto cfg = tiny_config(1, 1);
  std::vector<config::json> events;
  const auto res = trainer::run_cv<float>(ModelKind::autoencoder, cfg, data, bad, root, {},
                                          [&](const config::json& j) { events.push_back(j); });
  EXPECT_TRUE(res.partial);
  ASSERT_EQ(res.folds.size(), 3u);
  EXPECT_TRUE(res.folds[0].ok);
  EXPECT_FALSE(res.folds[1].ok);
  EXPECT_TRUE(res.folds[2].ok);
  const auto outs = trainer::read_output_manifest(res.manifest);
  std::map<std::string, int> seen;
  for (const auto& o : outs) {
    ++seen[o.pair_id];
    EXPECT_TRUE(fs::exists(o.output));
  }
  for (const auto& [id, n] : seen) EXPECT_EQ(n, 1) << id;
  EXPECT_EQ(outs.size(), res.folds[0].n_test_outputs + res.folds[2].n_test_outputs);
  EXPECT_TRUE(fs::exists(root / "autoencoder" / "0" / "checkpoints" / "best.ckpt"));
  EXPECT_TRUE(fs::exists(root / "autoencoder" / "cv_summary.json"));

  // all folds healthy: every pair comes out exactly once
  const auto ok = trainer::run_cv<float>(ModelKind::autoencoder, cfg, data, plans, root);
  EXPECT_FALSE(ok.partial);
  EXPECT_EQ(trainer::read_output_manifest(ok.manifest).size(), data.size());
  fs::remove_all(root);
}
