#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vce/config.hpp"
#include "vce/dataset.hpp"
#include "vce/io.hpp"
#include "vce/losses.hpp"
#include "vce/models.hpp"
#include "vce/optim.hpp"
#include "vce/preprocess.hpp"

namespace vce::trainer {

namespace fs = std::filesystem;
using nlohmann::json;
using losses::ModelKind;
using ag::NoGradGuard;
using ag::Var;

// ---------------------------------------------------------------------------
// Pair index: one line per preprocessed (x, y) pair

struct PairSample {
  std::string pair_id;
  std::string patient_id;
  std::string acr_category = "unreported";
  std::optional<int> birads;
  std::string x_path;
  std::string y_path;

  friend bool operator==(const PairSample&, const PairSample&) = default;
};

inline json to_json(const PairSample& s) {
  return {{"pair_id", s.pair_id},   {"patient_id", s.patient_id},
          {"acr_category", s.acr_category},
          {"birads", s.birads ? json(*s.birads) : json(nullptr)},
          {"x_path", s.x_path},     {"y_path", s.y_path}};
}

inline PairSample pair_sample_from_json(const json& j) {
  PairSample s;
  s.pair_id = j.at("pair_id").get<std::string>();
  s.patient_id = j.at("patient_id").get<std::string>();
  s.acr_category = j.value("acr_category", std::string("unreported"));
  if (j.contains("birads") && !j.at("birads").is_null()) s.birads = j.at("birads").get<int>();
  s.x_path = j.at("x_path").get<std::string>();
  s.y_path = j.at("y_path").get<std::string>();
  return s;
}

inline void write_pair_index(const fs::path& p, const std::vector<PairSample>& samples) {
  std::string out;
  for (const auto& s : samples) out += to_json(s).dump() + "\n";
  io::write_file_atomic(p, out);
}

/// Relative image paths are resolved against the index file's directory.
inline std::vector<PairSample> read_pair_index(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw io::IoError("cannot open pair index " + p.string());
  std::vector<PairSample> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto s = pair_sample_from_json(json::parse(line));
      for (auto* path : {&s.x_path, &s.y_path}) {
        if (fs::path(*path).is_relative()) *path = (p.parent_path() / *path).string();
      }
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw io::IoError(p.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline ImageD read_any_image(const fs::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".png") return io::read_png(p);
  return io::read_float_image(p).cast<double>();
}

template <class T>
struct PairImages {
  PairSample meta;
  Image<T> x;
  Image<T> y;
};

template <class T>
std::vector<PairImages<T>> load_pair_images(const std::vector<PairSample>& samples) {
  std::vector<PairImages<T>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    PairImages<T> p{s, read_any_image(s.x_path).cast<T>(), read_any_image(s.y_path).cast<T>()};
    expect_same_dims(p.x, p.y, ("pair " + s.pair_id).c_str());
    out.push_back(std::move(p));
  }
  return out;
}

template <class T>
struct FoldSplit {
  std::vector<PairImages<T>> train, val, test;
};

/// Routes every pair to the split holding its patient; pairs of patients the
/// plan does not mention are dropped.
template <class T>
FoldSplit<T> split_fold(const std::vector<PairImages<T>>& pairs, const dataset::FoldPlan& plan) {
  const std::set<std::string> tr(plan.train_patients.begin(), plan.train_patients.end());
  const std::set<std::string> va(plan.val_patients.begin(), plan.val_patients.end());
  const std::set<std::string> te(plan.test_patients.begin(), plan.test_patients.end());
  FoldSplit<T> s;
  for (const auto& p : pairs) {
    if (tr.count(p.meta.patient_id)) s.train.push_back(p);
    else if (va.count(p.meta.patient_id)) s.val.push_back(p);
    else if (te.count(p.meta.patient_id)) s.test.push_back(p);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Early stopping

/// Epochs are 1-based. An epoch improves only when its loss is strictly below
/// the best so far; training stops once `patience` epochs pass without one or
/// `max_epochs` is reached.
class EarlyStopping {
 public:
  EarlyStopping(int patience, int max_epochs) : patience_(patience), max_epochs_(max_epochs) {
    if (patience < 1 || max_epochs < 1) throw std::invalid_argument("EarlyStopping: patience and max_epochs must be >= 1");
  }

  /// Records the next epoch's validation loss; returns true on improvement.
  bool update(double val_loss) {
    if (should_stop()) throw std::logic_error("EarlyStopping: update after stop");
    ++epoch_;
    history_.push_back(val_loss);
    if (val_loss < best_) {
      best_ = val_loss;
      best_epoch_ = epoch_;
      since_best_ = 0;
      return true;
    }
    ++since_best_;
    return false;
  }

  bool should_stop() const { return epoch_ >= max_epochs_ || (epoch_ > 0 && since_best_ >= patience_); }
  bool stopped_by_patience() const { return epoch_ > 0 && since_best_ >= patience_; }

  int epoch() const { return epoch_; }
  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }
  int epochs_since_best() const { return since_best_; }
  int patience() const { return patience_; }
  int max_epochs() const { return max_epochs_; }
  const std::vector<double>& history() const { return history_; }

  /// Rebuilds the state from a loss history.
  void replay(const std::vector<double>& losses) {
    *this = EarlyStopping(patience_, max_epochs_);
    for (double v : losses) update(v);
  }

 private:
  int patience_;
  int max_epochs_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int since_best_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  std::vector<double> history_;
};

// ---------------------------------------------------------------------------
// Run state

struct EpochRecord {
  int epoch = 0;
  double train_g = 0;
  double train_d = 0;
  double train_l1 = 0;
  double val_loss = 0;  // the monitored quantity
  double val_l1 = 0;
  bool improved = false;
  double seconds = 0;
};

inline json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},       {"train_g", r.train_g}, {"train_d", r.train_d},
          {"train_l1", r.train_l1}, {"val_loss", r.val_loss}, {"val_l1", r.val_l1},
          {"improved", r.improved}, {"seconds", r.seconds}};
}

inline EpochRecord epoch_record_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.train_g = j.at("train_g").get<double>();
  r.train_d = j.at("train_d").get<double>();
  r.train_l1 = j.at("train_l1").get<double>();
  r.val_loss = j.at("val_loss").get<double>();
  r.val_l1 = j.at("val_l1").get<double>();
  r.improved = j.at("improved").get<bool>();
  r.seconds = j.value("seconds", 0.0);
  return r;
}

struct RunState {
  int epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int epochs_since_best = 0;
  bool stopped_early = false;
  std::vector<EpochRecord> history;
  std::string best_checkpoint;
  std::string last_checkpoint;
};

inline json to_json(const RunState& s) {
  json h = json::array();
  for (const auto& r : s.history) h.push_back(to_json(r));
  return {{"epoch", s.epoch},
          {"best_val_loss", std::isfinite(s.best_val_loss) ? json(s.best_val_loss) : json(nullptr)},
          {"best_epoch", s.best_epoch},
          {"epochs_since_best", s.epochs_since_best},
          {"stopped_early", s.stopped_early},
          {"best_checkpoint", s.best_checkpoint},
          {"last_checkpoint", s.last_checkpoint},
          {"history", h}};
}

inline RunState run_state_from_json(const json& j) {
  RunState s;
  s.epoch = j.at("epoch").get<int>();
  s.best_val_loss = j.at("best_val_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                    : j.at("best_val_loss").get<double>();
  s.best_epoch = j.at("best_epoch").get<int>();
  s.epochs_since_best = j.at("epochs_since_best").get<int>();
  s.stopped_early = j.at("stopped_early").get<bool>();
  s.best_checkpoint = j.value("best_checkpoint", std::string());
  s.last_checkpoint = j.value("last_checkpoint", std::string());
  for (const auto& r : j.at("history")) s.history.push_back(epoch_record_from_json(r));
  return s;
}

struct NonFiniteLoss : std::runtime_error {
  NonFiniteLoss(const std::string& what, fs::path dump) : std::runtime_error(what), dump_dir(std::move(dump)) {}
  fs::path dump_dir;  // empty when there was nowhere to write
};

using LogFn = std::function<void(const json&)>;

// ---------------------------------------------------------------------------
// Models and batches

template <class T>
struct ModelBundle {
  std::unique_ptr<models::Generator<T>> g;             // X -> Y
  std::unique_ptr<models::Generator<T>> f;             // Y -> X (cyclegan)
  std::unique_ptr<models::PatchDiscriminator<T>> d;    // D, or D_y for cyclegan
  std::unique_ptr<models::PatchDiscriminator<T>> d_x;  // cyclegan

  std::vector<std::pair<std::string, nn::Module<T>*>> modules() const {
    std::vector<std::pair<std::string, nn::Module<T>*>> out;
    if (g) out.emplace_back("g", g.get());
    if (f) out.emplace_back("f", f.get());
    if (d) out.emplace_back("d", d.get());
    if (d_x) out.emplace_back("d_x", d_x.get());
    return out;
  }

  void set_training(bool on) {
    for (auto& [name, m] : modules()) m->set_training(on);
  }
};

template <class T>
ModelBundle<T> build_bundle(ModelKind kind, const config::ModelSpecs& specs, Rng& rng) {
  ModelBundle<T> b;
  switch (kind) {
    case ModelKind::autoencoder:
      b.g = models::build_autoencoder<T>(specs.generator, rng);
      break;
    case ModelKind::pix2pix: {
      auto m = models::build_pix2pix<T>(specs.generator, specs.discriminator, rng);
      b.g = std::move(m.generator);
      b.d = std::move(m.discriminator);
      break;
    }
    case ModelKind::cyclegan: {
      auto m = models::build_cyclegan<T>(specs.generator, specs.generator, specs.discriminator,
                                         specs.discriminator, rng);
      b.g = std::move(m.g);
      b.f = std::move(m.f);
      b.d = std::move(m.d_y);
      b.d_x = std::move(m.d_x);
      break;
    }
  }
  return b;
}

template <class T>
Tensor<T> stack_images(const std::vector<const Image<T>*>& imgs) {
  if (imgs.empty()) throw std::invalid_argument("stack_images: empty batch");
  const int h = imgs.front()->rows(), w = imgs.front()->cols();
  Tensor<T> t(Shape{static_cast<int>(imgs.size()), 1, h, w});
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    if (imgs[i]->rows() != h || imgs[i]->cols() != w) throw ShapeError("stack_images: mixed image sizes");
    std::copy(imgs[i]->vec().begin(), imgs[i]->vec().end(), t.plane(static_cast<int>(i), 0));
  }
  return t;
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(static_cast<double>(t[i]))) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Trainer

struct StepLosses {
  double g = 0;   // generator objective
  double d = 0;   // discriminator objective (0 for the autoencoder)
  double l1 = 0;  // |y - G(x)|
};

struct ValLosses {
  double monitored = 0;
  double l1 = 0;
};

/// Trains one model kind on aligned (x, y) pairs. With an output directory the
/// run writes checkpoints/{best,last}.ckpt (+ .json), history.jsonl and, on a
/// non-finite loss, nan_dump/.
template <class T>
class Trainer {
 public:
  Trainer(ModelKind kind, config::RunConfig cfg, fs::path run_dir = {})
      : kind_(kind), cfg_(std::move(cfg)), run_dir_(std::move(run_dir)) {
    config::validate(cfg_, false);
    specs_ = config::model_specs(cfg_, kind_);
    Rng init(splitmix_seed(cfg_.train.seed, 0x1417));
    models_ = build_bundle<T>(kind_, specs_, init);
    for (auto& [name, m] : models_.modules()) {
      optimizers_.emplace(name, std::make_unique<optim::Adam<T>>(m->parameters(), cfg_.optimizer.of(kind_)));
    }
  }

  ModelKind kind() const { return kind_; }
  const config::RunConfig& config() const { return cfg_; }
  const config::ModelSpecs& specs() const { return specs_; }
  ModelBundle<T>& models() { return models_; }
  optim::Adam<T>& optimizer(const std::string& name) {
    auto it = optimizers_.find(name);
    if (it == optimizers_.end()) throw std::out_of_range("no optimizer '" + name + "'");
    return *it->second;
  }
  std::vector<std::string> optimizer_names() const {
    std::vector<std::string> out;
    for (auto& [n, o] : optimizers_) out.push_back(n);
    return out;
  }
  const fs::path& run_dir() const { return run_dir_; }
  void set_logger(LogFn log) { log_ = std::move(log); }

  /// One optimisation step on a batch (N x 1 x S x S each).
  StepLosses train_step(const Tensor<T>& x, const Tensor<T>& y) {
    models_.set_training(true);
    const Var<T> vx(x), vy(y);
    StepLosses out;
    switch (kind_) {
      case ModelKind::autoencoder: {
        losses::LossParts<T> p;
        p.l1 = losses::l1_loss(models_.g->forward(vx), vy);
        auto obj = losses::total_objective(kind_, p, cfg_.loss_weights);
        out.g = out.l1 = guard(obj.generator.item(), "generator", x, y);
        zero("g");
        obj.generator.backward();
        step("g");
        break;
      }
      case ModelKind::pix2pix: {
        auto& d = *models_.d;
        Var<T> fake = models_.g->forward(vx);
        // discriminator on the detached fake
        auto adv_d = losses::adversarial_bce(d.forward(vx, vy), d.forward(vx, fake.detach())).discriminator;
        out.d = guard(adv_d.item(), "discriminator", x, y);
        zero("d");
        adv_d.backward();
        step("d");
        losses::LossParts<T> p;
        p.adv_d = adv_d;
        p.adv_g = ops::bce_to(d.forward(vx, fake), T{1});
        p.l1 = losses::l1_loss(fake, vy);
        auto obj = losses::total_objective(kind_, p, cfg_.loss_weights);
        out.g = guard(obj.generator.item(), "generator", x, y);
        out.l1 = p.l1.item();
        zero("g");
        obj.generator.backward();
        step("g");
        break;
      }
      case ModelKind::cyclegan: {
        auto p = cyclegan_parts(vx, vy);
        const Var<T> zero_term(Tensor<T>::scalar(T{0}));
        p.adv_d = p.adv_d_x = zero_term;
        auto obj = losses::total_objective(kind_, p, cfg_.loss_weights);
        out.g = guard(obj.generator.item(), "generator", x, y);
        out.l1 = p.supervised.item();
        zero("g");
        zero("f");
        obj.generator.backward();
        step("g");
        step("f");
        // both discriminators on detached fakes
        auto& dy = *models_.d;
        auto& dx = *models_.d_x;
        auto ly = losses::adversarial_mse(dy.forward(vy), dy.forward(fake_y_.detach())).discriminator;
        auto lx = losses::adversarial_mse(dx.forward(vx), dx.forward(fake_x_.detach())).discriminator;
        auto dsum = ops::weighted_sum<T>({{ly, T{1}}, {lx, T{1}}});
        out.d = guard(dsum.item(), "discriminator", x, y);
        zero("d");
        zero("d_x");
        dsum.backward();
        step("d");
        step("d_x");
        fake_y_ = fake_x_ = Var<T>();
        break;
      }
    }
    return out;
  }

  /// Monitored validation loss and L1 over a data set, in eval mode.
  ValLosses evaluate(const std::vector<PairImages<T>>& data) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty data set");
    NoGradGuard ng;
    models_.set_training(false);
    double mon = 0, l1 = 0;
    std::size_t n = 0;
    for (std::size_t start = 0; start < data.size(); start += batch_size()) {
      const auto [x, y] = batch_of(data, start);
      const Var<T> vx(x), vy(y);
      const double w = static_cast<double>(x.shape().n);
      double m = 0, l = 0;
      switch (kind_) {
        case ModelKind::autoencoder:
          m = l = losses::l1_loss(models_.g->forward(vx), vy).item();
          break;
        case ModelKind::pix2pix: {
          Var<T> fake = models_.g->forward(vx);
          losses::LossParts<T> p;
          p.adv_g = ops::bce_to(models_.d->forward(vx, fake), T{1});
          p.adv_d = p.adv_g;
          p.l1 = losses::l1_loss(fake, vy);
          m = losses::total_objective(kind_, p, cfg_.loss_weights).generator.item();
          l = p.l1.item();
          break;
        }
        case ModelKind::cyclegan: {
          auto p = cyclegan_parts(vx, vy);
          p.adv_d = p.adv_d_x = p.adv_g;
          m = losses::total_objective(kind_, p, cfg_.loss_weights).generator.item();
          l = p.supervised.item();
          fake_y_ = fake_x_ = Var<T>();
          break;
        }
      }
      mon += m * w;
      l1 += l * w;
      n += x.shape().n;
    }
    models_.set_training(true);
    return {mon / static_cast<double>(n), l1 / static_cast<double>(n)};
  }

  /// G(x) in eval mode.
  Tensor<T> predict(const Tensor<T>& x) {
    NoGradGuard ng;
    models_.set_training(false);
    Tensor<T> out = models_.g->forward(Var<T>(x)).value();
    models_.set_training(true);
    return out;
  }

  Image<T> predict(const Image<T>& x) { return to_image<T>(predict(to_tensor<T>(x))); }

  /// Trains until early stopping or max_epochs. With `resume` and an existing
  /// last checkpoint the run continues from it. Afterwards the models hold the
  /// best-validation weights. `on_epoch` returning false ends the run early.
  RunState fit(const std::vector<PairImages<T>>& train, const std::vector<PairImages<T>>& val,
               std::function<bool(const EpochRecord&)> on_epoch = {}, bool resume = false) {
    if (train.empty()) throw std::invalid_argument("fit: empty training set");
    if (val.empty()) throw std::invalid_argument("fit: empty validation set");
    check_sizes(train);
    check_sizes(val);
    EarlyStopping es(cfg_.train.early_stop_patience, cfg_.train.max_epochs);
    RunState st;
    if (resume && !run_dir_.empty() && fs::exists(last_path())) {
      st = load_checkpoint(last_path(), true);
      std::vector<double> losses;
      for (const auto& r : st.history) losses.push_back(r.val_loss);
      es.replay(losses);
      best_snapshot_ = io::decode_tensors<T>(io::read_file(best_path()), best_path().string());
      emit({{"event", "resume"}, {"epoch", st.epoch}});
    } else {
      best_snapshot_.clear();
    }
    bool keep_going = true;
    while (!es.should_stop() && keep_going) {
      const auto t0 = std::chrono::steady_clock::now();
      EpochRecord rec;
      rec.epoch = es.epoch() + 1;
      run_epoch(train, rec);
      const auto v = evaluate(val);
      if (!std::isfinite(v.monitored)) {
        throw NonFiniteLoss("non-finite validation loss at epoch " + std::to_string(rec.epoch),
                            dump_nan("validation", rec.epoch, -1, {}, {}));
      }
      rec.val_loss = v.monitored;
      rec.val_l1 = v.l1;
      rec.improved = es.update(v.monitored);
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      st.epoch = es.epoch();
      st.best_val_loss = es.best();
      st.best_epoch = es.best_epoch();
      st.epochs_since_best = es.epochs_since_best();
      st.stopped_early = es.stopped_by_patience();
      st.history.push_back(rec);
      if (rec.improved) {
        best_snapshot_ = state_map(false);
        if (!run_dir_.empty()) {
          save_checkpoint(best_path(), st, false);
          st.best_checkpoint = best_path().string();
        }
      }
      if (!run_dir_.empty()) {
        st.last_checkpoint = last_path().string();
        save_checkpoint(last_path(), st, true);
        write_history(st);
      }
      json ev = to_json(rec);
      ev["event"] = "epoch";
      ev["model"] = losses::to_string(kind_);
      emit(ev);
      if (on_epoch) keep_going = on_epoch(rec);
    }
    if (!best_snapshot_.empty()) restore_map(best_snapshot_, false);
    return st;
  }

  /// Writes module weights (and optimizer state when `with_optim`) plus a
  /// JSON sidecar carrying specs and run state.
  void save_checkpoint(const fs::path& p, const RunState& st, bool with_optim) const {
    fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
    io::write_file_atomic(p, io::encode_tensors(state_map(with_optim)));
    json side = {{"model", losses::to_string(kind_)},
                 {"generator", config::to_json(specs_.generator)},
                 {"discriminator", config::to_json(specs_.discriminator)},
                 {"with_optimizer", with_optim},
                 {"optimizer_steps", json::object()},
                 {"state", to_json(st)}};
    if (with_optim) {
      for (auto& [n, o] : optimizers_) side["optimizer_steps"][n] = o->steps();
    }
    io::write_file_atomic(sidecar_of(p), side.dump(2) + "\n");
  }

  /// Restores weights (and optimizer state when asked and present); returns
  /// the stored run state.
  RunState load_checkpoint(const fs::path& p, bool with_optim) {
    const json side = json::parse(io::read_file(sidecar_of(p)));
    if (side.at("model").get<std::string>() != losses::to_string(kind_)) {
      throw io::IoError(p.string() + ": checkpoint is for model " + side.at("model").get<std::string>());
    }
    restore_map(io::decode_tensors<T>(io::read_file(p), p.string()), with_optim);
    if (with_optim) {
      if (!side.at("with_optimizer").get<bool>()) throw io::IoError(p.string() + ": no optimizer state");
      for (auto& [n, o] : optimizers_) o->set_steps(side.at("optimizer_steps").at(n).template get<long>());
    }
    return run_state_from_json(side.at("state"));
  }

  /// Initialises from a (pretraining) checkpoint of the same model kind; only
  /// weights and buffers are taken.
  void load_pretrained(const fs::path& p) {
    load_checkpoint(p, false);
    emit({{"event", "pretrained_loaded"}, {"path", p.string()}});
  }

  fs::path best_path() const { return run_dir_ / "checkpoints" / "best.ckpt"; }
  fs::path last_path() const { return run_dir_ / "checkpoints" / "last.ckpt"; }
  static fs::path sidecar_of(const fs::path& p) { return fs::path(p.string() + ".json"); }

 private:
  static std::uint64_t splitmix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t s = seed ^ salt;
    return splitmix64(s);
  }

  std::size_t batch_size() const { return static_cast<std::size_t>(cfg_.train.batch_size); }

  void check_sizes(const std::vector<PairImages<T>>& data) const {
    const int s = specs_.generator.in_size;
    for (const auto& p : data) {
      if (p.x.rows() != s || p.x.cols() != s || p.y.rows() != s || p.y.cols() != s) {
        throw ShapeError("pair " + p.meta.pair_id + " is not " + std::to_string(s) + "x" + std::to_string(s));
      }
    }
  }

  std::pair<Tensor<T>, Tensor<T>> batch_of(const std::vector<PairImages<T>>& data, std::size_t start) const {
    std::vector<const Image<T>*> xs, ys;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size()); ++i) {
      xs.push_back(&data[i].x);
      ys.push_back(&data[i].y);
    }
    return {stack_images(xs), stack_images(ys)};
  }

  // Shuffle and augmentation draw from a stream fixed by (seed, epoch), so a
  // resumed run replays the same batches.
  void run_epoch(const std::vector<PairImages<T>>& train, EpochRecord& rec) {
    Rng rng = Rng(splitmix_seed(cfg_.train.seed, 0xE90C)).fork(static_cast<std::uint64_t>(rec.epoch));
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double g = 0, d = 0, l1 = 0;
    int steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size()) {
      std::vector<Image<T>> xs, ys;
      for (std::size_t i = start; i < std::min(order.size(), start + batch_size()); ++i) {
        const auto& p = train[order[i]];
        if (cfg_.augment.enabled) {
          auto a = preprocess::augment(p.x, p.y, cfg_.augment.params, rng);
          xs.push_back(std::move(a.x));
          ys.push_back(std::move(a.y));
        } else {
          xs.push_back(p.x);
          ys.push_back(p.y);
        }
      }
      std::vector<const Image<T>*> px, py;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        px.push_back(&xs[i]);
        py.push_back(&ys[i]);
      }
      cur_epoch_ = rec.epoch;
      cur_step_ = steps;
      const auto s = train_step(stack_images(px), stack_images(py));
      g += s.g;
      d += s.d;
      l1 += s.l1;
      ++steps;
    }
    rec.train_g = g / steps;
    rec.train_d = d / steps;
    rec.train_l1 = l1 / steps;
  }

  losses::LossParts<T> cyclegan_parts(const Var<T>& vx, const Var<T>& vy) {
    auto& G = *models_.g;
    auto& F = *models_.f;
    losses::LossParts<T> p;
    fake_y_ = G.forward(vx);
    fake_x_ = F.forward(vy);
    const Var<T> rec_x = F.forward(fake_y_);
    const Var<T> rec_y = G.forward(fake_x_);
    p.adv_g = ops::mean_sq_to(models_.d->forward(fake_y_), T{1});
    p.adv_g_f = ops::mean_sq_to(models_.d_x->forward(fake_x_), T{1});
    p.cycle = losses::cycle_loss(vx, rec_x, vy, rec_y);
    p.identity = losses::identity_loss(G.forward(vy), vy, F.forward(vx), vx);
    // pairing is kept: the supervised term compares G(x) with its own target
    p.supervised = losses::l1_loss(fake_y_, vy);
    p.l1 = p.supervised;
    return p;
  }

  void zero(const std::string& n) { optimizer(n).zero_grad(); }
  void step(const std::string& n) { optimizer(n).step(); }

  double guard(double v, const char* what, const Tensor<T>& x, const Tensor<T>& y) {
    if (!std::isfinite(v)) {
      const auto dir = dump_nan(what, cur_epoch_, cur_step_, x, y);
      throw NonFiniteLoss(std::string("non-finite ") + what + " loss at epoch " + std::to_string(cur_epoch_) +
                              ", step " + std::to_string(cur_step_) +
                              (dir.empty() ? std::string() : "; batch dumped to " + dir.string()),
                          dir);
    }
    return v;
  }

  fs::path dump_nan(const std::string& what, int epoch, int step, const Tensor<T>& x, const Tensor<T>& y) const {
    if (run_dir_.empty()) return {};
    const fs::path dir = run_dir_ / "nan_dump";
    fs::create_directories(dir);
    json info = {{"loss", what}, {"epoch", epoch}, {"step", step}, {"model", losses::to_string(kind_)},
                 {"batch", x.empty() ? 0 : x.shape().n}};
    for (int i = 0; !x.empty() && i < x.shape().n; ++i) {
      io::write_float_image(dir / ("x_" + std::to_string(i) + ".f32"), to_image<float>(x, i));
      io::write_float_image(dir / ("y_" + std::to_string(i) + ".f32"), to_image<float>(y, i));
    }
    json finite = json::object();
    for (auto& [name, m] : models_.modules()) {
      bool ok = true;
      for (auto& p : m->parameters()) ok = ok && all_finite(p.value());
      finite[name] = ok;
    }
    info["parameters_finite"] = finite;
    io::write_file_atomic(dir / "info.json", info.dump(2) + "\n");
    return dir;
  }

  io::TensorMap<T> state_map(bool with_optim) const {
    io::TensorMap<T> m;
    for (auto& [name, mod] : models_.modules()) io::collect_state(*mod, name + ".", m);
    if (with_optim) {
      for (auto& [name, o] : optimizers_) {
        auto& fm = o->first_moments();
        auto& sm = o->second_moments();
        for (std::size_t k = 0; k < fm.size(); ++k) {
          m["opt." + name + ".m." + std::to_string(k)] = fm[k];
          m["opt." + name + ".v." + std::to_string(k)] = sm[k];
        }
      }
    }
    return m;
  }

  void restore_map(const io::TensorMap<T>& m, bool with_optim) {
    for (auto& [name, mod] : models_.modules()) io::restore_state(*mod, name + ".", m);
    if (!with_optim) return;
    for (auto& [name, o] : optimizers_) {
      auto& fm = o->first_moments();
      auto& sm = o->second_moments();
      for (std::size_t k = 0; k < fm.size(); ++k) {
        for (auto [key, dst] : {std::pair{"opt." + name + ".m." + std::to_string(k), &fm[k]},
                                std::pair{"opt." + name + ".v." + std::to_string(k), &sm[k]}}) {
          auto it = m.find(key);
          if (it == m.end() || it->second.shape() != dst->shape()) {
            throw io::IoError("checkpoint optimizer state mismatch at " + key);
          }
          *dst = it->second;
        }
      }
    }
  }

  void write_history(const RunState& st) const {
    std::string out;
    for (const auto& r : st.history) out += to_json(r).dump() + "\n";
    io::write_file_atomic(run_dir_ / "history.jsonl", out);
  }

  void emit(const json& j) const {
    if (log_) log_(j);
  }

  ModelKind kind_;
  config::RunConfig cfg_;
  fs::path run_dir_;
  config::ModelSpecs specs_;
  ModelBundle<T> models_;
  std::map<std::string, std::unique_ptr<optim::Adam<T>>> optimizers_;
  io::TensorMap<T> best_snapshot_;
  Var<T> fake_y_, fake_x_;
  int cur_epoch_ = 0;
  int cur_step_ = 0;
  LogFn log_;
};

// ---------------------------------------------------------------------------
// Cross-validation

struct CvFoldResult {
  int fold = 0;
  bool ok = false;
  std::string error;
  RunState state;
  std::size_t n_test_outputs = 0;
};

struct CvResult {
  std::vector<CvFoldResult> folds;
  bool partial = false;
  fs::path manifest;  // test output manifest (jsonl)
};

/// One line per test output written by run_cv.
struct OutputRecord {
  std::string pair_id;
  std::string patient_id;
  int fold = 0;
  std::string acr_category;
  std::optional<int> birads;
  std::string input;
  std::string target;
  std::string output;
};

inline json to_json(const OutputRecord& r) {
  return {{"pair_id", r.pair_id}, {"patient_id", r.patient_id}, {"fold", r.fold},
          {"acr_category", r.acr_category}, {"birads", r.birads ? json(*r.birads) : json(nullptr)},
          {"input", r.input},     {"target", r.target},         {"output", r.output}};
}

inline OutputRecord output_record_from_json(const json& j) {
  OutputRecord r;
  r.pair_id = j.at("pair_id").get<std::string>();
  r.patient_id = j.at("patient_id").get<std::string>();
  r.fold = j.at("fold").get<int>();
  r.acr_category = j.value("acr_category", std::string("unreported"));
  if (j.contains("birads") && !j.at("birads").is_null()) r.birads = j.at("birads").get<int>();
  r.input = j.at("input").get<std::string>();
  r.target = j.at("target").get<std::string>();
  r.output = j.at("output").get<std::string>();
  return r;
}

inline std::vector<OutputRecord> read_output_manifest(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw io::IoError("cannot open output manifest " + p.string());
  std::vector<OutputRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(output_record_from_json(json::parse(line)));
  }
  return out;
}

inline fs::path model_dir(const fs::path& runs_root, ModelKind kind) { return runs_root / losses::to_string(kind); }
inline fs::path fold_dir(const fs::path& runs_root, ModelKind kind, int fold) {
  return model_dir(runs_root, kind) / std::to_string(fold);
}

/// Trains each fold, runs G on the fold's test pairs and writes
/// <runs_root>/<model>/<fold>/test_outputs/<pair_id>.png plus a manifest of all
/// outputs. A failing fold is recorded and the remaining folds still run.
template <class T>
CvResult run_cv(ModelKind kind, const config::RunConfig& cfg, const std::vector<PairImages<T>>& pairs,
                const std::vector<dataset::FoldPlan>& folds, const fs::path& runs_root,
                const std::string& pretrained = {}, LogFn log = {}, bool resume = false) {
  CvResult res;
  res.manifest = model_dir(runs_root, kind) / "test_outputs.jsonl";
  std::string manifest;
  for (const auto& plan : folds) {
    CvFoldResult fr;
    fr.fold = plan.fold_index;
    const fs::path dir = fold_dir(runs_root, kind, plan.fold_index);
    try {
      auto split = split_fold(pairs, plan);
      config::RunConfig fold_cfg = cfg;
      fold_cfg.train.seed = cfg.train.seed + static_cast<std::uint64_t>(plan.fold_index);
      Trainer<T> tr(kind, fold_cfg, dir);
      if (log) tr.set_logger([&](const json& j) { json e = j;
        e["fold"] = plan.fold_index;
        log(e); });
      if (!pretrained.empty() && !(resume && fs::exists(tr.last_path()))) tr.load_pretrained(pretrained);
      fr.state = tr.fit(split.train, split.val, {}, resume);
      const fs::path out_dir = dir / "test_outputs";
      fs::create_directories(out_dir);
      for (const auto& p : split.test) {
        const fs::path out = out_dir / (p.meta.pair_id + ".png");
        io::write_png16(out, tr.predict(p.x));
        OutputRecord r{p.meta.pair_id, p.meta.patient_id, plan.fold_index, p.meta.acr_category,
                       p.meta.birads,  p.meta.x_path,     p.meta.y_path,    out.string()};
        manifest += to_json(r).dump() + "\n";
        ++fr.n_test_outputs;
      }
      fr.ok = true;
    } catch (const std::exception& e) {
      fr.error = e.what();
      res.partial = true;
      if (log) log({{"event", "fold_failed"}, {"fold", plan.fold_index}, {"error", fr.error}});
    }
    res.folds.push_back(std::move(fr));
  }
  fs::create_directories(res.manifest.parent_path());
  io::write_file_atomic(res.manifest, manifest);
  json summary = {{"model", losses::to_string(kind)}, {"partial", res.partial}, {"folds", json::array()}};
  for (const auto& f : res.folds) {
    summary["folds"].push_back({{"fold", f.fold}, {"ok", f.ok}, {"error", f.error},
                                {"epochs", f.state.epoch}, {"best_epoch", f.state.best_epoch},
                                {"best_val_loss", std::isfinite(f.state.best_val_loss) ? json(f.state.best_val_loss) : json(nullptr)},
                                {"n_test_outputs", f.n_test_outputs}});
  }
  io::write_file_atomic(model_dir(runs_root, kind) / "cv_summary.json", summary.dump(2) + "\n");
  return res;
}

}  // namespace vce::trainer
