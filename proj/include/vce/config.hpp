#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "vce/losses.hpp"
#include "vce/metrics.hpp"
#include "vce/models.hpp"
#include "vce/optim.hpp"
#include "vce/preprocess.hpp"

namespace vce::config {

using nlohmann::json;
using losses::ModelKind;

/// Invalid configuration; `key` is the dotted path of the offending entry.
struct ConfigError : std::invalid_argument {
  ConfigError(const std::string& key, const std::string& what)
      : std::invalid_argument(key + ": " + what), key(key) {}
  std::string key;
};

struct DataConfig {
  std::string dicom_root;
  std::string sidecar;  // empty: <dicom_root>/metadata.csv when present
  int n_folds = 10;
  std::uint64_t fold_seed = 0;
  std::vector<std::string> des_markers{"DES", "RECOMBINED", "SUBTRACTED", "SUBTRACTION", "SUB", "CM"};
  std::vector<std::string> le_markers{"LE", "LOW", "LOWENERGY"};
};

struct AugmentSection {
  bool enabled = true;
  preprocess::AugmentConfig params;
};

struct TrainConfig {
  int max_epochs = 200;
  int early_stop_patience = 50;
  int batch_size = 8;
  std::uint64_t seed = 0;
  std::string pretrain_checkpoint;  // empty: train from scratch
};

struct OptimizerSection {
  optim::AdamConfig autoencoder{1e-3, 0.9, 0.999, 1e-8, 1e-5};
  optim::AdamConfig pix2pix{2e-4, 0.5, 0.999, 1e-8, 1e-5};
  optim::AdamConfig cyclegan{1e-5, 0.5, 0.999, 1e-8, 1e-5};

  const optim::AdamConfig& of(ModelKind k) const {
    return k == ModelKind::autoencoder ? autoencoder : k == ModelKind::pix2pix ? pix2pix : cyclegan;
  }
};

struct DiscriminatorSection {
  int base_channels = 64;
  int n_layers = 3;
};

struct ModelsSection {
  int autoencoder_base_channels = 64;
  int pix2pix_base_channels = 64;
  bool pix2pix_use_dropout = false;
  DiscriminatorSection pix2pix_discriminator;
  int cyclegan_base_channels = 64;
  int cyclegan_n_residual_blocks = 9;
  DiscriminatorSection cyclegan_discriminator;
};

struct MetricsSection {
  metrics::SsimConstants ssim;
  metrics::VifConfig vif;
  std::optional<double> psnr_fixed_range;

  metrics::MetricOptions options() const {
    metrics::MetricOptions o;
    o.ssim = ssim;
    o.vif = vif;
    o.psnr.fixed_peak = psnr_fixed_range;
    return o;
  }
};

struct RunConfig {
  DataConfig data;
  preprocess::PreprocessConfig preprocess;
  AugmentSection augment;
  TrainConfig train;
  OptimizerSection optimizer;
  losses::LossWeights loss_weights;
  ModelsSection models;
  MetricsSection metrics;
};

struct ModelSpecs {
  models::GeneratorSpec generator;
  models::DiscriminatorSpec discriminator;
};

/// Architecture specs for one model kind at the configured image size.
inline ModelSpecs model_specs(const RunConfig& c, ModelKind kind) {
  ModelSpecs s;
  s.generator.in_size = c.preprocess.target_size;
  switch (kind) {
    case ModelKind::autoencoder:
      s.generator.kind = models::GeneratorKind::autoencoder;
      s.generator.base_channels = c.models.autoencoder_base_channels;
      break;
    case ModelKind::pix2pix:
      s.generator.kind = models::GeneratorKind::unet;
      s.generator.base_channels = c.models.pix2pix_base_channels;
      s.generator.use_dropout = c.models.pix2pix_use_dropout;
      s.discriminator.in_channels = 2;
      s.discriminator.base_channels = c.models.pix2pix_discriminator.base_channels;
      s.discriminator.n_layers = c.models.pix2pix_discriminator.n_layers;
      s.discriminator.norm = nn::NormKind::batch;
      s.discriminator.sigmoid_output = true;
      break;
    case ModelKind::cyclegan:
      s.generator.kind = models::GeneratorKind::resnet;
      s.generator.base_channels = c.models.cyclegan_base_channels;
      s.generator.n_residual_blocks = c.models.cyclegan_n_residual_blocks;
      s.discriminator.in_channels = 1;
      s.discriminator.base_channels = c.models.cyclegan_discriminator.base_channels;
      s.discriminator.n_layers = c.models.cyclegan_discriminator.n_layers;
      s.discriminator.norm = nn::NormKind::instance;
      s.discriminator.sigmoid_output = false;
      break;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Spec serialisation (also used by checkpoint manifests)

inline json to_json(const models::GeneratorSpec& s) {
  return {{"kind", models::to_string(s.kind)},
          {"in_size", s.in_size},
          {"base_channels", s.base_channels},
          {"n_residual_blocks", s.n_residual_blocks},
          {"in_channels", s.in_channels},
          {"out_channels", s.out_channels},
          {"use_dropout", s.use_dropout}};
}

inline std::string to_string(nn::NormKind k) {
  return k == nn::NormKind::batch ? "batch" : k == nn::NormKind::instance ? "instance" : "none";
}
inline nn::NormKind norm_from_string(const std::string& s) {
  if (s == "batch") return nn::NormKind::batch;
  if (s == "instance") return nn::NormKind::instance;
  if (s == "none") return nn::NormKind::none;
  throw std::invalid_argument("unknown norm '" + s + "'");
}

inline json to_json(const models::DiscriminatorSpec& s) {
  return {{"in_channels", s.in_channels}, {"base_channels", s.base_channels},
          {"n_layers", s.n_layers},       {"norm", to_string(s.norm)},
          {"sigmoid_output", s.sigmoid_output}};
}

inline models::GeneratorSpec generator_spec_from_json(const json& j) {
  models::GeneratorSpec s;
  s.kind = models::generator_kind_from_string(j.at("kind").get<std::string>());
  s.in_size = j.at("in_size").get<int>();
  s.base_channels = j.at("base_channels").get<int>();
  s.n_residual_blocks = j.at("n_residual_blocks").get<int>();
  s.in_channels = j.at("in_channels").get<int>();
  s.out_channels = j.at("out_channels").get<int>();
  s.use_dropout = j.at("use_dropout").get<bool>();
  return s;
}

inline models::DiscriminatorSpec discriminator_spec_from_json(const json& j) {
  models::DiscriminatorSpec s;
  s.in_channels = j.at("in_channels").get<int>();
  s.base_channels = j.at("base_channels").get<int>();
  s.n_layers = j.at("n_layers").get<int>();
  s.norm = norm_from_string(j.at("norm").get<std::string>());
  s.sigmoid_output = j.at("sigmoid_output").get<bool>();
  return s;
}

inline json to_json(const losses::LossWeights& w) {
  return {{"lambda_l1", w.lambda_l1},
          {"lambda_cycle", w.lambda_cycle},
          {"lambda_identity", w.lambda_identity},
          {"lambda_supervised", w.lambda_supervised}};
}

inline json to_json(const optim::AdamConfig& a) {
  return {{"algorithm", "adam"}, {"learning_rate", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"weight_decay", a.weight_decay}};
}

// ---------------------------------------------------------------------------
// Full configuration <-> JSON

inline json to_json(const RunConfig& c) {
  json j;
  j["data"] = {{"dicom_root", c.data.dicom_root}, {"sidecar", c.data.sidecar},
               {"n_folds", c.data.n_folds},       {"fold_seed", c.data.fold_seed},
               {"des_markers", c.data.des_markers}, {"le_markers", c.data.le_markers}};
  j["preprocess"] = {{"target_size", c.preprocess.target_size},
                     {"stretch_low_pct", c.preprocess.stretch_low_pct},
                     {"stretch_high_pct", c.preprocess.stretch_high_pct}};
  const auto& a = c.augment.params;
  j["augment"] = {{"enabled", c.augment.enabled},        {"max_shift_frac", a.max_shift_frac},
                  {"max_zoom_frac", a.max_zoom_frac},    {"hflip_prob", a.hflip_prob},
                  {"max_rotation_deg", a.max_rotation_deg}, {"seed", a.seed}};
  j["train"] = {{"max_epochs", c.train.max_epochs},
                {"early_stop_patience", c.train.early_stop_patience},
                {"batch_size", c.train.batch_size},
                {"seed", c.train.seed},
                {"pretrain_checkpoint", c.train.pretrain_checkpoint}};
  j["optimizer"] = {{"autoencoder", to_json(c.optimizer.autoencoder)},
                    {"pix2pix", to_json(c.optimizer.pix2pix)},
                    {"cyclegan", to_json(c.optimizer.cyclegan)}};
  j["loss_weights"] = to_json(c.loss_weights);
  const auto& m = c.models;
  j["models"] = {
      {"autoencoder", {{"base_channels", m.autoencoder_base_channels}}},
      {"pix2pix",
       {{"base_channels", m.pix2pix_base_channels},
        {"use_dropout", m.pix2pix_use_dropout},
        {"discriminator",
         {{"base_channels", m.pix2pix_discriminator.base_channels},
          {"n_layers", m.pix2pix_discriminator.n_layers}}}}},
      {"cyclegan",
       {{"base_channels", m.cyclegan_base_channels},
        {"n_residual_blocks", m.cyclegan_n_residual_blocks},
        {"discriminator",
         {{"base_channels", m.cyclegan_discriminator.base_channels},
          {"n_layers", m.cyclegan_discriminator.n_layers}}}}}};
  const auto& s = c.metrics.ssim;
  j["metrics"] = {{"ssim",
                   {{"k1", s.k1}, {"k2", s.k2}, {"dynamic_range", s.dynamic_range},
                    {"window", s.window}, {"sigma", s.sigma}}},
                  {"vif",
                   {{"n_scales", c.metrics.vif.n_scales},
                    {"sigma_nsq", c.metrics.vif.sigma_nsq},
                    {"pixel_scale", c.metrics.vif.pixel_scale}}},
                  {"psnr_fixed_range", c.metrics.psnr_fixed_range ? json(*c.metrics.psnr_fixed_range)
                                                                  : json(nullptr)}};
  return j;
}

namespace detail {

/// Reads keys out of one JSON object and remembers which were used.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  template <class V>
  void get(const std::string& key, V& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    const json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<V, std::optional<double>>) {
        out = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      } else if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw json::type_error::create(302, "expected a boolean", &v);
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw json::type_error::create(302, "expected an integer", &v);
        if constexpr (std::is_unsigned_v<V>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
            throw json::type_error::create(302, "expected a non-negative integer", &v);
          }
        }
        out = v.get<V>();
      } else if constexpr (std::is_same_v<V, std::string>) {
        out = v.is_null() ? std::string() : v.get<std::string>();
      } else {
        out = v.get<V>();
      }
    } catch (const json::exception& e) {
      throw ConfigError(key_path(key), std::string("wrong type (") + e.what() + ")");
    }
  }

  Section child(const std::string& key) {
    static const json empty = json::object();
    if (!j_.contains(key)) return Section(empty, key_path(key));
    seen_.insert(key);
    return Section(j_.at(key), key_path(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(key_path(it.key()), "unknown key");
    }
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_adam(Section&& s, optim::AdamConfig& a) {
  std::string algorithm = "adam";
  s.get("algorithm", algorithm);
  if (algorithm != "adam" && algorithm != "Adam") throw ConfigError(s.key_path("algorithm"), "only adam is supported");
  s.get("learning_rate", a.lr);
  s.get("beta1", a.beta1);
  s.get("beta2", a.beta2);
  s.get("eps", a.eps);
  s.get("weight_decay", a.weight_decay);
  // accepted for compatibility with configs that quote an Adam "momentum"; it has no effect
  double momentum = 1;
  s.get("momentum", momentum);
  s.finish();
}

inline void read_disc(Section&& s, DiscriminatorSection& d) {
  s.get("base_channels", d.base_channels);
  s.get("n_layers", d.n_layers);
  s.finish();
}

inline void require(bool ok, const std::string& key, const std::string& constraint) {
  if (!ok) throw ConfigError(key, constraint);
}

inline void check_adam(const optim::AdamConfig& a, const std::string& p) {
  require(a.lr > 0, p + ".learning_rate", "must be > 0");
  require(a.beta1 >= 0 && a.beta1 < 1, p + ".beta1", "must be in [0, 1)");
  require(a.beta2 >= 0 && a.beta2 < 1, p + ".beta2", "must be in [0, 1)");
  require(a.eps > 0, p + ".eps", "must be > 0");
  require(a.weight_decay >= 0, p + ".weight_decay", "must be >= 0");
}

}  // namespace detail

/// Checks every constraint; errors name the key. Programmatic runs may skip the
/// patience < max_epochs rule so that single-epoch runs stay expressible.
inline void validate(const RunConfig& c, bool patience_below_max = true) {
  using detail::require;
  require(c.data.n_folds >= 3, "data.n_folds", "must be >= 3");
  const int ts = c.preprocess.target_size;
  require(ts >= 64 && (ts & (ts - 1)) == 0, "preprocess.target_size", "must be a power of two >= 64");
  require(c.preprocess.stretch_low_pct >= 0 && c.preprocess.stretch_low_pct < 100,
          "preprocess.stretch_low_pct", "must be in [0, 100)");
  require(c.preprocess.stretch_high_pct > c.preprocess.stretch_low_pct && c.preprocess.stretch_high_pct <= 100,
          "preprocess.stretch_high_pct", "must be in (stretch_low_pct, 100]");
  const auto& a = c.augment.params;
  require(a.max_shift_frac >= 0 && a.max_shift_frac <= 1, "augment.max_shift_frac", "must be in [0, 1]");
  require(a.max_zoom_frac >= 0 && a.max_zoom_frac < 1, "augment.max_zoom_frac", "must be in [0, 1)");
  require(a.hflip_prob >= 0 && a.hflip_prob <= 1, "augment.hflip_prob", "must be in [0, 1]");
  require(a.max_rotation_deg >= 0, "augment.max_rotation_deg", "must be >= 0");
  require(c.train.max_epochs >= 1, "train.max_epochs", "must be >= 1");
  require(c.train.early_stop_patience >= 1, "train.early_stop_patience", "must be >= 1");
  require(!patience_below_max || c.train.early_stop_patience < c.train.max_epochs, "train.early_stop_patience",
          "must be < train.max_epochs (" + std::to_string(c.train.max_epochs) + ")");
  require(c.train.batch_size >= 1, "train.batch_size", "must be >= 1");
  detail::check_adam(c.optimizer.autoencoder, "optimizer.autoencoder");
  detail::check_adam(c.optimizer.pix2pix, "optimizer.pix2pix");
  detail::check_adam(c.optimizer.cyclegan, "optimizer.cyclegan");
  const auto& w = c.loss_weights;
  require(w.lambda_l1 >= 0, "loss_weights.lambda_l1", "must be >= 0");
  require(w.lambda_cycle >= 0, "loss_weights.lambda_cycle", "must be >= 0");
  require(w.lambda_identity >= 0, "loss_weights.lambda_identity", "must be >= 0");
  require(w.lambda_supervised >= 0, "loss_weights.lambda_supervised", "must be >= 0");
  const auto& m = c.models;
  require(m.autoencoder_base_channels >= 1, "models.autoencoder.base_channels", "must be >= 1");
  require(m.pix2pix_base_channels >= 1, "models.pix2pix.base_channels", "must be >= 1");
  require(m.cyclegan_base_channels >= 1, "models.cyclegan.base_channels", "must be >= 1");
  require(m.cyclegan_n_residual_blocks >= 1, "models.cyclegan.n_residual_blocks", "must be >= 1");
  for (auto [d, p] : {std::pair{&m.pix2pix_discriminator, "models.pix2pix.discriminator"},
                      {&m.cyclegan_discriminator, "models.cyclegan.discriminator"}}) {
    require(d->base_channels >= 1, std::string(p) + ".base_channels", "must be >= 1");
    require(d->n_layers >= 1 && d->n_layers <= 5, std::string(p) + ".n_layers", "must be in [1, 5]");
  }
  const auto& s = c.metrics.ssim;
  require(s.k1 > 0, "metrics.ssim.k1", "must be > 0");
  require(s.k2 > 0, "metrics.ssim.k2", "must be > 0");
  require(s.dynamic_range > 0, "metrics.ssim.dynamic_range", "must be > 0");
  require(s.window >= 3 && s.window % 2 == 1, "metrics.ssim.window", "must be odd and >= 3");
  require(s.sigma > 0, "metrics.ssim.sigma", "must be > 0");
  require(c.metrics.vif.n_scales >= 1, "metrics.vif.n_scales", "must be >= 1");
  require(c.metrics.vif.sigma_nsq > 0, "metrics.vif.sigma_nsq", "must be > 0");
  require(c.metrics.vif.pixel_scale > 0, "metrics.vif.pixel_scale", "must be > 0");
  require(!c.metrics.psnr_fixed_range || *c.metrics.psnr_fixed_range > 0, "metrics.psnr_fixed_range",
          "must be > 0 or null");
}

/// Published defaults for everything absent; unknown keys are rejected.
inline RunConfig from_json(const json& j) {
  RunConfig c;
  detail::Section root(j, "");
  {
    auto s = root.child("data");
    s.get("dicom_root", c.data.dicom_root);
    s.get("sidecar", c.data.sidecar);
    s.get("n_folds", c.data.n_folds);
    s.get("fold_seed", c.data.fold_seed);
    s.get("des_markers", c.data.des_markers);
    s.get("le_markers", c.data.le_markers);
    s.finish();
  }
  {
    auto s = root.child("preprocess");
    s.get("target_size", c.preprocess.target_size);
    s.get("stretch_low_pct", c.preprocess.stretch_low_pct);
    s.get("stretch_high_pct", c.preprocess.stretch_high_pct);
    s.finish();
  }
  {
    auto s = root.child("augment");
    s.get("enabled", c.augment.enabled);
    s.get("max_shift_frac", c.augment.params.max_shift_frac);
    s.get("max_zoom_frac", c.augment.params.max_zoom_frac);
    s.get("hflip_prob", c.augment.params.hflip_prob);
    s.get("max_rotation_deg", c.augment.params.max_rotation_deg);
    s.get("seed", c.augment.params.seed);
    s.finish();
  }
  {
    auto s = root.child("train");
    s.get("max_epochs", c.train.max_epochs);
    s.get("early_stop_patience", c.train.early_stop_patience);
    s.get("batch_size", c.train.batch_size);
    s.get("seed", c.train.seed);
    s.get("pretrain_checkpoint", c.train.pretrain_checkpoint);
    s.finish();
  }
  {
    auto s = root.child("optimizer");
    detail::read_adam(s.child("autoencoder"), c.optimizer.autoencoder);
    detail::read_adam(s.child("pix2pix"), c.optimizer.pix2pix);
    detail::read_adam(s.child("cyclegan"), c.optimizer.cyclegan);
    s.finish();
  }
  {
    auto s = root.child("loss_weights");
    s.get("lambda_l1", c.loss_weights.lambda_l1);
    s.get("lambda_cycle", c.loss_weights.lambda_cycle);
    s.get("lambda_identity", c.loss_weights.lambda_identity);
    s.get("lambda_supervised", c.loss_weights.lambda_supervised);
    s.finish();
  }
  {
    auto s = root.child("models");
    auto ae = s.child("autoencoder");
    ae.get("base_channels", c.models.autoencoder_base_channels);
    ae.finish();
    auto px = s.child("pix2pix");
    px.get("base_channels", c.models.pix2pix_base_channels);
    px.get("use_dropout", c.models.pix2pix_use_dropout);
    detail::read_disc(px.child("discriminator"), c.models.pix2pix_discriminator);
    px.finish();
    auto cg = s.child("cyclegan");
    cg.get("base_channels", c.models.cyclegan_base_channels);
    cg.get("n_residual_blocks", c.models.cyclegan_n_residual_blocks);
    detail::read_disc(cg.child("discriminator"), c.models.cyclegan_discriminator);
    cg.finish();
    s.finish();
  }
  {
    auto s = root.child("metrics");
    auto ss = s.child("ssim");
    ss.get("k1", c.metrics.ssim.k1);
    ss.get("k2", c.metrics.ssim.k2);
    ss.get("dynamic_range", c.metrics.ssim.dynamic_range);
    ss.get("window", c.metrics.ssim.window);
    ss.get("sigma", c.metrics.ssim.sigma);
    ss.finish();
    auto v = s.child("vif");
    v.get("n_scales", c.metrics.vif.n_scales);
    v.get("sigma_nsq", c.metrics.vif.sigma_nsq);
    v.get("pixel_scale", c.metrics.vif.pixel_scale);
    v.finish();
    s.get("psnr_fixed_range", c.metrics.psnr_fixed_range);
    s.finish();
  }
  root.finish();
  validate(c);
  return c;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return to_json(a) == to_json(b); }

/// Sets a dotted key, e.g. "train.max_epochs=5". The value is parsed as JSON
/// when possible and taken as a string otherwise.
inline void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key.path=value");
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError(path, "empty key segment");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError(p.string(), "cannot open config file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string(), std::string("invalid JSON: ") + e.what());
  }
}

/// Reads a config file (empty path: defaults only) and applies overrides.
inline RunConfig load(const std::filesystem::path& p, const std::vector<std::string>& overrides = {}) {
  json j = p.empty() ? json::object() : read_json_file(p);
  for (const auto& o : overrides) apply_override(j, o);
  return from_json(j);
}

}  // namespace vce::config
