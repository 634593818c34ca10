#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>
#include <nlohmann/json.hpp>

#include "vce/image.hpp"

namespace vce::metrics {

// ---------------------------------------------------------------------------
// Pixel metrics. Images are expected in [0, 1].

template <class T>
double mse(const Image<T>& y, const Image<T>& y_hat) {
  expect_same_dims(y, y_hat, "mse");
  if (y.empty()) throw std::invalid_argument("mse: empty image");
  double acc = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = static_cast<double>(y[i]) - static_cast<double>(y_hat[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(y.size());
}

constexpr double kPsnrInfinite = std::numeric_limits<double>::infinity();

struct PsnrOptions {
  // Peak from the target image; set to use a fixed range instead.
  std::optional<double> fixed_peak;
};

/// 10 log10(peak^2 / mse) with peak = max(y) unless a fixed peak is given.
/// Infinite for identical images.
template <class T>
double psnr(const Image<T>& y, const Image<T>& y_hat, const PsnrOptions& opt = {}) {
  const double e = mse(y, y_hat);
  double peak = 0;
  if (opt.fixed_peak) {
    peak = *opt.fixed_peak;
  } else {
    peak = static_cast<double>(*std::max_element(y.pixels().begin(), y.pixels().end()));
  }
  if (!(peak > 0)) throw std::domain_error("psnr: peak is not positive (max(y) = 0?)");
  if (e == 0) return kPsnrInfinite;
  return 10.0 * std::log10(peak * peak / e);
}

/// Report label for a PSNR value.
inline std::string psnr_band(double db) {
  if (db >= 30) return "excellent";
  if (db <= 21) return "bad";
  return "acceptable";
}

// ---------------------------------------------------------------------------
// Filtering helpers (correlation with 'valid' support).

namespace detail {

inline std::vector<double> gaussian_kernel(int n, double sigma) {
  std::vector<double> k(n);
  const double c = (n - 1) / 2.0;
  double s = 0;
  for (int i = 0; i < n; ++i) {
    k[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

/// Separable 'valid' correlation of img with k ⊗ k.
inline ImageD filter_valid(const ImageD& img, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int orows = img.rows() - n + 1, ocols = img.cols() - n + 1;
  if (orows <= 0 || ocols <= 0) throw std::invalid_argument("filter: image smaller than window");
  ImageD tmp(img.rows(), ocols);
  for (int r = 0; r < img.rows(); ++r) {
    for (int c = 0; c < ocols; ++c) {
      double s = 0;
      for (int j = 0; j < n; ++j) s += k[j] * img(r, c + j);
      tmp(r, c) = s;
    }
  }
  ImageD out(orows, ocols);
  for (int r = 0; r < orows; ++r) {
    for (int c = 0; c < ocols; ++c) {
      double s = 0;
      for (int j = 0; j < n; ++j) s += k[j] * tmp(r + j, c);
      out(r, c) = s;
    }
  }
  return out;
}

inline ImageD product(const ImageD& a, const ImageD& b) {
  ImageD o(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = a[i] * b[i];
  return o;
}

template <class T>
ImageD scaled(const Image<T>& a, double s) {
  ImageD o(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) o[i] = s * static_cast<double>(a[i]);
  return o;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// SSIM

struct SsimConstants {
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
  int window = 11;
  double sigma = 1.5;
  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
};

inline void validate(const SsimConstants& c) {
  if (!(c.k1 > 0 && c.k2 > 0 && c.dynamic_range > 0)) {
    throw std::invalid_argument("ssim: k1, k2 and dynamic_range must be > 0");
  }
  if (c.window < 3 || c.window % 2 == 0) throw std::invalid_argument("ssim: window must be odd >= 3");
  if (!(c.sigma > 0)) throw std::invalid_argument("ssim: sigma must be > 0");
}

/// Mean SSIM over all fully-contained Gaussian windows. Local moments use
/// normalised weights (no sample-covariance correction).
template <class T>
double ssim(const Image<T>& y, const Image<T>& y_hat, const SsimConstants& c = {}) {
  validate(c);
  expect_same_dims(y, y_hat, "ssim");
  if (y.rows() < c.window || y.cols() < c.window) {
    throw std::invalid_argument("ssim: image smaller than the " + std::to_string(c.window) +
                                "x" + std::to_string(c.window) + " window");
  }
  const auto k = detail::gaussian_kernel(c.window, c.sigma);
  const ImageD a = detail::scaled(y, 1.0), b = detail::scaled(y_hat, 1.0);
  const ImageD mu_a = detail::filter_valid(a, k), mu_b = detail::filter_valid(b, k);
  const ImageD aa = detail::filter_valid(detail::product(a, a), k);
  const ImageD bb = detail::filter_valid(detail::product(b, b), k);
  const ImageD ab = detail::filter_valid(detail::product(a, b), k);
  const double c1 = c.c1(), c2 = c.c2();
  double acc = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = aa[i] - ma * ma, vb = bb[i] - mb * mb, cov = ab[i] - ma * mb;
    acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return acc / static_cast<double>(mu_a.size());
}

// ---------------------------------------------------------------------------
// VIF, pixel-domain multiscale form.

struct VifConfig {
  int n_scales = 4;
  double sigma_nsq = 2.0;
  // Images in [0,1] are multiplied by this before evaluation so the noise
  // variance keeps its 8-bit meaning.
  double pixel_scale = 255.0;
};

inline void validate(const VifConfig& c) {
  if (c.n_scales < 1) throw std::invalid_argument("vif: n_scales must be >= 1");
  if (!(c.sigma_nsq > 0)) throw std::invalid_argument("vif: sigma_nsq must be > 0");
  if (!(c.pixel_scale > 0)) throw std::invalid_argument("vif: pixel_scale must be > 0");
}

/// Smallest square side the configured scale pyramid accepts.
inline int vif_min_size(const VifConfig& c) {
  for (int side = 1; side < (1 << 20); ++side) {
    int s = side;
    bool ok = true;
    for (int scale = 1; scale <= c.n_scales && ok; ++scale) {
      const int n = (1 << (c.n_scales - scale + 1)) + 1;
      if (scale > 1) {
        s = s - n + 1;
        if (s <= 0) ok = false;
        s = (s + 1) / 2;
      }
      if (s - n + 1 <= 0) ok = false;
    }
    if (ok) return side;
  }
  return -1;
}

/// Information in y_hat about the scene relative to the information in the
/// reference y, summed over scales. 1 for identical inputs.
template <class T>
double vif(const Image<T>& y, const Image<T>& y_hat, const VifConfig& cfg = {}) {
  validate(cfg);
  expect_same_dims(y, y_hat, "vif");
  const int need = vif_min_size(cfg);
  if (y.rows() < need || y.cols() < need) {
    throw std::invalid_argument("vif: image smaller than the coarsest scale needs (" +
                                std::to_string(need) + " px)");
  }
  constexpr double tiny = 1e-10;
  ImageD ref = detail::scaled(y, cfg.pixel_scale), dist = detail::scaled(y_hat, cfg.pixel_scale);
  double num = 0, den = 0;
  for (int scale = 1; scale <= cfg.n_scales; ++scale) {
    const int n = (1 << (cfg.n_scales - scale + 1)) + 1;
    const auto k = detail::gaussian_kernel(n, n / 5.0);
    if (scale > 1) {
      ref = detail::filter_valid(ref, k);
      dist = detail::filter_valid(dist, k);
      ImageD r2((ref.rows() + 1) / 2, (ref.cols() + 1) / 2), d2(r2.rows(), r2.cols());
      for (int r = 0; r < r2.rows(); ++r) {
        for (int c = 0; c < r2.cols(); ++c) {
          r2(r, c) = ref(2 * r, 2 * c);
          d2(r, c) = dist(2 * r, 2 * c);
        }
      }
      ref = std::move(r2);
      dist = std::move(d2);
    }
    const ImageD mu1 = detail::filter_valid(ref, k), mu2 = detail::filter_valid(dist, k);
    const ImageD f11 = detail::filter_valid(detail::product(ref, ref), k);
    const ImageD f22 = detail::filter_valid(detail::product(dist, dist), k);
    const ImageD f12 = detail::filter_valid(detail::product(ref, dist), k);
    for (std::size_t i = 0; i < mu1.size(); ++i) {
      double s1 = std::max(0.0, f11[i] - mu1[i] * mu1[i]);
      const double s2 = std::max(0.0, f22[i] - mu2[i] * mu2[i]);
      const double s12 = f12[i] - mu1[i] * mu2[i];
      double g = s12 / (s1 + tiny);
      double sv = s2 - g * s12;
      if (s1 < tiny) {
        g = 0;
        sv = s2;
        s1 = 0;
      }
      if (s2 < tiny) {
        g = 0;
        sv = 0;
      }
      if (g < 0) {
        sv = s2;
        g = 0;
      }
      if (sv <= tiny) sv = tiny;
      num += std::log10(1 + g * g * s1 / (sv + cfg.sigma_nsq));
      den += std::log10(1 + s1 / cfg.sigma_nsq);
    }
  }
  if (den <= 0) throw std::domain_error("vif: reference image carries no information (constant?)");
  return num / den;
}

// ---------------------------------------------------------------------------
// Statistics

struct KruskalWallis {
  double h = 0;
  double p_value = 1;
  int dof = 0;
};

/// H statistic with average ranks and tie correction; p from chi-squared with k-1 dof.
inline KruskalWallis kruskal_wallis(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw std::invalid_argument("kruskal_wallis: need at least 2 groups");
  struct Obs {
    double v;
    std::size_t g;
  };
  std::vector<Obs> all;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) {
      throw std::invalid_argument("kruskal_wallis: group " + std::to_string(g) + " is empty");
    }
    for (double v : groups[g]) {
      if (!std::isfinite(v)) throw std::invalid_argument("kruskal_wallis: non-finite value");
      all.push_back({v, g});
    }
  }
  std::sort(all.begin(), all.end(), [](const Obs& a, const Obs& b) { return a.v < b.v; });
  const double n = static_cast<double>(all.size());
  std::vector<double> rank_sum(groups.size(), 0.0);
  double tie_term = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].v == all[i].v) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) rank_sum[all[t].g] += avg;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  KruskalWallis out;
  out.dof = static_cast<int>(groups.size()) - 1;
  const double correction = 1.0 - tie_term / (n * n * n - n);
  if (correction <= 0) return out;  // every value identical
  double s = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    s += rank_sum[g] * rank_sum[g] / static_cast<double>(groups[g].size());
  }
  out.h = (12.0 / (n * (n + 1)) * s - 3 * (n + 1)) / correction;
  out.h = std::max(out.h, 0.0);
  out.p_value = boost::math::gamma_q(out.dof / 2.0, out.h / 2.0);
  return out;
}

// ---------------------------------------------------------------------------
// Per-pair results and aggregation

struct MetricResult {
  std::string pair_id;
  int fold_index = 0;
  std::string acr_category = "unreported";
  double mse = 0;
  double psnr_db = 0;
  double vif = 0;
  double ssim = 0;
};

struct MetricOptions {
  SsimConstants ssim;
  VifConfig vif;
  PsnrOptions psnr;
};

template <class T>
MetricResult evaluate_pair(const Image<T>& y, const Image<T>& y_hat, const MetricOptions& opt = {}) {
  MetricResult r;
  r.mse = mse(y, y_hat);
  r.psnr_db = psnr(y, y_hat, opt.psnr);
  r.ssim = ssim(y, y_hat, opt.ssim);
  r.vif = vif(y, y_hat, opt.vif);
  return r;
}

enum class Metric { mse, psnr, vif, ssim };
inline constexpr Metric kAllMetrics[] = {Metric::mse, Metric::psnr, Metric::vif, Metric::ssim};

inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::mse:
      return "MSE";
    case Metric::psnr:
      return "PSNR";
    case Metric::vif:
      return "VIF";
    case Metric::ssim:
      return "SSIM";
  }
  return "?";
}

inline bool lower_is_better(Metric m) { return m == Metric::mse; }

inline double value_of(const MetricResult& r, Metric m) {
  switch (m) {
    case Metric::mse:
      return r.mse;
    case Metric::psnr:
      return r.psnr_db;
    case Metric::vif:
      return r.vif;
    case Metric::ssim:
      return r.ssim;
  }
  return 0;
}

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample (n-1); 0 for a single value
  int n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd out;
  out.n = static_cast<int>(v.size());
  if (v.empty()) return out;
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return out;
}

/// Mean ± std across fold-level means, one entry per metric.
struct Aggregate {
  std::map<Metric, MeanStd> by_metric;
  int n_pairs = 0;
};

namespace detail {
inline Aggregate aggregate_folds(const std::vector<const MetricResult*>& rs) {
  std::map<int, std::vector<const MetricResult*>> folds;
  for (auto* r : rs) folds[r->fold_index].push_back(r);
  Aggregate out;
  out.n_pairs = static_cast<int>(rs.size());
  for (Metric m : kAllMetrics) {
    std::vector<double> fold_means;
    for (auto& [f, members] : folds) {
      double s = 0;
      for (auto* r : members) s += value_of(*r, m);
      fold_means.push_back(s / members.size());
    }
    out.by_metric[m] = mean_std(fold_means);
  }
  return out;
}
}  // namespace detail

/// Pairs averaged within each fold, then mean ± sample std across folds.
/// An infinite PSNR propagates into its fold mean.
inline Aggregate aggregate(const std::vector<MetricResult>& results) {
  if (results.empty()) throw std::invalid_argument("aggregate: no results");
  std::vector<const MetricResult*> rs;
  for (auto& r : results) rs.push_back(&r);
  return detail::aggregate_folds(rs);
}

/// Same aggregation within each ACR category.
inline std::map<std::string, Aggregate> aggregate_by_acr(const std::vector<MetricResult>& results) {
  std::map<std::string, std::vector<const MetricResult*>> by;
  for (auto& r : results) by[r.acr_category].push_back(&r);
  std::map<std::string, Aggregate> out;
  for (auto& [acr, rs] : by) out[acr] = detail::aggregate_folds(rs);
  return out;
}

// ---------------------------------------------------------------------------
// Line-delimited persistence. Infinite PSNR is written as null.

inline nlohmann::json to_json(const MetricResult& r) {
  nlohmann::json out = {
      {"pair_id", r.pair_id},   {"fold_index", r.fold_index}, {"acr_category", r.acr_category},
      {"mse", r.mse},           {"vif", r.vif},               {"ssim", r.ssim}};
  out["psnr_db"] = std::isinf(r.psnr_db) ? nlohmann::json(nullptr) : nlohmann::json(r.psnr_db);
  return out;
}

inline MetricResult metric_result_from_json(const nlohmann::json& j) {
  MetricResult r;
  r.pair_id = j.at("pair_id").get<std::string>();
  r.fold_index = j.at("fold_index").get<int>();
  r.acr_category = j.at("acr_category").get<std::string>();
  r.mse = j.at("mse").get<double>();
  r.vif = j.at("vif").get<double>();
  r.ssim = j.at("ssim").get<double>();
  r.psnr_db = j.at("psnr_db").is_null() ? kPsnrInfinite : j.at("psnr_db").get<double>();
  return r;
}

}  // namespace vce::metrics
