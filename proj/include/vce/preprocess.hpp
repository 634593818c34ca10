#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vce/image.hpp"
#include "vce/random.hpp"

namespace vce::preprocess {

struct PreprocessConfig {
  int target_size = 256;
  double stretch_low_pct = 2.0;
  double stretch_high_pct = 98.0;
  double stretch_output_max = 65535.0;
};

inline void validate(const PreprocessConfig& c) {
  if (c.target_size < 1) throw std::invalid_argument("preprocess.target_size must be >= 1");
  if (!(c.stretch_low_pct >= 0 && c.stretch_high_pct <= 100 &&
        c.stretch_low_pct < c.stretch_high_pct)) {
    throw std::invalid_argument(
        "preprocess: need 0 <= stretch_low_pct < stretch_high_pct <= 100");
  }
  if (!(c.stretch_output_max > 0)) {
    throw std::invalid_argument("preprocess.stretch_output_max must be > 0");
  }
}

// ---------------------------------------------------------------------------

/// Zero-pads the short side to make the image square. The padding goes on the
/// side opposite the brighter edge (the chest wall); equal edges split the
/// padding with the smaller half before the image.
template <class T>
Image<T> pad_to_square(const Image<T>& img) {
  const int n = std::max(img.rows(), img.cols());
  if (img.rows() == img.cols()) return img;
  const bool wide = img.cols() > img.rows();
  const int missing = wide ? img.cols() - img.rows() : img.rows() - img.cols();
  // mean of the two edges across which padding would be added
  double first = 0, last = 0;
  if (wide) {
    for (int c = 0; c < img.cols(); ++c) {
      first += img(0, c);
      last += img(img.rows() - 1, c);
    }
  } else {
    for (int r = 0; r < img.rows(); ++r) {
      first += img(r, 0);
      last += img(r, img.cols() - 1);
    }
  }
  int before = missing / 2;
  if (first > last) before = 0;
  if (last > first) before = missing;
  Image<T> out(n, n, T{0});
  const int r0 = wide ? before : 0, c0 = wide ? 0 : before;
  for (int r = 0; r < img.rows(); ++r)
    for (int c = 0; c < img.cols(); ++c) out(r + r0, c + c0) = img(r, c);
  return out;
}

/// Linear-interpolated percentile (numpy's default "linear" method).
inline double percentile(std::vector<double> v, double pct) {
  if (v.empty()) throw std::invalid_argument("percentile: empty input");
  std::sort(v.begin(), v.end());
  const double pos = pct / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct StretchResult {
  ImageD image;
  std::optional<std::string> warning;
};

/// Maps the low percentile to 0 and the high percentile to stretch_output_max,
/// clipping outside.
template <class T>
StretchResult contrast_stretch(const Image<T>& img, const PreprocessConfig& cfg = {}) {
  validate(cfg);
  std::vector<double> v(img.pixels().begin(), img.pixels().end());
  const double lo = percentile(v, cfg.stretch_low_pct);
  const double hi = percentile(std::move(v), cfg.stretch_high_pct);
  StretchResult out{ImageD(img.rows(), img.cols(), 0.0), std::nullopt};
  if (!(hi > lo)) {
    out.warning = "contrast_stretch: degenerate percentile range (constant image); output is zero";
    return out;
  }
  const double s = cfg.stretch_output_max / (hi - lo);
  for (std::size_t i = 0; i < img.size(); ++i) {
    out.image[i] = std::clamp((static_cast<double>(img[i]) - lo) * s, 0.0, cfg.stretch_output_max);
  }
  return out;
}

/// (v - min) / (max - min); a constant image maps to zeros.
template <class T>
ImageD normalize(const Image<T>& img) {
  ImageD out(img.rows(), img.cols(), 0.0);
  if (img.empty()) return out;
  const auto [mn, mx] = std::minmax_element(img.pixels().begin(), img.pixels().end());
  const double lo = *mn, range = static_cast<double>(*mx) - lo;
  if (!(range > 0)) return out;
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = (static_cast<double>(img[i]) - lo) / range;
  return out;
}

/// Bilinear resampling with pixel-centre alignment: source coordinate
/// (i + 0.5) * in / out - 0.5, clamped to the image. Halving therefore
/// averages each 2x2 block. No antialiasing prefilter.
inline ImageD resize(const ImageD& img, int target) {
  if (!img.square()) throw std::invalid_argument("resize: input must be square");
  if (target < 1) throw std::invalid_argument("resize: target must be >= 1");
  const int n = img.rows();
  if (n == target) return img;
  if (n == 0) throw std::invalid_argument("resize: empty image");
  const double scale = static_cast<double>(n) / target;
  struct Tap {
    int i0, i1;
    double w1;
  };
  std::vector<Tap> taps(target);
  for (int i = 0; i < target; ++i) {
    const double s = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(n - 1));
    const int i0 = static_cast<int>(std::floor(s));
    taps[i] = {i0, std::min(i0 + 1, n - 1), s - i0};
  }
  ImageD out(target, target);
  for (int r = 0; r < target; ++r) {
    const Tap& tr = taps[r];
    for (int c = 0; c < target; ++c) {
      const Tap& tc = taps[c];
      const double top = img(tr.i0, tc.i0) * (1 - tc.w1) + img(tr.i0, tc.i1) * tc.w1;
      const double bot = img(tr.i1, tc.i0) * (1 - tc.w1) + img(tr.i1, tc.i1) * tc.w1;
      out(r, c) = std::clamp(top * (1 - tr.w1) + bot * tr.w1, 0.0, 1.0);
    }
  }
  return out;
}

struct ChainResult {
  ImageD image;
  std::vector<std::string> warnings;
};

/// pad -> stretch -> normalize -> resize. Output is square, in [0, 1].
template <class T>
ChainResult run_chain(const Image<T>& raw, const PreprocessConfig& cfg = {}) {
  validate(cfg);
  ChainResult out;
  auto stretched = contrast_stretch(pad_to_square(raw), cfg);
  if (stretched.warning) out.warnings.push_back(*stretched.warning);
  out.image = resize(normalize(stretched.image), cfg.target_size);
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double max_shift_frac = 0.10;
  double max_zoom_frac = 0.10;
  double hflip_prob = 0.5;
  double max_rotation_deg = 15.0;
  std::uint64_t seed = 0;
};

inline void validate(const AugmentConfig& c) {
  if (!(c.max_shift_frac >= 0 && c.max_shift_frac <= 1)) {
    throw std::invalid_argument("augment.max_shift_frac must be in [0, 1]");
  }
  if (!(c.max_zoom_frac >= 0 && c.max_zoom_frac < 1)) {
    throw std::invalid_argument("augment.max_zoom_frac must be in [0, 1)");
  }
  if (!(c.hflip_prob >= 0 && c.hflip_prob <= 1)) {
    throw std::invalid_argument("augment.hflip_prob must be in [0, 1]");
  }
  if (!(c.max_rotation_deg >= 0)) throw std::invalid_argument("augment.max_rotation_deg must be >= 0");
}

/// One sampled transform. Shifts are in pixels.
struct AugmentParams {
  double shift_x = 0;
  double shift_y = 0;
  double zoom = 1;
  bool hflip = false;
  double rotation_deg = 0;

  friend bool operator==(const AugmentParams&, const AugmentParams&) = default;
};

inline void to_json(nlohmann::json& j, const AugmentParams& p) {
  j = {{"shift_x", p.shift_x}, {"shift_y", p.shift_y}, {"zoom", p.zoom},
       {"hflip", p.hflip},     {"rotation_deg", p.rotation_deg}};
}
inline void from_json(const nlohmann::json& j, AugmentParams& p) {
  p.shift_x = j.at("shift_x").get<double>();
  p.shift_y = j.at("shift_y").get<double>();
  p.zoom = j.at("zoom").get<double>();
  p.hflip = j.at("hflip").get<bool>();
  p.rotation_deg = j.at("rotation_deg").get<double>();
}

/// Horizontal and vertical shifts are drawn independently.
inline AugmentParams sample_augment(const AugmentConfig& c, int rows, int cols, Rng& rng) {
  validate(c);
  AugmentParams p;
  p.shift_x = rng.uniform(-c.max_shift_frac, c.max_shift_frac) * cols;
  p.shift_y = rng.uniform(-c.max_shift_frac, c.max_shift_frac) * rows;
  p.zoom = rng.uniform(1 - c.max_zoom_frac, 1 + c.max_zoom_frac);
  p.hflip = rng.bernoulli(c.hflip_prob);
  p.rotation_deg = rng.uniform(-c.max_rotation_deg, c.max_rotation_deg);
  return p;
}

/// Flip, then rotate and zoom about the centre, then shift. Output pixels are
/// bilinear samples of the input through the inverse map; samples outside
/// the frame read 0.
template <class T>
Image<T> apply_augment(const Image<T>& img, const AugmentParams& p) {
  const int rows = img.rows(), cols = img.cols();
  Image<T> out(rows, cols, T{0});
  const double cy = (rows - 1) / 2.0, cx = (cols - 1) / 2.0;
  const double th = p.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  auto at = [&](int r, int c) -> double {
    return (r < 0 || c < 0 || r >= rows || c >= cols) ? 0.0 : static_cast<double>(img(r, c));
  };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double dy = r - cy - p.shift_y, dx = c - cx - p.shift_x;
      // inverse rotation and zoom
      const double sy = cy + (cs * dy - sn * dx) / p.zoom;
      double sx = cx + (sn * dy + cs * dx) / p.zoom;
      if (p.hflip) sx = (cols - 1) - sx;
      if (sy <= -1 || sx <= -1 || sy >= rows || sx >= cols) continue;
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const double wy = sy - y0, wx = sx - x0;
      double v = 0;
      if (wy == 0 && wx == 0) {
        v = at(y0, x0);
      } else {
        v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1)) +
            wy * ((1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1));
      }
      out(r, c) = static_cast<T>(v);
    }
  }
  return out;
}

template <class T>
struct AugmentedPair {
  Image<T> x;
  Image<T> y;
  AugmentParams params;
};

/// Samples one transform and applies it to both images of a pair.
template <class T>
AugmentedPair<T> augment(const Image<T>& x, const Image<T>& y, const AugmentConfig& c, Rng& rng) {
  expect_same_dims(x, y, "augment");
  const AugmentParams p = sample_augment(c, x.rows(), x.cols(), rng);
  return {apply_augment(x, p), apply_augment(y, p), p};
}

}  // namespace vce::preprocess
