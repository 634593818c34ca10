#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "vce/io.hpp"
#include "vce/random.hpp"
#include "vce/trainer.hpp"

namespace vce::synth {

namespace fs = std::filesystem;

/// Toy paired data: x is a few soft Gaussian blobs on a dim background, y is a
/// fixed intensity transform of x.
struct BlobConfig {
  int n_pairs = 500;
  int size = 64;
  int min_blobs = 2;
  int max_blobs = 5;
  double noise = 0.01;
  int pairs_per_patient = 2;
  std::uint64_t seed = 7;
};

inline double blob_target(double v) { return std::clamp(0.1 + 0.8 * v * v, 0.0, 1.0); }

inline ImageD blob_image(int size, const BlobConfig& c, Rng& rng) {
  ImageD img(size, size, 0.0);
  const double bg = rng.uniform(0.05, 0.2);
  const int n = c.min_blobs + static_cast<int>(rng.index(static_cast<std::uint64_t>(c.max_blobs - c.min_blobs + 1)));
  struct Blob { double r, c, s, a; };
  std::vector<Blob> blobs;
  for (int k = 0; k < n; ++k) {
    blobs.push_back({rng.uniform(0.15, 0.85) * size, rng.uniform(0.15, 0.85) * size,
                     rng.uniform(0.05, 0.15) * size, rng.uniform(0.3, 0.8)});
  }
  for (int r = 0; r < size; ++r) {
    for (int q = 0; q < size; ++q) {
      double v = bg;
      for (const auto& b : blobs) {
        const double d2 = (r - b.r) * (r - b.r) + (q - b.c) * (q - b.c);
        v += b.a * std::exp(-d2 / (2 * b.s * b.s));
      }
      img(r, q) = std::clamp(v + c.noise * rng.normal(), 0.0, 1.0);
    }
  }
  return img;
}

inline std::string blob_pair_id(int i) { return "blob" + std::to_string(100000 + i).substr(1); }
inline std::string blob_patient_id(int i, const BlobConfig& c) {
  return "S" + std::to_string(100000 + i / std::max(1, c.pairs_per_patient)).substr(1);
}

template <class T>
std::vector<trainer::PairImages<T>> make_blob_pairs(const BlobConfig& c) {
  if (c.n_pairs < 1 || c.size < 1 || c.min_blobs < 0 || c.max_blobs < c.min_blobs) {
    throw std::invalid_argument("BlobConfig: bad counts");
  }
  std::vector<trainer::PairImages<T>> out;
  Rng base(c.seed);
  for (int i = 0; i < c.n_pairs; ++i) {
    Rng rng = base.fork(static_cast<std::uint64_t>(i));
    const ImageD x = blob_image(c.size, c, rng);
    ImageD y(c.size, c.size);
    for (std::size_t k = 0; k < x.size(); ++k) y[k] = blob_target(x[k]);
    trainer::PairImages<T> p;
    p.meta.pair_id = blob_pair_id(i);
    p.meta.patient_id = blob_patient_id(i, c);
    p.meta.acr_category = std::string(1, static_cast<char>('a' + i % 4));
    p.x = x.cast<T>();
    p.y = y.cast<T>();
    out.push_back(std::move(p));
  }
  return out;
}

/// Writes <dir>/images/<pair>_{x,y}.f32 and <dir>/pairs.jsonl (relative paths).
inline std::vector<trainer::PairSample> write_blob_dataset(const fs::path& dir, const BlobConfig& c) {
  fs::create_directories(dir / "images");
  std::vector<trainer::PairSample> index;
  for (auto& p : make_blob_pairs<float>(c)) {
    io::write_float_image(dir / "images" / (p.meta.pair_id + "_x.f32"), p.x);
    io::write_float_image(dir / "images" / (p.meta.pair_id + "_y.f32"), p.y);
    auto s = p.meta;
    s.x_path = "images/" + p.meta.pair_id + "_x.f32";
    s.y_path = "images/" + p.meta.pair_id + "_y.f32";
    index.push_back(s);
  }
  trainer::write_pair_index(dir / "pairs.jsonl", index);
  return index;
}

}  // namespace vce::synth
