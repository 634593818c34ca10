#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "vce/preprocess.hpp"

using namespace vce;
using namespace vce::preprocess;

namespace {

ImageD random_image(Rng& rng, int r, int c, double lo = 0, double hi = 1) {
  ImageD img(r, c);
  for (auto& v : img.pixels()) v = rng.uniform(lo, hi);
  return img;
}

double sum(const ImageD& img) { return std::accumulate(img.vec().begin(), img.vec().end(), 0.0); }

TEST(PadToSquare, ShapesAndIdentity) {
  ImageD tall(2850, 2396, 1.0);
  auto sq = pad_to_square(tall);
  EXPECT_EQ(sq.rows(), 2850);
  EXPECT_EQ(sq.cols(), 2850);
  Rng rng(1);
  auto s = random_image(rng, 5, 5);
  EXPECT_EQ(pad_to_square(s), s);
}

TEST(PadToSquare, OnesGainZeroColumnOnTheRight) {
  auto out = pad_to_square(ImageD(3, 2, 1.0));
  ASSERT_EQ(out.rows(), 3);
  ASSERT_EQ(out.cols(), 3);
  for (int r = 0; r < 3; ++r) {
    EXPECT_EQ(out(r, 0), 1.0);
    EXPECT_EQ(out(r, 1), 1.0);
    EXPECT_EQ(out(r, 2), 0.0);
  }
  EXPECT_EQ(sum(out), 6.0);
}

TEST(PadToSquare, PadsAwayFromBrightEdge) {
  // bright right edge (chest wall on the right): padding goes left
  ImageD img(4, 2, 0.1);
  for (int r = 0; r < 4; ++r) img(r, 1) = 0.9;
  auto out = pad_to_square(img);
  for (int r = 0; r < 4; ++r) {
    EXPECT_EQ(out(r, 0), 0.0);
    EXPECT_EQ(out(r, 1), 0.0);
    EXPECT_EQ(out(r, 2), 0.1);
    EXPECT_EQ(out(r, 3), 0.9);
  }
  // wide image with bright top row: padding goes below
  auto w = pad_to_square(ImageD(2, 3, 0.5));
  EXPECT_EQ(w.rows(), 3);
  ImageD top(2, 3, 0.1);
  for (int c = 0; c < 3; ++c) top(0, c) = 0.8;
  auto t = pad_to_square(top);
  EXPECT_EQ(t(0, 0), 0.8);
  EXPECT_EQ(t(2, 1), 0.0);
}

TEST(Percentile, MatchesLinearInterpolation) {
  std::vector<double> v{4, 1, 3, 2};
  EXPECT_DOUBLE_EQ(percentile(v, 0), 1);
  EXPECT_DOUBLE_EQ(percentile(v, 100), 4);
  EXPECT_DOUBLE_EQ(percentile(v, 50), 2.5);
  EXPECT_DOUBLE_EQ(percentile(v, 10), 1.3);
}

TEST(ContrastStretch, FullRangeIsScaledIdentity) {
  ImageD img(1, 101);
  for (int i = 0; i <= 100; ++i) img(0, i) = i;
  PreprocessConfig cfg;
  cfg.stretch_low_pct = 0;
  cfg.stretch_high_pct = 100;
  auto out = contrast_stretch(img, cfg);
  EXPECT_FALSE(out.warning);
  for (int i = 0; i <= 100; ++i) EXPECT_NEAR(out.image(0, i), i * 655.35, 1e-9);
}

TEST(ContrastStretch, ConstantImageWarnsAndZeroes) {
  auto out = contrast_stretch(ImageD(3, 3, 7.0));
  ASSERT_TRUE(out.warning);
  for (double v : out.image.pixels()) EXPECT_EQ(v, 0.0);
}

TEST(ContrastStretch, RampAgainstClipOracle) {
  // 5x5 ramp 0..24; 2nd/98th percentiles by hand: 0.02*24 = 0.48, 0.98*24 = 23.52
  ImageD ramp(5, 5);
  for (int i = 0; i < 25; ++i) ramp[i] = i;
  const double lo = 0.48, hi = 23.52;
  auto out = contrast_stretch(ramp);
  for (int i = 0; i < 25; ++i) {
    const double expect = std::min(std::max((i - lo) / (hi - lo), 0.0), 1.0) * 65535;
    EXPECT_LE(std::abs(out.image[i] - expect), 1.0);
  }
  EXPECT_EQ(out.image[0], 0.0);
  EXPECT_EQ(out.image[24], 65535.0);
}

TEST(Normalize, EndpointsIdempotenceAndOracle) {
  ImageD img(1, 3);
  img[0] = 0;
  img[1] = 1000;
  img[2] = 65535;
  auto n = normalize(img);
  EXPECT_EQ(n[0], 0.0);
  EXPECT_EQ(n[2], 1.0);
  Rng rng(2);
  auto r = random_image(rng, 8, 8, -3, 5);
  auto nr = normalize(r);
  const double mn = *std::min_element(r.vec().begin(), r.vec().end());
  const double mx = *std::max_element(r.vec().begin(), r.vec().end());
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(nr[i], (r[i] - mn) / (mx - mn), 1e-12);
  EXPECT_EQ(normalize(nr), nr);
  const auto flat = normalize(ImageD(2, 2, 4.0));
  for (double v : flat.pixels()) EXPECT_EQ(v, 0.0);
}

TEST(Resize, IdentityConstantAndBlockMean) {
  Rng rng(3);
  auto img = random_image(rng, 256, 256);
  EXPECT_EQ(resize(img, 256), img);
  const auto flat = resize(ImageD(37, 37, 0.3), 16);
  for (double v : flat.pixels()) EXPECT_NEAR(v, 0.3, 1e-15);
  ImageD checker(4, 4);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) checker(r, c) = (r + c) % 2 ? 1.0 : 0.0;
  const auto blocks = resize(checker, 2);
  for (double v : blocks.pixels()) EXPECT_DOUBLE_EQ(v, 0.5);
  auto any = random_image(rng, 4, 4);
  auto half = resize(any, 2);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      const double mean = (any(2 * r, 2 * c) + any(2 * r + 1, 2 * c) + any(2 * r, 2 * c + 1) +
                           any(2 * r + 1, 2 * c + 1)) / 4;
      EXPECT_NEAR(half(r, c), mean, 1e-15);
    }
  EXPECT_THROW(resize(ImageD(3, 4), 2), std::invalid_argument);
}

TEST(Chain, OutputsSquareUnitRange) {
  Rng rng(4);
  auto raw = random_image(rng, 90, 70, 0, 4095);
  PreprocessConfig cfg;
  cfg.target_size = 64;
  auto out = run_chain(raw, cfg);
  EXPECT_EQ(out.image.rows(), 64);
  EXPECT_EQ(out.image.cols(), 64);
  for (double v : out.image.pixels()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  EXPECT_TRUE(out.warnings.empty());
  EXPECT_FALSE(run_chain(ImageD(8, 8, 3.0), cfg).warnings.empty());
}

TEST(Config, RejectsBadPercentiles) {
  PreprocessConfig cfg;
  cfg.stretch_low_pct = 50;
  cfg.stretch_high_pct = 50;
  EXPECT_THROW(validate(cfg), std::invalid_argument);
  AugmentConfig a;
  a.max_shift_frac = 1.5;
  EXPECT_THROW(validate(a), std::invalid_argument);
}

TEST(Augment, ZeroConfigIsIdentity) {
  AugmentConfig c{0, 0, 0, 0, 1};
  Rng rng(5);
  auto x = random_image(rng, 16, 16), y = random_image(rng, 16, 16);
  auto out = augment(x, y, c, rng);
  EXPECT_EQ(out.x, x);
  EXPECT_EQ(out.y, y);
}

TEST(Augment, FlipIsInvolution) {
  Rng rng(6);
  auto x = random_image(rng, 9, 12);
  AugmentParams flip;
  flip.hflip = true;
  auto once = apply_augment(x, flip);
  EXPECT_EQ(once(2, 0), x(2, 11));
  EXPECT_EQ(apply_augment(once, flip), x);
}

TEST(Augment, ReplayFromLogReproducesPairBitExactly) {
  AugmentConfig c;
  Rng rng(7);
  auto x = random_image(rng, 32, 32), y = random_image(rng, 32, 32);
  Rng a(99), b(99);
  auto first = augment(x, y, c, a);
  auto second = augment(x, y, c, b);
  EXPECT_EQ(first.params, second.params);
  const auto logged = nlohmann::json(first.params).dump();
  const auto replay = nlohmann::json::parse(logged).get<AugmentParams>();
  EXPECT_EQ(replay, first.params);
  EXPECT_EQ(apply_augment(x, replay), first.x);
  EXPECT_EQ(apply_augment(y, replay), first.y);
}

TEST(Augment, SampledParametersStayInBounds) {
  AugmentConfig c;
  Rng rng(8);
  int flips = 0;
  for (int i = 0; i < 2000; ++i) {
    auto p = sample_augment(c, 100, 200, rng);
    ASSERT_LE(std::abs(p.shift_x), 20.0);
    ASSERT_LE(std::abs(p.shift_y), 10.0);
    ASSERT_GE(p.zoom, 0.9);
    ASSERT_LE(p.zoom, 1.1);
    ASSERT_LE(std::abs(p.rotation_deg), 15.0);
    flips += p.hflip;
  }
  EXPECT_NEAR(flips / 2000.0, 0.5, 0.05);
}

TEST(Augment, ShiftMovesContentAndFillsZero) {
  ImageD x(8, 8, 1.0);
  AugmentParams p;
  p.shift_x = 2;
  auto out = apply_augment(x, p);
  for (int r = 0; r < 8; ++r) {
    EXPECT_EQ(out(r, 0), 0.0);
    EXPECT_EQ(out(r, 1), 0.0);
    EXPECT_EQ(out(r, 2), 1.0);
  }
}

}  // namespace
