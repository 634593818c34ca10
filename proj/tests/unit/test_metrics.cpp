#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "support/fixture_images.hpp"
#include "vce/metrics.hpp"

using namespace vce;
using namespace vce::metrics;
namespace vt = vce::testing;

namespace {

ImageD random_image(Rng& rng, int n, int m) {
  ImageD img(n, m);
  for (auto& v : img.pixels()) v = rng.uniform();
  return img;
}

double loop_mse(const ImageD& a, const ImageD& b) {
  double s = 0;
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < a.cols(); ++c) s += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
  return s / (a.rows() * a.cols());
}

TEST(Mse, ForcedValuesAndLoopOracle) {
  ImageD ones(4, 4, 1.0), zeros(4, 4, 0.0);
  EXPECT_EQ(mse(ones, ones), 0.0);
  EXPECT_EQ(mse(ones, zeros), 1.0);
  Rng rng(3);
  auto a = random_image(rng, 16, 16), b = random_image(rng, 16, 16);
  EXPECT_NEAR(mse(a, b), loop_mse(a, b), 1e-12);
  EXPECT_EQ(mse(a, b), mse(b, a));
  EXPECT_THROW(mse(a, ImageD(16, 15)), std::invalid_argument);
}

TEST(Psnr, ClosedFormAndSentinel) {
  // max(y) = 1 and every error 0.5: mse 0.25 -> 10 log10(4)
  ImageD y(2, 2, 0.5), yh(2, 2, 0.0);
  y(0, 0) = 1.0;
  yh(0, 0) = 0.5;
  EXPECT_NEAR(psnr(y, yh), 10 * std::log10(4.0), 1e-12);
  EXPECT_NEAR(psnr(y, yh), 6.0206, 1e-4);
  EXPECT_EQ(psnr(y, y), kPsnrInfinite);
  EXPECT_THROW(psnr(ImageD(2, 2, 0.0), yh), std::domain_error);
}

TEST(Psnr, PeakComesFromTargetSoNotSymmetric) {
  ImageD y(2, 2, 0.5), yh(2, 2, 0.25);
  y(0, 0) = 1.0;
  EXPECT_NE(psnr(y, yh), psnr(yh, y));
  EXPECT_NEAR(psnr(y, yh, {.fixed_peak = 1.0}), 10 * std::log10(1.0 / mse(y, yh)), 1e-12);
}

TEST(Psnr, QualityBands) {
  EXPECT_EQ(psnr_band(30.0), "excellent");
  EXPECT_EQ(psnr_band(21.0), "bad");
  EXPECT_EQ(psnr_band(26.0), "acceptable");
}

TEST(Ssim, IdentitySymmetryAndErrors) {
  Rng rng(5);
  auto a = random_image(rng, 32, 32), b = random_image(rng, 32, 32);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-14);
  EXPECT_THROW(ssim(ImageD(10, 10), ImageD(10, 10)), std::invalid_argument);
}

TEST(Vif, IdentityAndMinimumSize) {
  Rng rng(6);
  auto a = random_image(rng, 64, 64);
  EXPECT_NEAR(vif(a, a), 1.0, 1e-9);
  EXPECT_THROW(vif(ImageD(32, 32, 0.5), ImageD(32, 32, 0.5)), std::invalid_argument);
  EXPECT_THROW(vif(ImageD(64, 64, 0.5), ImageD(64, 64, 0.5)), std::domain_error);
}

class MetricOracle : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { fixture_ = new nlohmann::json(vt::load_fixture("metric_oracle.json")); }
  static void TearDownTestSuite() { delete fixture_; }
  static nlohmann::json* fixture_;
};
nlohmann::json* MetricOracle::fixture_ = nullptr;

TEST_F(MetricOracle, FiftyPairsAgreeWithReferences) {
  const auto& pairs = (*fixture_)["pairs"];
  ASSERT_EQ(pairs.size(), 50u);
  for (const auto& p : pairs) {
    auto [y, yh] = vt::fixture_pair(p["seed"].get<std::uint64_t>(), 64, p["noise_shift"].get<int>());
    SCOPED_TRACE(p["seed"].get<int>());
    EXPECT_NEAR(mse(y, yh), p["mse"].get<double>(), 1e-10);
    EXPECT_NEAR(psnr(y, yh), p["psnr"].get<double>(), 1e-10);
    EXPECT_NEAR(ssim(y, yh), p["ssim"].get<double>(), 1e-4);
    EXPECT_NEAR(vif(y, yh), p["vif"].get<double>(), 1e-3);
  }
}

TEST_F(MetricOracle, PinnedDegradations) {
  const auto& pins = (*fixture_)["pins"];
  auto [y, unused] = vt::fixture_pair(pins["blur_seed"].get<std::uint64_t>(), 64, 48);
  ImageD yc(60, 60), blurred(60, 60);
  for (int r = 0; r < 60; ++r) {
    for (int c = 0; c < 60; ++c) {
      yc(r, c) = y(r + 2, c + 2);
      double s = 0;
      for (int dr = 0; dr < 5; ++dr)
        for (int dc = 0; dc < 5; ++dc) s += y(r + dr, c + dc);
      blurred(r, c) = s / 25;
    }
  }
  const double v = vif(yc, blurred);
  EXPECT_NEAR(v, pins["vif_box5_blur"].get<double>(), 1e-3);
  EXPECT_LT(v, 0.5);
  EXPECT_NEAR(ssim(yc, blurred), pins["ssim_box5_blur"].get<double>(), 1e-4);

  ImageD checker(64, 64), inverse(64, 64);
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 64; ++c) {
      checker(r, c) = ((r + c) / 4 % 2) * 0.8 + 0.1;
      inverse(r, c) = 1 - checker(r, c);
    }
  const double s = ssim(checker, inverse);
  EXPECT_NEAR(s, pins["ssim_checker_vs_inverse"].get<double>(), 1e-4);
  EXPECT_LT(s, 0.5);
}

TEST(Metrics, NoiseMonotonicity) {
  Rng rng(8);
  auto [y, unused] = vt::fixture_pair(99, 64, 48);
  double last_psnr = kPsnrInfinite, last_ssim = 1.0, last_vif = 1.0;
  for (double sigma : {0.01, 0.03, 0.1, 0.3}) {
    double p = 0, s = 0, v = 0;
    constexpr int draws = 5;
    for (int d = 0; d < draws; ++d) {
      ImageD noisy = y;
      for (auto& px : noisy.pixels()) px += sigma * rng.normal();
      p += psnr(y, noisy);
      s += ssim(y, noisy);
      v += vif(y, noisy);
    }
    EXPECT_LT(p / draws, last_psnr);
    EXPECT_LT(s / draws, last_ssim);
    EXPECT_LT(v / draws, last_vif);
    last_psnr = p / draws, last_ssim = s / draws, last_vif = v / draws;
  }
}

TEST(KruskalWallis, HandRankedSeparation) {
  // ranks 1,2,3 vs 4,5,6: H = 12/(6*7) * (36/3 + 225/3) - 21 = 27/7
  auto r = kruskal_wallis({{1, 2, 3}, {101, 102, 103}});
  EXPECT_NEAR(r.h, 27.0 / 7.0, 1e-12);
  EXPECT_EQ(r.dof, 1);
  EXPECT_LT(r.p_value, 0.05);
  auto same = kruskal_wallis({{1, 2, 3}, {1, 2, 3}});
  EXPECT_NEAR(same.h, 0.0, 1e-12);
  EXPECT_NEAR(same.p_value, 1.0, 1e-12);
  auto flat = kruskal_wallis({{2, 2}, {2, 2, 2}});
  EXPECT_EQ(flat.h, 0.0);
  EXPECT_EQ(flat.p_value, 1.0);
  EXPECT_THROW(kruskal_wallis({{1, 2}}), std::invalid_argument);
  EXPECT_THROW(kruskal_wallis({{1, 2}, {}}), std::invalid_argument);
}

TEST(KruskalWallis, MatchesReferenceOnHundredSets) {
  const auto fx = vt::load_fixture("kruskal_oracle.json");
  ASSERT_EQ(fx["sets"].size(), 100u);
  for (const auto& s : fx["sets"]) {
    auto r = kruskal_wallis(s["groups"].get<std::vector<std::vector<double>>>());
    EXPECT_NEAR(r.h, s["h"].get<double>(), 1e-8);
    // near H = 0 the 1-dof tail has infinite slope, so p is compared loosely
    EXPECT_NEAR(r.p_value, s["p"].get<double>(), 1e-6);
  }
}

MetricResult result(int fold, double v, std::string acr = "a") {
  MetricResult r;
  r.fold_index = fold;
  r.acr_category = std::move(acr);
  r.mse = r.psnr_db = r.vif = r.ssim = v;
  return r;
}

TEST(Aggregate, FoldMeansThenSampleStd) {
  auto one = aggregate({result(0, 0.5), result(0, 0.7)});
  EXPECT_NEAR(one.by_metric[Metric::ssim].mean, 0.6, 1e-12);
  EXPECT_EQ(one.by_metric[Metric::ssim].std, 0.0);
  // fold means 0.2 and 0.4
  auto two = aggregate({result(0, 0.1), result(0, 0.3), result(1, 0.4)});
  EXPECT_NEAR(two.by_metric[Metric::mse].mean, 0.3, 1e-12);
  EXPECT_NEAR(two.by_metric[Metric::mse].std, std::sqrt(0.02), 1e-12);
  EXPECT_THROW(aggregate({}), std::invalid_argument);
}

TEST(Aggregate, PermutationInvariantAndAcrSplit) {
  std::vector<MetricResult> rs;
  Rng rng(4);
  for (int i = 0; i < 40; ++i) rs.push_back(result(i % 4, rng.uniform(), std::string(1, "abcd"[i % 3])));
  auto base = aggregate(rs);
  std::mt19937 g(1);
  std::shuffle(rs.begin(), rs.end(), g);
  auto shuffled = aggregate(rs);
  for (Metric m : kAllMetrics) {
    EXPECT_NEAR(base.by_metric[m].mean, shuffled.by_metric[m].mean, 1e-12);
    EXPECT_NEAR(base.by_metric[m].std, shuffled.by_metric[m].std, 1e-12);
  }
  auto acr = aggregate_by_acr(rs);
  EXPECT_EQ(acr.size(), 3u);
  EXPECT_EQ(acr["a"].n_pairs + acr["b"].n_pairs + acr["c"].n_pairs, 40);
}

TEST(MetricResultJson, RoundTripWithInfinitePsnr) {
  MetricResult r = result(3, 0.25, "c");
  r.pair_id = "P01_CC_L_0";
  r.psnr_db = kPsnrInfinite;
  auto back = metric_result_from_json(nlohmann::json::parse(to_json(r).dump()));
  EXPECT_EQ(back.pair_id, r.pair_id);
  EXPECT_EQ(back.fold_index, 3);
  EXPECT_EQ(back.acr_category, "c");
  EXPECT_TRUE(std::isinf(back.psnr_db));
  EXPECT_EQ(back.ssim, 0.25);
}

}  // namespace
