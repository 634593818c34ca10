#include <gtest/gtest.h>

#include "support/published_tables.hpp"
#include "vce/report.hpp"

using namespace vce;
using metrics::Metric;
namespace vt = vce::testing;

using vt::agg;
using vt::published_acr;
using vt::published_models;

namespace {

std::vector<bool> flags(const report::ModelTable& t, Metric m) { return t.flags.at(m).best; }

}  // namespace

TEST(ModelTable, PublishedMeansGiveThePublishedBolding) {
  const auto t = report::model_table(published_models());
  // rows: Autoencoder, Pix2Pix, CycleGAN
  EXPECT_EQ(flags(t, Metric::mse), (std::vector<bool>{false, false, true}));
  EXPECT_EQ(flags(t, Metric::psnr), (std::vector<bool>{false, false, true}));
  EXPECT_EQ(flags(t, Metric::vif), (std::vector<bool>{false, false, true}));
  EXPECT_EQ(flags(t, Metric::ssim), (std::vector<bool>{false, true, false}));
  for (Metric m : metrics::kAllMetrics) EXPECT_FALSE(t.flags.at(m).tie);
  const auto text = report::render_model_table_text(t);
  EXPECT_NE(text.find("26.4866 ± 0.9206 *"), std::string::npos) << text;
  EXPECT_NE(text.find("0.8575 ± 0.0132 *"), std::string::npos);
  EXPECT_EQ(text.find("0.8492 ± 0.0131 *"), std::string::npos);
}

TEST(ModelTable, SingleModelIsBestEverywhere) {
  const auto t = report::model_table({published_models()[0]});
  for (Metric m : metrics::kAllMetrics) EXPECT_EQ(flags(t, m), std::vector<bool>{true});
}

TEST(ModelTable, TiesFlagBothAndAreNoted) {
  auto rows = published_models();
  rows[0].second.by_metric[Metric::ssim].mean = 0.8575;
  const auto t = report::model_table(rows);
  EXPECT_EQ(flags(t, Metric::ssim), (std::vector<bool>{true, true, false}));
  EXPECT_TRUE(t.flags.at(Metric::ssim).tie);
  EXPECT_NE(report::render_model_table_text(t).find("tie in SSIM"), std::string::npos);
  const auto csv = report::render_model_table_csv(t);
  EXPECT_NE(csv.find("Autoencoder,0.008300,0.003600,0,0,"), std::string::npos) << csv;
}

TEST(ModelTable, DirectionMatters) {
  // same numbers, MSE lower-is-better but PSNR higher-is-better
  std::vector<std::pair<std::string, metrics::Aggregate>> rows{{"A", agg(1, 0, 1, 0, 1, 0, 1, 0)},
                                                               {"B", agg(2, 0, 2, 0, 2, 0, 2, 0)}};
  const auto t = report::model_table(rows);
  EXPECT_EQ(flags(t, Metric::mse), (std::vector<bool>{true, false}));
  EXPECT_EQ(flags(t, Metric::psnr), (std::vector<bool>{false, true}));
}

TEST(ModelTable, ByteIdenticalOnRepeat) {
  const auto a = report::render_model_table_text(report::model_table(published_models()));
  const auto b = report::render_model_table_text(report::model_table(published_models()));
  EXPECT_EQ(a, b);
  EXPECT_EQ(report::render_model_table_csv(report::model_table(published_models())),
            report::render_model_table_csv(report::model_table(published_models())));
}

TEST(AcrTable, PublishedMeansGiveThePublishedBolding) {
  // index into a, b, c, d of the bold entry per metric
  const auto bold = vt::published_acr_bold();
  std::vector<report::AcrBlock> blocks;
  for (const auto& [model, per_metric] : bold) {
    const auto b = report::acr_block(model, published_acr(model));
    for (const auto& [m, idx] : per_metric) {
      std::vector<bool> want(4, false);
      want[idx] = true;
      EXPECT_EQ(b.flags.at(m).best, want) << model << " " << metrics::to_string(m);
    }
    blocks.push_back(b);
  }
  const auto text = report::render_acr_table_text(blocks);
  EXPECT_NE(text.find("0.1982 ± 0.0147 *"), std::string::npos) << text;
  EXPECT_NE(text.find("KW p"), std::string::npos);
}

TEST(AcrTable, KruskalWallisFromPerPairResults) {
  std::vector<metrics::MetricResult> rs;
  for (int i = 0; i < 40; ++i) {
    metrics::MetricResult r;
    r.pair_id = "p" + std::to_string(i);
    r.fold_index = i % 4;
    r.acr_category = std::string(1, static_cast<char>('a' + i % 4));
    r.mse = 0.01 + 0.001 * (i % 7);
    r.psnr_db = 20 + (i % 4) * 5;  // separates the categories completely
    r.vif = 0.2;
    r.ssim = 0.8;
    rs.push_back(r);
  }
  const auto b = report::acr_block("M", rs);
  ASSERT_TRUE(b.kw_p.at(Metric::psnr).has_value());
  EXPECT_LT(*b.kw_p.at(Metric::psnr), 1e-5);
  EXPECT_DOUBLE_EQ(*b.kw_p.at(Metric::vif), 1.0);
  EXPECT_TRUE(b.flags.at(Metric::vif).tie);
  EXPECT_EQ(b.flags.at(Metric::psnr).best, (std::vector<bool>{false, false, false, true}));
  const auto csv = report::render_acr_table_csv({b});
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Panels, GridLayout) {
  std::vector<report::PanelRow> rows;
  for (int r = 0; r < 4; ++r) {
    report::PanelRow row{std::string(1, static_cast<char>('a' + r)), {}};
    for (int c = 0; c < 5; ++c) row.columns.emplace_back(8, 6, 0.1 * c + 0.01 * r);
    rows.push_back(row);
  }
  const auto img = report::render_panels(rows, 2);
  EXPECT_EQ(img.rows(), 4 * 8 + 3 * 2);
  EXPECT_EQ(img.cols(), 5 * 6 + 4 * 2);
  EXPECT_DOUBLE_EQ(img(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(img(10, 8 + 0), 0.1 + 0.01);  // row 1, column 1
  EXPECT_DOUBLE_EQ(img(8, 0), 1.0);                // gap
  rows[1].columns.pop_back();
  EXPECT_THROW(report::render_panels(rows), std::invalid_argument);
}

TEST(StudyChart, SvgCarriesTheRates) {
  const auto svg = report::render_study_chart({1.0, 2.0 / 13.0, 0.8, 0.8});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find(">100.0%<"), std::string::npos);
  EXPECT_NE(svg.find(">15.4%<"), std::string::npos);
  EXPECT_NE(svg.find(">80.0%<"), std::string::npos);
  EXPECT_EQ(svg, report::render_study_chart({1.0, 2.0 / 13.0, 0.8, 0.8}));
}
