#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vce/image.hpp"
#include "vce/metrics.hpp"

namespace vce::report {

using metrics::Aggregate;
using metrics::MeanStd;
using metrics::Metric;

/// Best-entry flags for one column. Every entry whose mean equals the best
/// mean is flagged; `tie` is set when more than one is.
struct ColumnFlags {
  std::vector<bool> best;
  bool tie = false;
};

inline ColumnFlags flag_best(const std::vector<MeanStd>& column, Metric m) {
  ColumnFlags f;
  f.best.assign(column.size(), false);
  std::optional<double> best;
  for (const auto& c : column) {
    if (c.n == 0 || std::isnan(c.mean)) continue;
    if (!best || (metrics::lower_is_better(m) ? c.mean < *best : c.mean > *best)) best = c.mean;
  }
  if (!best) return f;
  int count = 0;
  for (std::size_t i = 0; i < column.size(); ++i) {
    if (column[i].n > 0 && column[i].mean == *best) {
      f.best[i] = true;
      ++count;
    }
  }
  f.tie = count > 1;
  return f;
}

inline int decimals(Metric) { return 4; }  // published tables print four places

inline std::string format_value(double v, int digits = 4) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string format_cell(const MeanStd& c, Metric m) {
  if (c.n == 0) return "n/a";
  return format_value(c.mean, decimals(m)) + " ± " + format_value(c.std, decimals(m));
}

inline std::string header_of(Metric m) {
  return metrics::to_string(m) + (metrics::lower_is_better(m) ? " (lower)" : " (higher)");
}

// ---------------------------------------------------------------------------
// Model table: one row per model, best mean per metric flagged

struct ModelTable {
  std::vector<std::string> models;
  std::map<Metric, std::vector<MeanStd>> cells;
  std::map<Metric, ColumnFlags> flags;
};

inline ModelTable model_table(const std::vector<std::pair<std::string, Aggregate>>& rows) {
  if (rows.empty()) throw std::invalid_argument("model_table: no models");
  ModelTable t;
  for (const auto& [name, agg] : rows) {
    t.models.push_back(name);
    for (Metric m : metrics::kAllMetrics) {
      auto it = agg.by_metric.find(m);
      t.cells[m].push_back(it == agg.by_metric.end() ? MeanStd{} : it->second);
    }
  }
  for (Metric m : metrics::kAllMetrics) t.flags[m] = flag_best(t.cells[m], m);
  return t;
}

namespace detail {

inline std::string pad(const std::string& s, std::size_t w) {
  // width in code points so the ± sign counts once
  std::size_t n = 0;
  for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
  return s + std::string(w > n ? w - n : 0, ' ');
}

inline std::size_t width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
  return n;
}

inline std::string grid(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> w;
  for (const auto& r : rows) {
    if (w.size() < r.size()) w.resize(r.size(), 0);
    for (std::size_t i = 0; i < r.size(); ++i) w[i] = std::max(w[i], width(r[i]));
  }
  std::string out;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::string line;
    for (std::size_t i = 0; i < rows[k].size(); ++i) line += (i ? " | " : "") + pad(rows[k][i], w[i]);
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
    if (k == 0) {
      std::string sep;
      for (std::size_t i = 0; i < w.size(); ++i) sep += (i ? "-+-" : "") + std::string(w[i], '-');
      out += sep + "\n";
    }
  }
  return out;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace detail

/// Plain-text table; best cells carry a trailing '*', tied columns are listed
/// under the table.
inline std::string render_model_table_text(const ModelTable& t) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head{"Model"};
  for (Metric m : metrics::kAllMetrics) head.push_back(header_of(m));
  rows.push_back(head);
  for (std::size_t i = 0; i < t.models.size(); ++i) {
    std::vector<std::string> r{t.models[i]};
    for (Metric m : metrics::kAllMetrics) {
      r.push_back(format_cell(t.cells.at(m)[i], m) + (t.flags.at(m).best[i] ? " *" : ""));
    }
    rows.push_back(r);
  }
  std::string out = detail::grid(rows);
  out += "* best value per column (mean over folds ± sample std)\n";
  for (Metric m : metrics::kAllMetrics) {
    if (t.flags.at(m).tie) out += "tie in " + metrics::to_string(m) + ": all tied entries flagged\n";
  }
  return out;
}

inline std::string render_model_table_csv(const ModelTable& t) {
  std::string out = "model";
  for (Metric m : metrics::kAllMetrics) {
    const auto k = detail::lower(metrics::to_string(m));
    out += "," + k + "_mean," + k + "_std," + k + "_best," + k + "_tie";
  }
  out += "\n";
  for (std::size_t i = 0; i < t.models.size(); ++i) {
    out += detail::csv_escape(t.models[i]);
    for (Metric m : metrics::kAllMetrics) {
      const auto& c = t.cells.at(m)[i];
      out += "," + format_value(c.mean, 6) + "," + format_value(c.std, 6) + "," +
             (t.flags.at(m).best[i] ? "1" : "0") + "," + (t.flags.at(m).tie ? "1" : "0");
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// ACR table: per-model blocks, best category per metric flagged within each
// model, Kruskal-Wallis p across categories

struct AcrBlock {
  std::string model;
  std::vector<std::string> categories;
  std::map<Metric, std::vector<MeanStd>> cells;
  std::map<Metric, ColumnFlags> flags;
  std::map<Metric, std::optional<double>> kw_p;
};

inline const std::vector<std::string>& acr_categories() {
  static const std::vector<std::string> c{"a", "b", "c", "d"};
  return c;
}

inline AcrBlock acr_block(const std::string& model, const std::map<std::string, Aggregate>& by_acr,
                          const std::map<Metric, std::optional<double>>& kw_p = {}) {
  AcrBlock b;
  b.model = model;
  b.categories = acr_categories();
  for (const auto& cat : b.categories) {
    auto it = by_acr.find(cat);
    for (Metric m : metrics::kAllMetrics) {
      MeanStd c;
      if (it != by_acr.end() && it->second.by_metric.count(m)) c = it->second.by_metric.at(m);
      b.cells[m].push_back(c);
    }
  }
  for (Metric m : metrics::kAllMetrics) {
    b.flags[m] = flag_best(b.cells[m], m);
    auto it = kw_p.find(m);
    b.kw_p[m] = it == kw_p.end() ? std::nullopt : it->second;
  }
  return b;
}

/// Block from per-pair results: fold-wise aggregates per category and a
/// Kruskal-Wallis test on the per-pair values of the categories present.
inline AcrBlock acr_block(const std::string& model, const std::vector<metrics::MetricResult>& results) {
  std::map<Metric, std::optional<double>> p;
  for (Metric m : metrics::kAllMetrics) {
    std::vector<std::vector<double>> groups;
    for (const auto& cat : acr_categories()) {
      std::vector<double> g;
      for (const auto& r : results) {
        if (r.acr_category == cat && std::isfinite(metrics::value_of(r, m))) g.push_back(metrics::value_of(r, m));
      }
      if (!g.empty()) groups.push_back(std::move(g));
    }
    std::size_t total = 0;
    for (auto& g : groups) total += g.size();
    if (groups.size() >= 2 && total > groups.size()) p[m] = metrics::kruskal_wallis(groups).p_value;
    else p[m] = std::nullopt;
  }
  return acr_block(model, metrics::aggregate_by_acr(results), p);
}

inline std::string render_acr_table_text(const std::vector<AcrBlock>& blocks) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head{"Model", "ACR"};
  for (Metric m : metrics::kAllMetrics) head.push_back(header_of(m));
  rows.push_back(head);
  for (const auto& b : blocks) {
    for (std::size_t i = 0; i < b.categories.size(); ++i) {
      std::vector<std::string> r{i == 0 ? b.model : "", b.categories[i]};
      for (Metric m : metrics::kAllMetrics) {
        r.push_back(format_cell(b.cells.at(m)[i], m) + (b.flags.at(m).best[i] ? " *" : ""));
      }
      rows.push_back(r);
    }
    std::vector<std::string> r{"", "KW p"};
    for (Metric m : metrics::kAllMetrics) {
      const auto& p = b.kw_p.at(m);
      r.push_back(p ? format_value(*p, 4) : "n/a");
    }
    rows.push_back(r);
  }
  std::string out = detail::grid(rows);
  out += "* best category per metric within each model; KW p: Kruskal-Wallis across categories\n";
  for (const auto& b : blocks) {
    for (Metric m : metrics::kAllMetrics) {
      if (b.flags.at(m).tie) out += "tie in " + b.model + " " + metrics::to_string(m) + "\n";
    }
  }
  return out;
}

inline std::string render_acr_table_csv(const std::vector<AcrBlock>& blocks) {
  std::string out = "model,acr";
  for (Metric m : metrics::kAllMetrics) {
    const auto k = detail::lower(metrics::to_string(m));
    out += "," + k + "_mean," + k + "_std," + k + "_best," + k + "_kw_p";
  }
  out += "\n";
  for (const auto& b : blocks) {
    for (std::size_t i = 0; i < b.categories.size(); ++i) {
      out += detail::csv_escape(b.model) + "," + b.categories[i];
      for (Metric m : metrics::kAllMetrics) {
        const auto& c = b.cells.at(m)[i];
        const auto& p = b.kw_p.at(m);
        out += "," + (c.n ? format_value(c.mean, 6) : "") + "," + (c.n ? format_value(c.std, 6) : "") + "," +
               (b.flags.at(m).best[i] ? "1" : "0") + "," + (p ? format_value(*p, 6) : "");
      }
      out += "\n";
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Image panels: columns LE input, DES target, then each model's output

struct PanelRow {
  std::string label;  // e.g. the ACR category
  std::vector<ImageD> columns;
};

/// Grid of equally sized tiles in [0,1] separated by `gap` white pixels.
inline ImageD render_panels(const std::vector<PanelRow>& rows, int gap = 4) {
  if (rows.empty() || rows.front().columns.empty()) throw std::invalid_argument("render_panels: nothing to draw");
  const int h = rows.front().columns.front().rows(), w = rows.front().columns.front().cols();
  const std::size_t ncol = rows.front().columns.size();
  for (const auto& r : rows) {
    if (r.columns.size() != ncol) throw std::invalid_argument("render_panels: ragged rows");
    for (const auto& c : r.columns) {
      if (c.rows() != h || c.cols() != w) throw std::invalid_argument("render_panels: tiles differ in size");
    }
  }
  const int n_rows = static_cast<int>(rows.size()), n_cols = static_cast<int>(ncol);
  ImageD out(n_rows * h + (n_rows - 1) * gap, n_cols * w + (n_cols - 1) * gap, 1.0);
  for (int i = 0; i < n_rows; ++i) {
    for (int j = 0; j < n_cols; ++j) {
      const auto& tile = rows[i].columns[j];
      for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) out(i * (h + gap) + r, j * (w + gap) + c) = std::clamp(tile(r, c), 0.0, 1.0);
      }
    }
  }
  return out;
}

inline const std::vector<std::string>& panel_columns() {
  static const std::vector<std::string> c{"LE input", "DES target", "autoencoder", "pix2pix", "cyclegan"};
  return c;
}

// ---------------------------------------------------------------------------
// Study chart

struct StudyRates {
  double tpr = 0;
  double tnr = 0;
  double birads_accuracy_real = 0;
  double birads_accuracy_synthetic = 0;
};

/// Bar chart as standalone SVG.
inline std::string render_study_chart(const StudyRates& r) {
  const std::vector<std::pair<std::string, double>> bars{{"TPR", r.tpr},
                                                         {"TNR", r.tnr},
                                                         {"BI-RADS acc. real", r.birads_accuracy_real},
                                                         {"BI-RADS acc. synthetic", r.birads_accuracy_synthetic}};
  const int W = 520, H = 320, left = 50, bottom = 260, top = 30, bw = 70, step = 115;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << W - 10 << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << bottom << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double y = bottom - (bottom - top) * k / 4.0;
    s << "<text x=\"" << left - 6 << "\" y=\"" << format_value(y + 4, 1) << "\" text-anchor=\"end\">" << k * 25 << "%</text>\n";
  }
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double v = std::clamp(bars[i].second, 0.0, 1.0);
    const double x = left + 20 + static_cast<double>(i) * step;
    const double hgt = (bottom - top) * v;
    s << "<rect x=\"" << format_value(x, 1) << "\" y=\"" << format_value(bottom - hgt, 1) << "\" width=\"" << bw
      << "\" height=\"" << format_value(hgt, 1) << "\" fill=\"" << (i < 2 ? "#4a78b5" : "#c9733a") << "\"/>\n";
    s << "<text x=\"" << format_value(x + bw / 2.0, 1) << "\" y=\"" << format_value(bottom - hgt - 4, 1)
      << "\" text-anchor=\"middle\">" << format_value(100 * bars[i].second, 1) << "%</text>\n";
    s << "<text x=\"" << format_value(x + bw / 2.0, 1) << "\" y=\"" << bottom + 16 << "\" text-anchor=\"middle\">"
      << bars[i].first << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace vce::report
