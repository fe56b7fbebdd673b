#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ctncf/data.hpp"
#include "ctncf/metrics.hpp"
#include "ctncf/model.hpp"
#include "ctncf/training.hpp"

namespace ctncf {

inline const std::vector<std::size_t> kFilterGrid = {8, 16, 32, 64, 128};

struct SweepRow {
  std::size_t filters = 0;
  double recall10 = std::numeric_limits<double>::quiet_NaN();
  double ndcg10 = std::numeric_limits<double>::quiet_NaN();
  std::string error;  // non-empty when the cell failed

  bool failed() const { return !error.empty(); }
};

struct SweepSeries {
  std::string dataset;
  std::vector<SweepRow> rows;
};

/// CTNCF trained three times per filter count; one row per grid entry. A
/// cell that throws is recorded with its message and NaN metrics.
inline SweepSeries run_filter_sweep(const SplitDataset& split, std::string dataset,
                                    const HyperParams& base, const TrainConfig& config,
                                    const CandidateMode& candidates,
                                    const std::vector<std::size_t>& grid = kFilterGrid) {
  SweepSeries series{std::move(dataset), {}};
  for (std::size_t f : grid) {
    SweepRow row;
    row.filters = f;
    try {
      HyperParams h = base;
      h.num_filters = f;
      const EvalReport r = run_thrice(ModelKind::ctncf, split, h, config, candidates);
      row.recall10 = r.at(10).recall;
      row.ndcg10 = r.at(10).ndcg;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    series.rows.push_back(std::move(row));
  }
  return series;
}

inline void write_sweep_csv(std::ostream& os, const SweepSeries& s) {
  os << "filters,recall10,ndcg10\n";
  for (const auto& r : s.rows) {
    os << r.filters << ',' << (r.failed() ? "nan" : format_metric(r.recall10)) << ','
       << (r.failed() ? "nan" : format_metric(r.ndcg10)) << '\n';
  }
}

inline std::vector<SweepRow> read_sweep_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "filters,recall10,ndcg10") {
    throw DataError("sweep csv: unexpected header");
  }
  std::vector<SweepRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f, rec, nd;
    if (!std::getline(ls, f, ',') || !std::getline(ls, rec, ',') || !std::getline(ls, nd)) {
      throw DataError("sweep csv: malformed row '" + line + "'");
    }
    SweepRow row;
    row.filters = std::stoul(f);
    if (rec == "nan") row.error = "failed";
    else {
      row.recall10 = std::stod(rec);
      row.ndcg10 = std::stod(nd);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct AblationRow {
  std::string variant;  // "off" or "on"
  std::size_t layers = 0;
  double recall10 = 0.0;
  double ndcg10 = 0.0;
  std::uint64_t attention_calls = 0;  // attention evaluations during this variant
};

/// CTNCF without (0 layers) and with (`on_layers`, default 2) the
/// transformer, each trained three times.
inline std::vector<AblationRow> run_ablation(const SplitDataset& split, const HyperParams& base,
                                             const TrainConfig& config,
                                             const CandidateMode& candidates,
                                             std::size_t on_layers = 2) {
  std::vector<AblationRow> rows;
  for (auto [name, layers] : {std::pair<const char*, std::size_t>{"off", 0},
                              std::pair<const char*, std::size_t>{"on", on_layers}}) {
    HyperParams h = base;
    h.num_transformer_layers = layers;
    const std::uint64_t before = attention_call_count();
    const EvalReport r = run_thrice(ModelKind::ctncf, split, h, config, candidates);
    rows.push_back({name, layers, r.at(10).recall, r.at(10).ndcg, attention_call_count() - before});
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "variant,recall10,ndcg10\n";
  for (const auto& r : rows)
    os << r.variant << ',' << format_metric(r.recall10) << ',' << format_metric(r.ndcg10) << '\n';
}

// ---------------------------------------------------------------------------
// SVG charts

namespace svg {

inline const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"};

struct Series {
  std::string name;
  std::vector<double> values;  // NaN entries are skipped
};

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::pair<double, double> value_range(const std::vector<Series>& series) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : series)
    for (double v : s.values)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  if (!std::isfinite(lo)) return {0.0, 1.0};
  if (hi - lo < 1e-9) {
    lo -= 0.05;
    hi += 0.05;
  }
  const double pad = 0.1 * (hi - lo);
  return {std::max(0.0, lo - pad), hi + pad};
}

struct Frame {
  double width = 640, height = 400, left = 70, right = 150, top = 40, bottom = 60;
  double plot_w() const { return width - left - right; }
  double plot_h() const { return height - top - bottom; }
};

inline void header(std::ostringstream& os, const Frame& f, const std::string& title,
                   const std::string& x_label, const std::string& y_label, double lo, double hi) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\""
     << f.height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << f.width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
     << escape(title) << "</text>\n";
  const double x0 = f.left, y0 = f.top + f.plot_h();
  os << "<line x1=\"" << x0 << "\" y1=\"" << f.top << "\" x2=\"" << x0 << "\" y2=\"" << y0
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 + f.plot_w() << "\" y2=\""
     << y0 << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    const double y = y0 - f.plot_h() * t / 4.0;
    os << "<text x=\"" << x0 - 6 << "\" y=\"" << fmt(y + 4) << "\" text-anchor=\"end\">"
       << format_metric(v).substr(0, 6) << "</text>\n";
  }
  os << "<text x=\"" << x0 + f.plot_w() / 2 << "\" y=\"" << f.height - 15
     << "\" text-anchor=\"middle\">" << escape(x_label) << "</text>\n";
  os << "<text x=\"15\" y=\"" << f.top + f.plot_h() / 2 << "\" text-anchor=\"middle\" "
     << "transform=\"rotate(-90 15 " << f.top + f.plot_h() / 2 << ")\">" << escape(y_label)
     << "</text>\n";
}

inline void legend(std::ostringstream& os, const Frame& f, const std::vector<std::string>& names) {
  for (std::size_t s = 0; s < names.size(); ++s) {
    const double y = f.top + 10 + 18.0 * static_cast<double>(s);
    const double x = f.left + f.plot_w() + 15;
    os << "<rect x=\"" << x << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"12\" fill=\""
       << kPalette[s % 5] << "\"/>\n";
    os << "<text x=\"" << x + 18 << "\" y=\"" << y + 1 << "\">" << escape(names[s]) << "</text>\n";
  }
}

/// One polyline per series over categorical x positions.
inline std::string line_plot(const std::string& title, const std::string& x_label,
                             const std::string& y_label, const std::vector<std::string>& x_ticks,
                             const std::vector<Series>& series) {
  Frame f;
  auto [lo, hi] = value_range(series);
  std::ostringstream os;
  header(os, f, title, x_label, y_label, lo, hi);
  const std::size_t n = x_ticks.size();
  auto x_at = [&](std::size_t i) {
    return f.left + f.plot_w() * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
  };
  auto y_at = [&](double v) { return f.top + f.plot_h() * (1.0 - (v - lo) / (hi - lo)); };
  for (std::size_t i = 0; i < n; ++i) {
    os << "<text x=\"" << fmt(x_at(i)) << "\" y=\"" << f.top + f.plot_h() + 18
       << "\" text-anchor=\"middle\">" << escape(x_ticks[i]) << "</text>\n";
  }
  std::vector<std::string> names;
  for (std::size_t s = 0; s < series.size(); ++s) {
    names.push_back(series[s].name);
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[s % 5] << "\" stroke-width=\"2\" points=\"";
    bool first = true;
    for (std::size_t i = 0; i < series[s].values.size() && i < n; ++i) {
      if (!std::isfinite(series[s].values[i])) continue;
      os << (first ? "" : " ") << fmt(x_at(i)) << ',' << fmt(y_at(series[s].values[i]));
      first = false;
    }
    os << "\"/>\n";
    for (std::size_t i = 0; i < series[s].values.size() && i < n; ++i) {
      if (!std::isfinite(series[s].values[i])) continue;
      os << "<circle cx=\"" << fmt(x_at(i)) << "\" cy=\"" << fmt(y_at(series[s].values[i]))
         << "\" r=\"3\" fill=\"" << kPalette[s % 5] << "\"/>\n";
    }
  }
  legend(os, f, names);
  os << "</svg>\n";
  return os.str();
}

/// Grouped bars: one group per category, one bar per series within it.
inline std::string bar_chart(const std::string& title, const std::string& y_label,
                             const std::vector<std::string>& groups,
                             const std::vector<Series>& series) {
  Frame f;
  auto [lo, hi] = value_range(series);
  lo = 0.0;
  std::ostringstream os;
  header(os, f, title, "", y_label, lo, hi);
  const double group_w = f.plot_w() / static_cast<double>(groups.size());
  const double bar_w = 0.7 * group_w / static_cast<double>(std::max<std::size_t>(1, series.size()));
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = f.left + group_w * static_cast<double>(g);
    os << "<text x=\"" << fmt(gx + group_w / 2) << "\" y=\"" << f.top + f.plot_h() + 18
       << "\" text-anchor=\"middle\">" << escape(groups[g]) << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
      if (g >= series[s].values.size() || !std::isfinite(series[s].values[g])) continue;
      const double v = series[s].values[g];
      const double h = f.plot_h() * (v - lo) / (hi - lo);
      const double x = gx + 0.15 * group_w + bar_w * static_cast<double>(s);
      os << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(f.top + f.plot_h() - h) << "\" width=\""
         << fmt(bar_w) << "\" height=\"" << fmt(h) << "\" fill=\"" << kPalette[s % 5] << "\"/>\n";
    }
  }
  std::vector<std::string> names;
  for (const auto& s : series) names.push_back(s.name);
  legend(os, f, names);
  os << "</svg>\n";
  return os.str();
}

}  // namespace svg

/// Recall@10 or NDCG@10 against filter count, one line per dataset.
inline std::string sweep_svg(const std::vector<SweepSeries>& all, bool ndcg) {
  std::vector<std::string> ticks;
  if (!all.empty())
    for (const auto& r : all.front().rows) ticks.push_back(std::to_string(r.filters));
  std::vector<svg::Series> series;
  for (const auto& s : all) {
    svg::Series line{s.dataset, {}};
    for (const auto& r : s.rows) line.values.push_back(ndcg ? r.ndcg10 : r.recall10);
    series.push_back(std::move(line));
  }
  const std::string metric = ndcg ? "NDCG@10" : "Recall@10";
  return svg::line_plot(metric + " vs. number of CNN filters", "filters", metric, ticks, series);
}

struct AblationSeries {
  std::string dataset;
  std::vector<AblationRow> rows;
};

/// Paired bars per dataset: transformer off vs. on.
inline std::string ablation_svg(const std::vector<AblationSeries>& all, bool ndcg) {
  std::vector<std::string> groups;
  svg::Series off{"without transformer", {}}, on{"with transformer", {}};
  for (const auto& a : all) {
    groups.push_back(a.dataset);
    for (const auto& r : a.rows) {
      (r.layers == 0 ? off : on).values.push_back(ndcg ? r.ndcg10 : r.recall10);
    }
  }
  const std::string metric = ndcg ? "NDCG@10" : "Recall@10";
  return svg::bar_chart(metric + " with and without the transformer layers", metric, groups,
                        {off, on});
}

}  // namespace ctncf
