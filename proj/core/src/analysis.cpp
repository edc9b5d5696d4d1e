#include "gcalab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "gcalab/error.hpp"

namespace gcalab {

namespace fs = std::filesystem;

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};

std::string esc(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double W = 640, H = 420, L = 70, R = 160, T = 40, B = 55;
  double px(double x) const { return L + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * (W - L - R); }
  double py(double y) const { return H - B - (y1 > y0 ? (y - y0) / (y1 - y0) : 0.5) * (H - T - B); }
};

void pad_range(double& lo, double& hi) {
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
    return;
  }
  const double m = 0.05 * (hi - lo);
  lo -= m;
  hi += m;
}

std::string axes(const Frame& f, const std::string& title, const std::string& xl, const std::string& yl, bool x_ticks) {
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::W << "\" height=\"" << Frame::H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << Frame::W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << esc(title) << "</text>\n";
  const double bx = Frame::L, by = Frame::H - Frame::B, ex = Frame::W - Frame::R, ey = Frame::T;
  o << "<line x1=\"" << bx << "\" y1=\"" << by << "\" x2=\"" << ex << "\" y2=\"" << by << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << bx << "\" y1=\"" << by << "\" x2=\"" << bx << "\" y2=\"" << ey << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    o << "<text x=\"" << bx - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv, 3) << "</text>\n"
      << "<line x1=\"" << bx - 3 << "\" y1=\"" << f.py(yv) << "\" x2=\"" << bx << "\" y2=\"" << f.py(yv)
      << "\" stroke=\"black\"/>\n";
    if (x_ticks) {
      const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0;
      o << "<text x=\"" << f.px(xv) << "\" y=\"" << by + 16 << "\" text-anchor=\"middle\">" << fmt(xv, 3) << "</text>\n";
    }
  }
  o << "<text x=\"" << (bx + ex) / 2 << "\" y=\"" << Frame::H - 12 << "\" text-anchor=\"middle\">" << esc(xl)
    << "</text>\n"
    << "<text transform=\"translate(16," << (by + ey) / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << esc(yl)
    << "</text>\n";
  return o.str();
}

void write_text(const std::string& path, const std::string& s) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << s;
}

std::vector<double> column(const std::vector<MetricsRecord>& rs, const std::string& m) {
  std::vector<double> v;
  for (const auto& r : rs)
    if (auto x = metric_value(r, m)) v.push_back(*x);
  return v;
}

void paired(const std::vector<MetricsRecord>& rs, const std::string& x, const std::string& y, std::vector<double>& xs,
            std::vector<double>& ys) {
  for (const auto& r : rs) {
    auto a = metric_value(r, x);
    auto b = metric_value(r, y);
    if (a && b) {
      xs.push_back(*a);
      ys.push_back(*b);
    }
  }
}

}  // namespace

std::string svg_scatter(const std::string& title, const std::string& x_label, const std::string& y_label,
                        const std::vector<ScatterSeries>& series, bool connect) {
  Frame f{INFINITY, -INFINITY, INFINITY, -INFINITY};
  for (const auto& s : series) {
    for (double x : s.xs) f.x0 = std::min(f.x0, x), f.x1 = std::max(f.x1, x);
    for (double y : s.ys) f.y0 = std::min(f.y0, y), f.y1 = std::max(f.y1, y);
  }
  if (!std::isfinite(f.x0)) f = {0, 1, 0, 1};
  pad_range(f.x0, f.x1);
  pad_range(f.y0, f.y1);
  std::ostringstream o;
  o << axes(f, title, x_label, y_label, true);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* col = kPalette[k % 6];
    if (connect && s.xs.size() > 1) {
      o << "<polyline fill=\"none\" stroke=\"" << col << "\" points=\"";
      for (std::size_t i = 0; i < s.xs.size(); ++i) o << f.px(s.xs[i]) << ',' << f.py(s.ys[i]) << ' ';
      o << "\"/>\n";
    }
    for (std::size_t i = 0; i < std::min(s.xs.size(), s.ys.size()); ++i) {
      o << "<circle cx=\"" << f.px(s.xs[i]) << "\" cy=\"" << f.py(s.ys[i]) << "\" r=\"3.5\" fill=\"" << col
        << "\" fill-opacity=\"0.75\"/>\n";
    }
    const double ly = Frame::T + 10 + 18.0 * static_cast<double>(k);
    o << "<circle cx=\"" << Frame::W - Frame::R + 16 << "\" cy=\"" << ly << "\" r=\"4\" fill=\"" << col << "\"/>\n"
      << "<text x=\"" << Frame::W - Frame::R + 26 << "\" y=\"" << ly + 4 << "\">" << esc(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string svg_boxplot(const std::string& title, const std::string& y_label, const std::vector<BoxSeries>& boxes) {
  Frame f{0, 1, INFINITY, -INFINITY};
  for (const auto& b : boxes) f.y0 = std::min(f.y0, b.summary.min), f.y1 = std::max(f.y1, b.summary.max);
  if (!std::isfinite(f.y0)) f.y0 = 0, f.y1 = 1;
  pad_range(f.y0, f.y1);
  std::ostringstream o;
  o << axes(f, title, "", y_label, false);
  const double n = static_cast<double>(std::max<std::size_t>(boxes.size(), 1));
  const double slot = (Frame::W - Frame::L - Frame::R) / n;
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    const auto& s = boxes[k].summary;
    const double cx = Frame::L + slot * (static_cast<double>(k) + 0.5), hw = slot * 0.25;
    const char* col = kPalette[k % 6];
    o << "<line x1=\"" << cx << "\" y1=\"" << f.py(s.min) << "\" x2=\"" << cx << "\" y2=\"" << f.py(s.max)
      << "\" stroke=\"black\"/>\n"
      << "<rect x=\"" << cx - hw << "\" y=\"" << f.py(s.q3) << "\" width=\"" << 2 * hw << "\" height=\""
      << std::max(0.5, f.py(s.q1) - f.py(s.q3)) << "\" fill=\"" << col << "\" fill-opacity=\"0.4\" stroke=\"" << col
      << "\"/>\n"
      << "<line x1=\"" << cx - hw << "\" y1=\"" << f.py(s.median) << "\" x2=\"" << cx + hw << "\" y2=\""
      << f.py(s.median) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    for (double w : {s.min, s.max}) {
      o << "<line x1=\"" << cx - hw / 2 << "\" y1=\"" << f.py(w) << "\" x2=\"" << cx + hw / 2 << "\" y2=\"" << f.py(w)
        << "\" stroke=\"black\"/>\n";
    }
    o << "<text x=\"" << cx << "\" y=\"" << Frame::H - Frame::B + 16 << "\" text-anchor=\"middle\">"
      << esc(boxes[k].label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

std::string svg_scaling(const ScalingReport& report) {
  std::map<std::string, ScatterSeries> by_label;
  for (const auto& p : report.points) {
    for (const char* dom : {"A", "B"}) {
      auto& s = by_label[p.label + " " + dom];
      s.label = p.label + " NDCG@10 " + dom;
      s.xs.push_back(static_cast<double>(p.param_count));
      s.ys.push_back(dom[0] == 'A' ? p.ndcg10_a.mean : p.ndcg10_b.mean);
    }
  }
  std::vector<ScatterSeries> series;
  for (auto& [k, s] : by_label) series.push_back(std::move(s));
  return svg_scatter("Accuracy per parameter", "parameters", "mean test NDCG@10", series, true);
}

AnalysisReport analyze_records(const std::vector<MetricsRecord>& records) {
  AnalysisReport rep;
  const std::pair<const char*, const char*> pairs[] = {{"cos_xxprime", "ndcg10"}, {"ndcg1", "auc"}, {"ndcg10", "auc"}};
  for (const char* dom : {"a", "b"}) {
    for (const auto& [x, y] : pairs) {
      Correlation c;
      c.domain = dom[0] == 'a' ? "A" : "B";
      c.x = std::string(x) + "_" + dom;
      c.y = std::string(y) + "_" + dom;
      std::vector<double> xs, ys;
      paired(records, c.x, c.y, xs, ys);
      c.n = xs.size();
      if (c.n < 3) {
        c.notice = "fewer than 3 records with both values";
      } else {
        try {
          c.r = pearson_r(xs, ys);
        } catch (const UndefinedCorrelationError&) {
          c.notice = "zero variance; correlation omitted";
        }
      }
      rep.correlations.push_back(std::move(c));
    }
  }
  for (const char* m : {"cos_xxprime_a", "cos_xxprime_b", "cos_xy_a", "cos_xy_b"}) {
    auto v = column(records, m);
    if (v.empty()) continue;
    const std::size_t n = v.size();
    rep.summaries.push_back({m, n, five_number_summary(std::move(v))});
  }
  return rep;
}

std::vector<MetricsRecord> read_results_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot read '" + path + "'");
  std::string line;
  std::vector<MetricsRecord> out;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      if (line != metrics_csv_header()) throw ParseError(path + ": unexpected header");
      header = false;
      continue;
    }
    out.push_back(from_csv_row(line));
  }
  return out;
}

namespace {

std::vector<MetricsRecord> records_in(const std::string& in_dir) {
  const fs::path csv = fs::path(in_dir) / "results.csv";
  if (fs::exists(csv)) return read_results_csv(csv.string());
  std::vector<MetricsRecord> out;
  for (const auto& r : load_cells(in_dir))
    if (!r.failed) out.push_back(r.record);
  return out;
}

}  // namespace

AnalysisReport analyze(const std::string& in_dir, const std::string& out_dir) {
  const auto records = records_in(in_dir);
  if (records.size() < 3) {
    throw ContractError("analysis needs at least 3 records, found " + std::to_string(records.size()) + " in " + in_dir);
  }
  AnalysisReport rep = analyze_records(records);
  fs::create_directories(out_dir);
  const fs::path out(out_dir);

  std::ostringstream cc;
  cc.precision(17);
  cc << "domain,x,y,n,r,notice\n";
  for (const auto& c : rep.correlations) {
    cc << c.domain << ',' << c.x << ',' << c.y << ',' << c.n << ',';
    if (c.r) cc << *c.r;
    cc << ',' << c.notice << '\n';
  }
  write_text((out / "correlations.csv").string(), cc.str());

  std::ostringstream sc;
  sc.precision(17);
  sc << "metric,n,min,q1,median,q3,max\n";
  for (const auto& s : rep.summaries) {
    sc << s.metric << ',' << s.n << ',' << s.summary.min << ',' << s.summary.q1 << ',' << s.summary.median << ','
       << s.summary.q3 << ',' << s.summary.max << '\n';
  }
  write_text((out / "summaries.csv").string(), sc.str());
  rep.files = {(out / "correlations.csv").string(), (out / "summaries.csv").string()};

  auto scatter = [&](const std::string& file, const std::string& title, const std::string& xl, const std::string& yl,
                     const std::vector<std::pair<std::string, std::string>>& cols) {
    std::vector<ScatterSeries> series;
    for (const auto& [x, y] : cols) {
      ScatterSeries s;
      s.label = y + " vs " + x;
      paired(records, x, y, s.xs, s.ys);
      series.push_back(std::move(s));
    }
    write_text((out / file).string(), svg_scatter(title, xl, yl, series));
    rep.files.push_back((out / file).string());
  };
  scatter("ndcg10_vs_cos_xxprime.svg", "NDCG@10 against |cos(X,X')|", "|cos(X,X')|", "NDCG@10",
          {{"cos_xxprime_a", "ndcg10_a"}, {"cos_xxprime_b", "ndcg10_b"}});
  scatter("ndcg_vs_auc.svg", "NDCG against AUC", "AUC", "NDCG",
          {{"auc_a", "ndcg1_a"}, {"auc_b", "ndcg1_b"}, {"auc_a", "ndcg10_a"}, {"auc_b", "ndcg10_b"}});

  std::vector<BoxSeries> boxes;
  for (const auto& s : rep.summaries) boxes.push_back({s.metric, s.summary});
  write_text((out / "cosine_boxplot.svg").string(), svg_boxplot("|cos(X,Y)| and |cos(X,X')|", "|cos|", boxes));
  rep.files.push_back((out / "cosine_boxplot.svg").string());
  return rep;
}

std::string write_report(const std::string& in_dir, const std::string& out_dir) {
  const auto cells = load_cells(in_dir);
  std::vector<MetricsRecord> records;
  for (const auto& r : cells)
    if (!r.failed) records.push_back(r.record);
  if (records.empty()) records = records_in(in_dir);
  if (records.empty()) throw ContractError("no completed runs found in " + in_dir);
  fs::create_directories(out_dir);
  const fs::path out(out_dir);

  std::vector<std::string> order;
  for (const auto& r : records)
    if (std::find(order.begin(), order.end(), r.config_id) == order.end()) order.push_back(r.config_id);

  std::ostringstream md;
  md.precision(4);
  md << "# Results report\n\nSource: `" << in_dir << "`, " << records.size() << " completed runs";
  std::size_t failed = 0;
  for (const auto& r : cells) failed += r.failed;
  if (failed) md << ", " << failed << " failed";
  md << ".\n\n## Per-config means over seeds\n\n"
     << "| config | seeds | params | NDCG@1 A | NDCG@1 B | NDCG@10 A | NDCG@10 B | AUC A | AUC B | cos(X,X') A | "
        "cos(X,X') B |\n|---|---|---|---|---|---|---|---|---|---|---|\n";
  nlohmann::json js;
  js["aggregates"] = nlohmann::json::array();
  for (const auto& id : order) {
    std::vector<MetricsRecord> group;
    for (const auto& r : records)
      if (r.config_id == id) group.push_back(r);
    const auto agg = aggregate_over_seeds(group);
    auto cell = [&](const char* m) {
      auto it = agg.stats.find(m);
      if (it == agg.stats.end()) return std::string("-");
      return fmt(it->second.mean) + " ± " + fmt(it->second.sd, 2);
    };
    md << "| " << id << " | " << agg.count << " | " << agg.param_count;
    for (const char* m : {"ndcg1_a", "ndcg1_b", "ndcg10_a", "ndcg10_b", "auc_a", "auc_b", "cos_xxprime_a", "cos_xxprime_b"})
      md << " | " << cell(m);
    md << " |\n";
    nlohmann::json a = {{"config_id", id}, {"count", agg.count}, {"param_count", agg.param_count}};
    for (const auto& [m, s] : agg.stats) a["stats"][m] = {{"mean", s.mean}, {"sd", s.sd}, {"count", s.count}};
    js["aggregates"].push_back(a);
  }

  if (records.size() >= 3) {
    const auto rep = analyze_records(records);
    md << "\n## Correlations\n\n| domain | x | y | n | r |\n|---|---|---|---|---|\n";
    for (const auto& c : rep.correlations) {
      md << "| " << c.domain << " | " << c.x << " | " << c.y << " | " << c.n << " | "
         << (c.r ? fmt(*c.r) : c.notice) << " |\n";
      js["correlations"].push_back({{"domain", c.domain}, {"x", c.x}, {"y", c.y}, {"n", c.n},
                                    {"r", c.r ? nlohmann::json(*c.r) : nlohmann::json(nullptr)}, {"notice", c.notice}});
    }
    if (!rep.summaries.empty()) {
      md << "\n## Probe distributions\n\n| metric | n | min | q1 | median | q3 | max |\n|---|---|---|---|---|---|---|\n";
      for (const auto& s : rep.summaries) {
        md << "| " << s.metric << " | " << s.n << " | " << fmt(s.summary.min) << " | " << fmt(s.summary.q1) << " | "
           << fmt(s.summary.median) << " | " << fmt(s.summary.q3) << " | " << fmt(s.summary.max) << " |\n";
      }
    }
  } else {
    md << "\nCorrelations need at least 3 runs.\n";
  }

  const fs::path scaling = fs::path(in_dir) / "scaling.csv";
  if (fs::exists(scaling)) {
    std::ifstream in(scaling);
    md << "\n## Parameter-matched scaling\n\n```\n" << in.rdbuf() << "```\n";
  }

  md << "\n## Runs\n\nEach run lists the resolved config that reproduces it.\n";
  js["runs"] = nlohmann::json::array();
  for (const auto& r : cells) {
    md << "\n### " << r.record.config_id << " seed " << r.record.seed << (r.failed ? " (failed: " + r.error + ")" : "")
       << "\n\n```json\n" << r.resolved.dump(2) << "\n```\n";
    js["runs"].push_back(to_json(r));
  }
  const std::string md_path = (out / "report.md").string();
  write_text(md_path, md.str());
  write_text((out / "report.json").string(), js.dump(2));
  return md_path;
}

}  // namespace gcalab
