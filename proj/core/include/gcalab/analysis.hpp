#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gcalab/metrics.hpp"
#include "gcalab/runner.hpp"

namespace gcalab {

struct Correlation {
  std::string domain;  // "A" or "B"
  std::string x, y;    // metric column names
  std::size_t n = 0;
  std::optional<double> r;
  std::string notice;  // why r is absent
};

struct NamedSummary {
  std::string metric;
  std::size_t n = 0;
  FiveNumberSummary summary;
};

struct AnalysisReport {
  std::vector<Correlation> correlations;
  std::vector<NamedSummary> summaries;
  std::vector<std::string> files;  // artifacts written
};

/// Pearson r per domain for (cos_xxprime, ndcg10), (ndcg1, auc) and
/// (ndcg10, auc), plus five-number summaries of the probe columns.
/// Records without probe values are skipped for probe statistics.
AnalysisReport analyze_records(const std::vector<MetricsRecord>& records);

/// Reads `<in>/results.csv` (or the cell files when absent), writes
/// correlations.csv, summaries.csv and SVG scatter/box plots into `out`.
/// Throws ContractError with fewer than 3 records.
AnalysisReport analyze(const std::string& in_dir, const std::string& out_dir);

std::vector<MetricsRecord> read_results_csv(const std::string& path);

/// Markdown + JSON summary of a results directory: per-config aggregates,
/// the resolved config and seed of every run, and the analysis tables.
/// Returns the path of the Markdown file.
std::string write_report(const std::string& in_dir, const std::string& out_dir);

// --- SVG -----------------------------------------------------------------------

struct ScatterSeries {
  std::string label;
  std::vector<double> xs, ys;
};

std::string svg_scatter(const std::string& title, const std::string& x_label, const std::string& y_label,
                        const std::vector<ScatterSeries>& series, bool connect = false);

struct BoxSeries {
  std::string label;
  FiveNumberSummary summary;
};

std::string svg_boxplot(const std::string& title, const std::string& y_label, const std::vector<BoxSeries>& boxes);

/// NDCG@10 against parameter count for every scaling point.
std::string svg_scaling(const ScalingReport& report);

}  // namespace gcalab
