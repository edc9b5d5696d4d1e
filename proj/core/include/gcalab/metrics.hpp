#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcalab/tensor.hpp"

namespace gcalab {

// ---------------------------------------------------------------------------
// Ranking metrics over one candidate list with a single positive.
// Ranks are 1-based; ties are broken in favour of the lower candidate index.

std::size_t rank_of(std::span<const double> scores, std::size_t positive_index);
double ndcg_at_k(std::span<const double> scores, std::size_t positive_index, std::size_t k);
/// Fraction of negatives scored strictly below the positive, ties counted 0.5.
double auc(std::span<const double> scores, std::size_t positive_index);

// ---------------------------------------------------------------------------
// Orthogonality probes.

/// Running mean of |cos| over (batch, position) pairs.
struct CosineAccumulator {
  double sum = 0.0;
  double count = 0.0;

  double mean() const { return count > 0 ? sum / count : 0.0; }
  void merge(const CosineAccumulator& other) {
    sum += other.sum;
    count += other.count;
  }
};

/// Accumulators for one GCA block: query vs cross-attended output, and
/// query vs key/value sequence.
struct GcaProbe {
  CosineAccumulator xxprime;
  CosineAccumulator xy;
  std::size_t batch_count = 0;

  double cos_xxprime() const { return xxprime.mean(); }
  double cos_xy() const { return xy.mean(); }
};

/// Adds |cos(x[b,i], xprime[b,i])| for every unmasked (b, i). Rows with a
/// zero norm contribute 0. A fully masked batch is a no-op.
void cosine_probe_update(CosineAccumulator& acc, const Tensor& x, const Tensor& xprime, const Mask& mask);
void cosine_probe_update(GcaProbe& probe, const Tensor& x, const Tensor& xprime, const Mask& mask);

// ---------------------------------------------------------------------------
// Statistics.

/// Sample Pearson correlation. Throws UndefinedCorrelationError on zero
/// variance and ContractError on fewer than 3 points or length mismatch.
double pearson_r(std::span<const double> xs, std::span<const double> ys);

struct FiveNumberSummary {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

/// Quartiles by linear interpolation between order statistics.
FiveNumberSummary five_number_summary(std::vector<double> values);

// ---------------------------------------------------------------------------
// Per-run record.

struct MetricsRecord {
  std::string config_id;
  long long seed = 0;
  long long param_count = 0;
  int epoch_of_best = 0;
  double ndcg1_a = 0, ndcg1_b = 0, ndcg10_a = 0, ndcg10_b = 0;
  double auc_a = 0, auc_b = 0;
  // Absent when the model has no GCA block to probe.
  std::optional<double> cos_xxprime_a, cos_xxprime_b, cos_xy_a, cos_xy_b;

  bool operator==(const MetricsRecord&) const = default;

  /// Range checks: metric floats in [0,1], param_count > 0.
  void validate() const;
};

/// Column order of the CSV form.
const std::vector<std::string>& metrics_columns();
std::string metrics_csv_header();
std::string to_csv_row(const MetricsRecord& r);
MetricsRecord from_csv_row(const std::string& line);

nlohmann::json to_json(const MetricsRecord& r);
MetricsRecord metrics_from_json(const nlohmann::json& j);

/// Numeric metric by column name; nullopt for absent probes. Throws on
/// non-metric columns.
std::optional<double> metric_value(const MetricsRecord& r, std::string_view name);
/// The numeric metric columns (everything except identifiers).
const std::vector<std::string>& metric_names();

struct MetricStat {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t count = 0;
};

struct SeedAggregate {
  std::string config_id;
  std::size_t count = 0;
  long long param_count = 0;
  std::map<std::string, MetricStat> stats;  // keyed by metric name
};

/// Mean and standard deviation of every metric across seeds of one config.
SeedAggregate aggregate_over_seeds(std::span<const MetricsRecord> records);

}  // namespace gcalab
