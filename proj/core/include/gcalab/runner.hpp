#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcalab/backbone.hpp"
#include "gcalab/data.hpp"
#include "gcalab/metrics.hpp"

namespace gcalab {

struct TrainingConfig {
  std::size_t epochs = 50;
  std::size_t patience = 10;  // epochs without validation NDCG@10 gain
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t negatives_per_pos = 4;
  std::size_t eval_negatives = 99;
  std::size_t min_len = 3;

  void validate() const;
};

nlohmann::json to_json(const TrainingConfig& t);
TrainingConfig training_config_from_json(const nlohmann::json& j);

/// Either a synthetic generator spec or a TSV interaction log.
struct DataSource {
  std::optional<SynthSpec> synthetic;
  std::string path;

  void validate() const;
};

struct RunSpec {
  std::string config_id = "run";
  ModelConfig model;
  DataSource data;
  TrainingConfig training;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir;

  void validate() const;
};

nlohmann::json to_json(const RunSpec& s);
/// Reads the "model", "data", "training", "seeds" and "id" sections. The
/// model vocabulary follows the data source when the data is synthetic.
RunSpec run_spec_from_json(const nlohmann::json& j);
/// Parses a JSON file; // and /* */ comments are allowed.
nlohmann::json read_json_file(const std::string& path);

/// Materializes the dataset described by a spec and fixes the model's
/// vocabulary sizes to match it.
SplitDataset load_dataset(const DataSource& data, std::size_t min_len, InteractionLog* log_out = nullptr);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_ndcg10 = 0.0;
  double seconds = 0.0;
};

struct RunResult {
  MetricsRecord record;
  bool failed = false;
  std::string error;
  std::vector<EpochLog> history;
  nlohmann::json resolved;  // exact spec + seed needed to reproduce the run
  double seconds = 0.0;
};

nlohmann::json to_json(const RunResult& r);
RunResult run_result_from_json(const nlohmann::json& j);

struct RunOptions {
  std::string checkpoint_path;    // empty: no checkpoint
  std::ostream* log = nullptr;     // per-epoch progress lines
  const SplitDataset* dataset = nullptr;  // reuse an already-loaded dataset
};

struct EvalResult {
  double ndcg1_a = 0, ndcg1_b = 0, ndcg10_a = 0, ndcg10_b = 0, auc_a = 0, auc_b = 0;
};

/// Ranks every user's candidates with dropout off. Probes, when given,
/// accumulate over all evaluation batches.
EvalResult evaluate(const Model& model, const SplitDataset& ds, Split split, const EvalCandidates& cands,
                    std::size_t batch_size, ProbeSet* probes = nullptr);

/// Trains with early stopping on validation NDCG@10 (mean over domains),
/// restores the best epoch, then measures test metrics and probes. A
/// non-finite loss or gradient marks the run failed.
RunResult run_train(const RunSpec& spec, std::uint64_t seed, const RunOptions& options = {});

struct MatchResult {
  ModelConfig config;
  std::size_t params = 0;
  double relative_error = 0.0;
};

/// Searches the hidden width (a multiple of the head counts) so the
/// baseline's parameter count lands within `tolerance` of `target`. When no
/// width is close enough, the FFN width of the two neighbouring widths is
/// refined. Throws InfeasibleMatchError with the nearest achievable count.
MatchResult match_parameters(const ModelConfig& baseline, std::size_t target, double tolerance = 0.02);

// --- sweeps ------------------------------------------------------------------

struct SweepAxis {
  std::string path;  // dotted path into the run spec JSON, e.g. "model.gca.placements"
  std::vector<nlohmann::json> values;
};

struct SweepSpec {
  RunSpec base;
  std::vector<SweepAxis> axes;
  std::size_t jobs = 1;

  void validate() const;
};

SweepSpec sweep_spec_from_json(const nlohmann::json& j);

struct SweepCell {
  std::string config_id;
  nlohmann::json overrides;  // axis path -> value
  RunSpec spec;
};

/// Cartesian product of the axes, in row-major order of the axis list.
std::vector<SweepCell> enumerate_cells(const SweepSpec& spec);

struct SweepOptions {
  std::string out_dir;
  bool resume = false;
  std::ostream* log = nullptr;
};

struct SweepResult {
  std::vector<RunResult> runs;  // one per cell x seed, completed or failed
  std::vector<SeedAggregate> aggregates;
  std::size_t executed = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
};

/// Runs every cell x seed, writing `<out>/cells/<config_id>__seed<k>.json`
/// atomically as each finishes. With `resume`, cells whose file exists are
/// loaded instead of re-run. Rebuilds `<out>/results.csv` and
/// `<out>/aggregates.csv` from the cell files at the end.
SweepResult run_sweep(const SweepSpec& spec, const SweepOptions& options);

/// Path of a cell's result file.
std::string cell_path(const std::string& out_dir, const std::string& config_id, std::uint64_t seed);
/// Writes `value` to `path` through a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& contents);
/// Loads every cell file under `<dir>/cells` (sorted by file name).
std::vector<RunResult> load_cells(const std::string& dir);
/// Roll-up writers; failed runs are excluded from both.
void write_results_csv(const std::string& path, const std::vector<RunResult>& runs);
/// Per-config mean/sd table. `family_best` marks the best config (by mean
/// NDCG@10 over domains) among those differing only in GCA placements.
void write_aggregates_csv(const std::string& path, const std::vector<SeedAggregate>& aggregates,
                          const std::vector<std::string>& family_best);

// --- parameter-matched scaling -------------------------------------------------

struct ScalingCurveSpec {
  RunSpec base;                 // plain baseline, no GCA placements
  GcaConfig gca_variant;        // added at the base width
  std::vector<std::size_t> width_grid;
  bool include_matched = true;  // add a baseline matched to the GCA variant
  double tolerance = 0.02;

  void validate() const;
};

ScalingCurveSpec scaling_spec_from_json(const nlohmann::json& j);

struct ScalingPoint {
  std::string label;  // "baseline", "gca" or "matched"
  std::size_t d = 0;
  std::size_t ffn_hidden = 0;
  std::size_t param_count = 0;
  MetricStat ndcg10_a, ndcg10_b;
  std::vector<MetricsRecord> records;
};

struct ScalingReport {
  std::vector<ScalingPoint> points;  // grid points in width order, then gca, then matched
  std::size_t gca_params = 0;
  /// Baseline point whose count is closest to the GCA variant's.
  std::optional<std::size_t> closest_baseline;
  double closest_relative_error = 0.0;
};

ScalingReport run_scaling_curve(const ScalingCurveSpec& spec, const SweepOptions& options);
/// CSV with columns label,d,ffn_hidden,param_count,ndcg10_a_mean,ndcg10_a_sd,ndcg10_b_mean,ndcg10_b_sd,seeds.
void write_scaling_csv(const std::string& path, const ScalingReport& report);
nlohmann::json to_json(const ScalingReport& report);

}  // namespace gcalab
