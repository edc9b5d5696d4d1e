#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "gcalab/error.hpp"
#include "gcalab/runner.hpp"

namespace gcalab {

namespace fs = std::filesystem;

namespace {

nlohmann::json::json_pointer pointer_of(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) p += "/" + part;
  return nlohmann::json::json_pointer(p);
}

std::string render_value(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_array()) {
    if (v.empty()) return "none";
    std::string s;
    for (const auto& e : v) s += (s.empty() ? "" : "-") + render_value(e);
    return s;
  }
  return v.dump();
}

std::string sanitize(std::string s) {
  for (auto& c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '=' || c == '.')) c = '_';
  }
  return s;
}

std::string last_segment(const std::string& path) {
  const auto dot = path.rfind('.');
  return dot == std::string::npos ? path : path.substr(dot + 1);
}

struct Task {
  std::string config_id;
  const RunSpec* spec;
  std::uint64_t seed;
};

// Runs (or, when resuming, reloads) each task and persists its cell file.
std::vector<RunResult> run_tasks(const std::vector<Task>& tasks, const SweepOptions& opt, std::size_t jobs,
                                 std::size_t& executed, std::size_t& skipped) {
  fs::create_directories(fs::path(opt.out_dir) / "cells");
  fs::create_directories(fs::path(opt.out_dir) / "checkpoints");

  std::mutex mu;
  std::map<std::string, std::shared_ptr<const SplitDataset>> datasets;
  auto dataset_for = [&](const RunSpec& s) {
    nlohmann::json key = to_json(s)["data"];
    key["min_len"] = s.training.min_len;
    std::lock_guard<std::mutex> lock(mu);
    auto& slot = datasets[key.dump()];
    if (!slot) slot = std::make_shared<const SplitDataset>(load_dataset(s.data, s.training.min_len));
    return slot;
  };

  std::vector<RunResult> results(tasks.size());
  std::vector<std::uint8_t> was_skipped(tasks.size(), 0);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const Task& t = tasks[i];
      const std::string path = cell_path(opt.out_dir, t.config_id, t.seed);
      if (opt.resume && fs::exists(path)) {
        try {
          std::ifstream in(path);
          results[i] = run_result_from_json(nlohmann::json::parse(in));
          was_skipped[i] = 1;
          continue;
        } catch (const std::exception&) {
          // unreadable cell: run it again
        }
      }
      RunResult r;
      try {
        RunOptions ro;
        ro.dataset = dataset_for(*t.spec).get();
        ro.checkpoint_path =
            (fs::path(opt.out_dir) / "checkpoints" / (t.config_id + "__seed" + std::to_string(t.seed) + ".ckpt")).string();
        std::ostringstream log;
        ro.log = opt.log ? &log : nullptr;
        r = run_train(*t.spec, t.seed, ro);
        if (opt.log) {
          std::lock_guard<std::mutex> lock(mu);
          *opt.log << log.str() << std::flush;
        }
      } catch (const std::exception& e) {
        r.failed = true;
        r.error = e.what();
        r.record.config_id = t.config_id;
        r.record.seed = static_cast<long long>(t.seed);
        r.resolved = to_json(*t.spec);
        r.resolved["seed"] = t.seed;
      }
      write_file_atomic(path, to_json(r).dump(2));
      results[i] = std::move(r);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < std::max<std::size_t>(jobs, 1); ++j) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (std::size_t i = 0; i < tasks.size(); ++i) (was_skipped[i] ? skipped : executed)++;
  return results;
}

std::vector<SeedAggregate> aggregate_runs(const std::vector<RunResult>& runs, const std::vector<std::string>& order) {
  std::vector<SeedAggregate> out;
  for (const auto& id : order) {
    std::vector<MetricsRecord> recs;
    for (const auto& r : runs)
      if (!r.failed && r.record.config_id == id) recs.push_back(r.record);
    if (!recs.empty()) out.push_back(aggregate_over_seeds(recs));
  }
  return out;
}

double mean_ndcg10(const SeedAggregate& a) { return 0.5 * (a.stats.at("ndcg10_a").mean + a.stats.at("ndcg10_b").mean); }

}  // namespace

std::string cell_path(const std::string& out_dir, const std::string& config_id, std::uint64_t seed) {
  return (fs::path(out_dir) / "cells" / (config_id + "__seed" + std::to_string(seed) + ".json")).string();
}

void write_file_atomic(const std::string& path, const std::string& contents) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  std::ostringstream tmp_name;
  tmp_name << path << ".tmp." << std::hash<std::thread::id>{}(std::this_thread::get_id());
  {
    std::ofstream out(tmp_name.str(), std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp_name.str() + "'");
    out << contents;
    if (!out.flush()) throw Error("failed writing '" + tmp_name.str() + "'");
  }
  fs::rename(tmp_name.str(), target);
}

std::vector<RunResult> load_cells(const std::string& dir) {
  std::vector<fs::path> files;
  const fs::path cells = fs::path(dir) / "cells";
  if (!fs::is_directory(cells)) return {};
  for (const auto& e : fs::directory_iterator(cells))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<RunResult> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    try {
      out.push_back(run_result_from_json(nlohmann::json::parse(in)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(f.string() + ": " + e.what());
    }
  }
  return out;
}

void write_results_csv(const std::string& path, const std::vector<RunResult>& runs) {
  std::string s = metrics_csv_header() + "\n";
  for (const auto& r : runs)
    if (!r.failed) s += to_csv_row(r.record) + "\n";
  write_file_atomic(path, s);
}

void write_aggregates_csv(const std::string& path, const std::vector<SeedAggregate>& aggregates,
                          const std::vector<std::string>& family_best) {
  std::ostringstream out;
  out.precision(17);
  out << "config_id,count,param_count";
  for (const auto& m : metric_names()) out << ',' << m << "_mean," << m << "_sd";
  out << ",family_best\n";
  for (const auto& a : aggregates) {
    out << a.config_id << ',' << a.count << ',' << a.param_count;
    for (const auto& m : metric_names()) {
      auto it = a.stats.find(m);
      if (it == a.stats.end()) out << ",,";
      else out << ',' << it->second.mean << ',' << it->second.sd;
    }
    const bool best = std::find(family_best.begin(), family_best.end(), a.config_id) != family_best.end();
    out << ',' << (best ? 1 : 0) << '\n';
  }
  write_file_atomic(path, out.str());
}

// --- sweep -----------------------------------------------------------------------

void SweepSpec::validate() const {
  base.validate();
  for (const auto& a : axes) {
    if (a.path.empty()) throw ConfigError("sweep axis with empty path");
    if (a.values.empty()) throw ConfigError("sweep axis '" + a.path + "' has no values");
  }
  enumerate_cells(*this);
}

SweepSpec sweep_spec_from_json(const nlohmann::json& j) {
  SweepSpec s;
  s.base = run_spec_from_json(j);
  if (!j.contains("sweep")) return s;
  const auto& sw = j.at("sweep");
  s.jobs = sw.value("jobs", s.jobs);
  if (!sw.contains("axes")) return s;
  const auto& axes = sw.at("axes");
  if (axes.is_array()) {
    for (const auto& a : axes) s.axes.push_back({a.at("path").get<std::string>(), a.at("values").get<std::vector<nlohmann::json>>()});
  } else if (axes.is_object()) {
    for (const auto& [k, v] : axes.items()) {
      if (!v.is_array()) throw ConfigError("sweep axis '" + k + "' must list its values");
      s.axes.push_back({k, v.get<std::vector<nlohmann::json>>()});
    }
  } else {
    throw ConfigError("sweep.axes must be an object or an array");
  }
  return s;
}

std::vector<SweepCell> enumerate_cells(const SweepSpec& spec) {
  const nlohmann::json base = to_json(spec.base);
  std::vector<SweepCell> cells;
  std::vector<std::size_t> idx(spec.axes.size(), 0);
  while (true) {
    nlohmann::json j = base;
    nlohmann::json overrides = nlohmann::json::object();
    std::string id = spec.base.config_id;
    for (std::size_t a = 0; a < spec.axes.size(); ++a) {
      const auto& axis = spec.axes[a];
      const auto& v = axis.values[idx[a]];
      try {
        j[pointer_of(axis.path)] = v;
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("sweep axis '" + axis.path + "': " + e.what());
      }
      overrides[axis.path] = v;
      id += "__" + sanitize(last_segment(axis.path) + "=" + render_value(v));
    }
    j["id"] = id;
    SweepCell cell{id, overrides, run_spec_from_json(j)};
    cell.spec.validate();
    cells.push_back(std::move(cell));

    std::size_t a = spec.axes.size();
    while (a > 0) {
      --a;
      if (++idx[a] < spec.axes[a].values.size()) break;
      idx[a] = 0;
      if (a == 0) return cells;
    }
    if (spec.axes.empty()) return cells;
  }
}

SweepResult run_sweep(const SweepSpec& spec, const SweepOptions& options) {
  if (options.out_dir.empty()) throw ConfigError("sweep needs an output directory");
  const auto cells = enumerate_cells(spec);
  std::vector<Task> tasks;
  std::vector<std::string> order;
  for (const auto& c : cells) {
    order.push_back(c.config_id);
    for (auto seed : c.spec.seeds) tasks.push_back({c.config_id, &c.spec, seed});
  }
  SweepResult res;
  res.runs = run_tasks(tasks, options, spec.jobs, res.executed, res.skipped);
  for (const auto& r : res.runs) res.failed += r.failed;
  res.aggregates = aggregate_runs(res.runs, order);

  // Families: cells equal in every axis except the GCA placements.
  std::map<std::string, std::string> best_of;
  std::map<std::string, double> best_val;
  for (const auto& c : cells) {
    nlohmann::json key = c.overrides;
    key.erase("model.gca.placements");
    auto it = std::find_if(res.aggregates.begin(), res.aggregates.end(),
                           [&](const auto& a) { return a.config_id == c.config_id; });
    if (it == res.aggregates.end()) continue;
    const double v = mean_ndcg10(*it);
    const auto k = key.dump();
    if (!best_val.count(k) || v > best_val[k]) {
      best_val[k] = v;
      best_of[k] = c.config_id;
    }
  }
  std::vector<std::string> family_best;
  for (const auto& [k, id] : best_of) family_best.push_back(id);

  write_results_csv((fs::path(options.out_dir) / "results.csv").string(), res.runs);
  write_aggregates_csv((fs::path(options.out_dir) / "aggregates.csv").string(), res.aggregates, family_best);
  return res;
}

// --- scaling curve ---------------------------------------------------------------

void ScalingCurveSpec::validate() const {
  base.validate();
  if (!base.model.gca.placements.empty()) throw ConfigError("scaling curve base must have no GCA placements");
  if (gca_variant.placements.empty()) throw ConfigError("scaling curve GCA variant needs at least one placement");
  gca_variant.validate(base.model.max_stage());
  if (width_grid.empty()) throw ConfigError("width_grid must not be empty");
  for (std::size_t i = 0; i < width_grid.size(); ++i) {
    if (i > 0 && width_grid[i] <= width_grid[i - 1]) throw ConfigError("width_grid must be strictly increasing");
    ModelConfig c = base.model;
    c.d = width_grid[i];
    c.validate();
  }
  if (!(tolerance > 0.0)) throw ConfigError("tolerance must be positive");
}

ScalingCurveSpec scaling_spec_from_json(const nlohmann::json& j) {
  ScalingCurveSpec s;
  s.base = run_spec_from_json(j);
  s.base.model.gca.placements.clear();
  if (!j.contains("scaling")) throw ConfigError("missing 'scaling' section");
  const auto& sc = j.at("scaling");
  nlohmann::json g = to_json(s.base.model.gca);
  if (j.contains("model") && j.at("model").contains("gca")) g.update(j.at("model").at("gca"));
  if (sc.contains("gca")) g.update(sc.at("gca"));
  s.gca_variant = gca_config_from_json(g);
  s.width_grid = sc.at("width_grid").get<std::vector<std::size_t>>();
  s.include_matched = sc.value("include_matched", s.include_matched);
  s.tolerance = sc.value("tolerance", s.tolerance);
  return s;
}

ScalingReport run_scaling_curve(const ScalingCurveSpec& spec, const SweepOptions& options) {
  spec.validate();
  if (options.out_dir.empty()) throw ConfigError("scaling curve needs an output directory");

  std::vector<std::pair<std::string, RunSpec>> points;  // label, spec
  for (auto w : spec.width_grid) {
    RunSpec s = spec.base;
    s.model.d = w;
    s.config_id = spec.base.config_id + "__baseline_d" + std::to_string(w);
    points.emplace_back("baseline", s);
  }
  RunSpec gca = spec.base;
  gca.model.gca = spec.gca_variant;
  gca.config_id = spec.base.config_id + "__gca_d" + std::to_string(gca.model.d);
  points.emplace_back("gca", gca);

  ScalingReport report;
  report.gca_params = parameter_count(gca.model);
  if (spec.include_matched) {
    const MatchResult m = match_parameters(spec.base.model, report.gca_params, spec.tolerance);
    RunSpec s = spec.base;
    s.model = m.config;
    s.config_id = spec.base.config_id + "__matched_d" + std::to_string(m.config.d) + "_f" + std::to_string(m.config.ffn_width());
    points.emplace_back("matched", s);
  }

  std::vector<Task> tasks;
  for (const auto& [label, s] : points)
    for (auto seed : s.seeds) tasks.push_back({s.config_id, &s, seed});
  std::size_t executed = 0, skipped = 0;
  const auto runs = run_tasks(tasks, options, 1, executed, skipped);

  for (const auto& [label, s] : points) {
    ScalingPoint p;
    p.label = label;
    p.d = s.model.d;
    p.ffn_hidden = s.model.ffn_width();
    p.param_count = parameter_count(s.model);
    std::vector<MetricsRecord> recs;
    for (const auto& r : runs)
      if (!r.failed && r.record.config_id == s.config_id) recs.push_back(r.record);
    if (!recs.empty()) {
      const auto agg = aggregate_over_seeds(recs);
      p.param_count = static_cast<std::size_t>(agg.param_count);
      p.ndcg10_a = agg.stats.at("ndcg10_a");
      p.ndcg10_b = agg.stats.at("ndcg10_b");
    }
    p.records = std::move(recs);
    if (label == "gca") report.gca_params = p.param_count;
    report.points.push_back(std::move(p));
  }
  for (std::size_t i = 0; i < report.points.size(); ++i) {
    const auto& p = report.points[i];
    if (p.label == "gca") continue;
    const double e = std::abs(static_cast<double>(p.param_count) - static_cast<double>(report.gca_params)) /
                     static_cast<double>(report.gca_params);
    if (!report.closest_baseline || e < report.closest_relative_error) {
      report.closest_baseline = i;
      report.closest_relative_error = e;
    }
  }
  write_results_csv((fs::path(options.out_dir) / "results.csv").string(), runs);
  write_scaling_csv((fs::path(options.out_dir) / "scaling.csv").string(), report);
  return report;
}

void write_scaling_csv(const std::string& path, const ScalingReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "label,d,ffn_hidden,param_count,ndcg10_a_mean,ndcg10_a_sd,ndcg10_b_mean,ndcg10_b_sd,seeds\n";
  for (const auto& p : report.points) {
    out << p.label << ',' << p.d << ',' << p.ffn_hidden << ',' << p.param_count << ',' << p.ndcg10_a.mean << ','
        << p.ndcg10_a.sd << ',' << p.ndcg10_b.mean << ',' << p.ndcg10_b.sd << ',' << p.records.size() << '\n';
  }
  write_file_atomic(path, out.str());
}

nlohmann::json to_json(const ScalingReport& report) {
  nlohmann::json j;
  j["gca_params"] = report.gca_params;
  j["closest_baseline"] = report.closest_baseline ? nlohmann::json(*report.closest_baseline) : nlohmann::json();
  j["closest_relative_error"] = report.closest_relative_error;
  j["points"] = nlohmann::json::array();
  for (const auto& p : report.points) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : p.records) records.push_back(to_json(r));
    j["points"].push_back({{"label", p.label},
                           {"d", p.d},
                           {"ffn_hidden", p.ffn_hidden},
                           {"param_count", p.param_count},
                           {"ndcg10_a", {{"mean", p.ndcg10_a.mean}, {"sd", p.ndcg10_a.sd}}},
                           {"ndcg10_b", {{"mean", p.ndcg10_b.mean}, {"sd", p.ndcg10_b.sd}}},
                           {"records", records}});
  }
  return j;
}

}  // namespace gcalab
