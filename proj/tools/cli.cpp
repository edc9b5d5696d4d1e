#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gcalab/analysis.hpp"
#include "gcalab/error.hpp"
#include "gcalab/runner.hpp"

namespace gcalab::cli {
namespace fs = std::filesystem;

namespace {

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string in;
  std::string data;
  bool resume = false;
  std::size_t jobs = 0;
};

std::string out_dir_for(const Args& a, const RunSpec& spec) {
  if (!a.out.empty()) return a.out;
  if (!spec.output_dir.empty()) return spec.output_dir;
  return (fs::path(default_output_root()) / spec.config_id).string();
}

nlohmann::json load_config(const Args& a) {
  if (a.config.empty()) throw ConfigError("--config is required");
  return read_json_file(a.config);
}

// Command-line overrides shared by the run-producing subcommands.
void apply_overrides(RunSpec& spec, const Args& a) {
  if (a.seed) spec.seeds = {*a.seed};
  if (!a.data.empty()) {
    spec.data.synthetic.reset();
    spec.data.path = a.data;
  }
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw Error("cannot write " + p.string());
  f << s;
}

void print_runs(std::ostream& out, const std::vector<RunResult>& runs) {
  for (const auto& r : runs) {
    if (r.failed) {
      out << r.record.config_id << " seed " << r.record.seed << " FAILED: " << r.error << '\n';
      continue;
    }
    out << r.record.config_id << " seed " << r.record.seed << " ndcg10_a=" << r.record.ndcg10_a
        << " ndcg10_b=" << r.record.ndcg10_b << " params=" << r.record.param_count << '\n';
  }
}

int cmd_gen_data(const Args& a, std::ostream& out) {
  RunSpec spec = run_spec_from_json(load_config(a));
  if (!a.data.empty()) {
    spec.data.synthetic.reset();
    spec.data.path = a.data;
  }
  const fs::path dir = out_dir_for(a, spec);
  fs::create_directories(dir);
  InteractionLog log;
  if (spec.data.synthetic) {
    if (a.seed) spec.data.synthetic->seed = *a.seed;
    spec.data.synthetic->validate();
    log = generate_synthetic(*spec.data.synthetic);
    write_text(dir / "synth_spec.json", to_json(*spec.data.synthetic).dump(2) + "\n");
  } else {
    LoadedLog loaded = load_log(spec.data.path);
    write_id_mapping((dir / "").string(), loaded.mapping);
    log = std::move(loaded.log);
  }
  const fs::path path = dir / "interactions.tsv";
  write_log(path.string(), log);
  const SplitDataset ds = split_leave_one_out(log, spec.training.min_len);
  out << "wrote " << path.string() << ": " << log.rows.size() << " interactions, " << ds.users.size()
      << " users kept, " << ds.dropped << " dropped\n";
  return kOk;
}

int cmd_train(const Args& a, std::ostream& out) {
  SweepSpec spec;
  spec.base = run_spec_from_json(load_config(a));
  apply_overrides(spec.base, a);
  spec.base.validate();
  SweepOptions opt;
  opt.out_dir = out_dir_for(a, spec.base);
  opt.resume = a.resume;
  opt.log = &out;
  const SweepResult res = run_sweep(spec, opt);
  print_runs(out, res.runs);
  out << "results in " << opt.out_dir << '\n';
  return res.failed ? kRunFailure : kOk;
}

int cmd_sweep(const Args& a, std::ostream& out) {
  SweepSpec spec = sweep_spec_from_json(load_config(a));
  apply_overrides(spec.base, a);
  if (a.jobs) spec.jobs = a.jobs;
  spec.validate();
  SweepOptions opt;
  opt.out_dir = out_dir_for(a, spec.base);
  opt.resume = a.resume;
  opt.log = &out;
  const SweepResult res = run_sweep(spec, opt);
  out << res.executed << " runs executed, " << res.skipped << " resumed, " << res.failed << " failed\n";
  out << "results in " << opt.out_dir << '\n';
  return res.failed ? kRunFailure : kOk;
}

int cmd_scaling(const Args& a, std::ostream& out) {
  ScalingCurveSpec spec = scaling_spec_from_json(load_config(a));
  apply_overrides(spec.base, a);
  spec.validate();
  SweepOptions opt;
  opt.out_dir = out_dir_for(a, spec.base);
  opt.resume = a.resume;
  opt.log = &out;
  const ScalingReport rep = run_scaling_curve(spec, opt);
  const fs::path dir = opt.out_dir;
  write_text(dir / "scaling.svg", svg_scaling(rep));
  write_text(dir / "scaling.json", to_json(rep).dump(2) + "\n");
  for (const auto& p : rep.points)
    out << p.label << " d=" << p.d << " ffn=" << p.ffn_hidden << " params=" << p.param_count
        << " ndcg10_a=" << p.ndcg10_a.mean << " ndcg10_b=" << p.ndcg10_b.mean << '\n';
  if (rep.closest_baseline)
    out << "closest baseline to gca (" << rep.gca_params << " params): " << rep.points[*rep.closest_baseline].label
        << " d=" << rep.points[*rep.closest_baseline].d << ", relative error " << rep.closest_relative_error << '\n';
  bool failed = false;
  for (const auto& p : rep.points) failed |= p.records.size() != spec.base.seeds.size();
  return failed ? kRunFailure : kOk;
}

int cmd_analyze(const Args& a, std::ostream& out) {
  if (!fs::is_directory(a.in)) throw ConfigError("no results directory at '" + a.in + "'");
  const std::string dir = a.out.empty() ? (fs::path(a.in) / "analysis").string() : a.out;
  const AnalysisReport rep = analyze(a.in, dir);
  for (const auto& c : rep.correlations) {
    out << c.domain << ' ' << c.x << " vs " << c.y << " n=" << c.n << ' ';
    if (c.r)
      out << "r=" << *c.r << '\n';
    else
      out << "omitted: " << c.notice << '\n';
  }
  for (const auto& f : rep.files) out << "wrote " << f << '\n';
  return kOk;
}

int cmd_report(const Args& a, std::ostream& out) {
  if (!fs::is_directory(a.in)) throw ConfigError("no results directory at '" + a.in + "'");
  const std::string dir = a.out.empty() ? a.in : a.out;
  const auto report = write_report(a.in, dir);
  out << "wrote " << report << '\n';
  return kOk;
}

}  // namespace

std::string default_output_root() {
  const char* env = std::getenv("GCALAB_OUT");
  return env && *env ? env : "gcalab_out";
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gated cross-attention lab for dual-domain sequential recommenders", "gcalab"};
  app.require_subcommand(1);
  Args a;

  auto* gen = app.add_subcommand("gen-data", "Generate (or ingest) an interaction log");
  auto* train = app.add_subcommand("train", "Train one configuration over its seeds");
  auto* sweep = app.add_subcommand("sweep", "Run a configuration grid over seeds");
  auto* scaling = app.add_subcommand("scaling-curve", "Baseline widths against a GCA variant");
  auto* an = app.add_subcommand("analyze", "Correlations, summaries and plots of a results directory");
  auto* rep = app.add_subcommand("report", "Markdown and JSON report of a results directory");

  for (auto* sc : {gen, train, sweep, scaling}) {
    sc->add_option("--config", a.config, "JSON configuration file")->required();
    sc->add_option("--seed", a.seed, "Run only this seed (gen-data: synthetic seed)");
    sc->add_option("--out", a.out, "Output directory (default $GCALAB_OUT/<id>)");
    sc->add_option("--data", a.data, "Interaction log TSV replacing the configured data");
  }
  for (auto* sc : {train, sweep, scaling}) sc->add_flag("--resume", a.resume, "Skip cells already on disk");
  sweep->add_option("--jobs", a.jobs, "Parallel cells");
  for (auto* sc : {an, rep}) {
    sc->add_option("--in", a.in, "Results directory")->required();
    sc->add_option("--out", a.out, "Output directory");
  }

  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  if (argv.empty()) argv.push_back("gcalab");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kOk;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return kConfigError;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(a, out);
    if (train->parsed()) return cmd_train(a, out);
    if (sweep->parsed()) return cmd_sweep(a, out);
    if (scaling->parsed()) return cmd_scaling(a, out);
    if (an->parsed()) return cmd_analyze(a, out);
    if (rep->parsed()) return cmd_report(a, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kConfigError;
  } catch (const nlohmann::json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRunFailure;
  }
  return kConfigError;
}

}  // namespace gcalab::cli
