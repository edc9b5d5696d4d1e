#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "gcalab/error.hpp"
#include "gcalab/runner.hpp"

namespace gcalab {

void TrainingConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (negatives_per_pos < 1) throw ConfigError("negatives_per_pos must be positive");
  if (eval_negatives < 1) throw ConfigError("eval_negatives must be positive");
  if (min_len < 3) throw ConfigError("min_len must be at least 3");
}

nlohmann::json to_json(const TrainingConfig& t) {
  return {{"epochs", t.epochs},
          {"patience", t.patience},
          {"batch_size", t.batch_size},
          {"lr", t.lr},
          {"negatives_per_pos", t.negatives_per_pos},
          {"eval_negatives", t.eval_negatives},
          {"min_len", t.min_len},
          {"optimizer", "adam"}};
}

TrainingConfig training_config_from_json(const nlohmann::json& j) {
  TrainingConfig t;
  t.epochs = j.value("epochs", t.epochs);
  t.patience = j.value("patience", t.patience);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lr = j.value("lr", t.lr);
  t.negatives_per_pos = j.value("negatives_per_pos", t.negatives_per_pos);
  t.eval_negatives = j.value("eval_negatives", t.eval_negatives);
  t.min_len = j.value("min_len", t.min_len);
  if (j.contains("optimizer") && j.at("optimizer") != "adam") throw ConfigError("only the adam optimizer is available");
  return t;
}

void DataSource::validate() const {
  if (synthetic && !path.empty()) throw ConfigError("data: give either 'synthetic' or 'path', not both");
  if (!synthetic && path.empty()) throw ConfigError("data: missing 'synthetic' spec or 'path'");
  if (synthetic) synthetic->validate();
}

void RunSpec::validate() const {
  if (config_id.empty()) throw ConfigError("config id must not be empty");
  model.validate();
  data.validate();
  training.validate();
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size()) throw ConfigError("seeds must be distinct");
}

nlohmann::json to_json(const RunSpec& s) {
  nlohmann::json data;
  if (s.data.synthetic) data["synthetic"] = to_json(*s.data.synthetic);
  else data["path"] = s.data.path;
  return {{"id", s.config_id},
          {"model", to_json(s.model)},
          {"data", data},
          {"training", to_json(s.training)},
          {"seeds", s.seeds},
          {"output_dir", s.output_dir}};
}

RunSpec run_spec_from_json(const nlohmann::json& j) {
  try {
    RunSpec s;
    s.config_id = j.value("id", s.config_id);
    if (j.contains("model")) s.model = model_config_from_json(j.at("model"));
    if (j.contains("data")) {
      const auto& d = j.at("data");
      if (d.contains("synthetic")) s.data.synthetic = synth_spec_from_json(d.at("synthetic"));
      s.data.path = d.value("path", std::string());
    } else {
      s.data.synthetic = SynthSpec{};
    }
    if (j.contains("training")) s.training = training_config_from_json(j.at("training"));
    if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    s.output_dir = j.value("output_dir", std::string());
    if (s.data.synthetic) {
      s.model.vocab_a = s.data.synthetic->items_per_domain;
      s.model.vocab_b = s.data.synthetic->items_per_domain;
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  try {
    return nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

SplitDataset load_dataset(const DataSource& data, std::size_t min_len, InteractionLog* log_out) {
  data.validate();
  InteractionLog log = data.synthetic ? generate_synthetic(*data.synthetic) : load_log(data.path).log;
  SplitDataset ds = split_leave_one_out(log, min_len);
  if (log_out) *log_out = std::move(log);
  return ds;
}

// --- results JSON --------------------------------------------------------------

nlohmann::json to_json(const RunResult& r) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& e : r.history) {
    hist.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_ndcg10", e.val_ndcg10}, {"seconds", e.seconds}});
  }
  return {{"record", to_json(r.record)}, {"failed", r.failed}, {"error", r.error},
          {"history", hist},             {"resolved", r.resolved}, {"seconds", r.seconds}};
}

RunResult run_result_from_json(const nlohmann::json& j) {
  RunResult r;
  r.record = metrics_from_json(j.at("record"));
  r.failed = j.value("failed", false);
  r.error = j.value("error", std::string());
  for (const auto& e : j.value("history", nlohmann::json::array())) {
    r.history.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                         e.at("val_ndcg10").get<double>(), e.at("seconds").get<double>()});
  }
  r.resolved = j.value("resolved", nlohmann::json::object());
  r.seconds = j.value("seconds", 0.0);
  return r;
}

// --- evaluation ------------------------------------------------------------------

EvalResult evaluate(const Model& model, const SplitDataset& ds, Split split, const EvalCandidates& cands,
                    std::size_t batch_size, ProbeSet* probes) {
  NoGradGuard no_grad;
  const auto& cfg = model.config();
  EvalResult res;
  const std::size_t n = ds.size();
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    std::vector<UserInput> inputs;
    inputs.reserve(end - start);
    for (std::size_t u = start; u < end; ++u) inputs.push_back(input_for(ds.users[u], split));
    std::vector<const UserInput*> ptrs;
    for (const auto& in : inputs) ptrs.push_back(&in);
    const ModelBatch mb = make_model_batch(ptrs, cfg.vocab_a, cfg.max_len, cfg.combined_thread);
    const ForwardOutput out = model.forward(mb, ForwardContext{}, probes);

    for (Domain d : {Domain::kA, Domain::kB}) {
      const auto& lists = d == Domain::kA ? cands.a : cands.b;
      const auto& pos = d == Domain::kA ? cands.pos_a : cands.pos_b;
      const std::size_t c = lists[start].size();
      std::vector<std::int64_t> flat;
      flat.reserve((end - start) * c);
      for (std::size_t u = start; u < end; ++u) flat.insert(flat.end(), lists[u].begin(), lists[u].end());
      const Tensor scores = model.score_next_item(d == Domain::kA ? out.repr_a : out.repr_b,
                                                  d == Domain::kA ? mb.a.mask : mb.b.mask,
                                                  IndexTensor({end - start, c}, std::move(flat)), d);
      const auto s = scores.data();
      if (!std::all_of(s.begin(), s.end(), [](double v) { return std::isfinite(v); }))
        throw NumericalError("non-finite scores during evaluation");
      double& n1 = d == Domain::kA ? res.ndcg1_a : res.ndcg1_b;
      double& n10 = d == Domain::kA ? res.ndcg10_a : res.ndcg10_b;
      double& a = d == Domain::kA ? res.auc_a : res.auc_b;
      for (std::size_t r = 0; r < end - start; ++r) {
        const auto row = s.subspan(r * c, c);
        n1 += ndcg_at_k(row, pos[start + r], 1);
        n10 += ndcg_at_k(row, pos[start + r], 10);
        a += auc(row, pos[start + r]);
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (double* v : {&res.ndcg1_a, &res.ndcg1_b, &res.ndcg10_a, &res.ndcg10_b, &res.auc_a, &res.auc_b}) *v *= inv;
  return res;
}

// --- training ------------------------------------------------------------------

RunResult run_train(const RunSpec& spec, std::uint64_t seed, const RunOptions& options) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };

  spec.validate();
  RunResult res;
  res.resolved = to_json(spec);
  res.resolved["seed"] = seed;
  res.record.config_id = spec.config_id;
  res.record.seed = static_cast<long long>(seed);

  std::optional<SplitDataset> owned;
  if (!options.dataset) owned = load_dataset(spec.data, spec.training.min_len);
  const SplitDataset& ds = options.dataset ? *options.dataset : *owned;

  ModelConfig cfg = spec.model;
  cfg.vocab_a = ds.vocab_a;
  cfg.vocab_b = ds.vocab_b;
  res.resolved["model"] = to_json(cfg);
  Model model = Model::build(cfg, seed);
  res.record.param_count = static_cast<long long>(model.parameter_count());

  const TrainingConfig& tc = spec.training;
  // Candidate lists depend on the data only, so every config and seed is
  // ranked against the same negatives.
  const Rng eval_rng = Rng(spec.data.synthetic ? spec.data.synthetic->seed : 0).split("eval");
  const EvalCandidates val_c = build_eval_candidates(ds, Split::kVal, tc.eval_negatives, eval_rng);
  const EvalCandidates test_c = build_eval_candidates(ds, Split::kTest, tc.eval_negatives, eval_rng);

  const Rng root(seed);
  Rng train_rng = root.split("train");
  Rng drop_rng = root.split("dropout");
  ForwardContext ctx{true, cfg.dropout_p, &drop_rng};
  Adam opt(model.params(), AdamOptions{tc.lr});

  std::vector<std::vector<double>> best;
  double best_val = -1.0;
  std::size_t since_best = 0;
  try {
    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
      const auto e0 = clock::now();
      const auto examples = build_training_examples(ds, train_rng);
      std::vector<std::size_t> order(ds.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), train_rng.engine());
      double loss_sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
        const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + tc.batch_size)));
        std::vector<const UserInput*> ptrs;
        for (auto u : idx) ptrs.push_back(&examples[u].input);
        const ModelBatch mb = make_model_batch(ptrs, cfg.vocab_a, cfg.max_len, cfg.combined_thread);
        const DomainTargets ta = make_training_targets(ds, idx, examples, Domain::kA, tc.negatives_per_pos, train_rng);
        const DomainTargets tb = make_training_targets(ds, idx, examples, Domain::kB, tc.negatives_per_pos, train_rng);
        opt.zero_grad();
        const Tensor loss = model.training_loss(mb, ta, tb, ctx);
        loss.backward();
        opt.step();
        loss_sum += loss.item();
        ++batches;
      }
      const EvalResult val = evaluate(model, ds, Split::kVal, val_c, tc.batch_size);
      const double v = 0.5 * (val.ndcg10_a + val.ndcg10_b);
      res.history.push_back({epoch, loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1)), v,
                             std::chrono::duration<double>(clock::now() - e0).count()});
      if (options.log) {
        *options.log << spec.config_id << " seed " << seed << " epoch " << epoch << " loss "
                     << res.history.back().train_loss << " val_ndcg10 " << v << '\n';
      }
      if (v > best_val) {
        best_val = v;
        best = model.params().snapshot();
        res.record.epoch_of_best = static_cast<int>(epoch);
        since_best = 0;
      } else if (++since_best >= tc.patience) {
        break;
      }
    }
  } catch (const NumericalError& e) {
    res.failed = true;
    res.error = e.what();
    res.seconds = elapsed();
    return res;
  }
  if (!best.empty()) model.params().restore(best);

  ProbeSet probes;
  const bool probing = !cfg.gca.placements.empty();
  EvalResult test;
  try {
    test = evaluate(model, ds, Split::kTest, test_c, tc.batch_size, probing ? &probes : nullptr);
  } catch (const NumericalError& e) {
    res.failed = true;
    res.error = e.what();
    res.seconds = elapsed();
    return res;
  }
  auto& r = res.record;
  r.ndcg1_a = test.ndcg1_a;
  r.ndcg1_b = test.ndcg1_b;
  r.ndcg10_a = test.ndcg10_a;
  r.ndcg10_b = test.ndcg10_b;
  r.auc_a = test.auc_a;
  r.auc_b = test.auc_b;
  if (probing) {
    r.cos_xxprime_a = probes.mean_xxprime(Domain::kA);
    r.cos_xxprime_b = probes.mean_xxprime(Domain::kB);
    r.cos_xy_a = probes.mean_xy(Domain::kA);
    r.cos_xy_b = probes.mean_xy(Domain::kB);
  }
  r.validate();
  if (!options.checkpoint_path.empty()) {
    nlohmann::json meta = res.resolved;
    meta["epoch_of_best"] = r.epoch_of_best;
    write_checkpoint(options.checkpoint_path, make_checkpoint(model, meta.dump()));
  }
  res.seconds = elapsed();
  return res;
}

// --- parameter matching ----------------------------------------------------------

MatchResult match_parameters(const ModelConfig& baseline, std::size_t target, double tolerance) {
  if (!(tolerance > 0.0)) throw ContractError("match tolerance must be positive");
  if (target == 0) throw ContractError("match target must be positive");
  baseline.validate();
  auto rel = [&](std::size_t p) {
    return std::abs(static_cast<double>(p) - static_cast<double>(target)) / static_cast<double>(target);
  };
  const std::size_t base_params = parameter_count(baseline);
  if (rel(base_params) <= tolerance) return {baseline, base_params, rel(base_params)};

  std::size_t step = baseline.heads;
  if (!baseline.gca.placements.empty()) step = std::lcm(step, baseline.gca.heads);
  auto at = [&](std::size_t d, std::size_t ffn) {
    ModelConfig c = baseline;
    c.d = d;
    c.ffn_hidden = ffn;
    return c;
  };
  auto count = [&](std::size_t d) { return parameter_count(at(d, baseline.ffn_hidden)); };

  // Smallest multiple of `step` whose count reaches the target.
  const std::size_t first = baseline.adapter_rank ? *baseline.adapter_rank / step + 1 : 1;  // keeps rank < d
  std::size_t lo = first, hi = first;
  const std::size_t cap = 1u << 14;
  while (count(hi * step) < target && hi * step < cap) hi *= 2;
  if (count(lo * step) >= target) {
    hi = lo;
  } else {
    while (hi - lo > 1) {
      const std::size_t mid = (lo + hi) / 2;
      (count(mid * step) >= target ? hi : lo) = mid;
    }
  }
  std::vector<std::size_t> widths{hi * step};
  if (hi > first) widths.push_back((hi - 1) * step);

  MatchResult best{baseline, 0, INFINITY};
  auto consider = [&](const ModelConfig& c) {
    const std::size_t p = parameter_count(c);
    if (rel(p) < best.relative_error) best = {c, p, rel(p)};
  };
  for (auto d : widths) consider(at(d, baseline.ffn_hidden));
  if (best.relative_error > tolerance) {
    // Counts are affine in the FFN width at fixed d; solve for it.
    for (auto d : widths) {
      const double c1 = static_cast<double>(parameter_count(at(d, 1)));
      const double slope = static_cast<double>(parameter_count(at(d, 2))) - c1;
      const double f = 1.0 + (static_cast<double>(target) - c1) / slope;
      for (double g : {std::floor(f), std::ceil(f)}) {
        if (g >= 1.0) consider(at(d, static_cast<std::size_t>(g)));
      }
    }
  }
  if (best.relative_error > tolerance) {
    std::ostringstream msg;
    msg << "no width reaches " << target << " parameters within " << tolerance * 100 << "%; nearest is "
        << best.params << " at d=" << best.config.d;
    throw InfeasibleMatchError(msg.str(), best.params, best.config.d);
  }
  return best;
}

}  // namespace gcalab
