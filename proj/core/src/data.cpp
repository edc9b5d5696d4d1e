#include "gcalab/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "gcalab/error.hpp"

namespace gcalab {

std::map<std::int64_t, std::vector<Interaction>> InteractionLog::by_user() const {
  std::map<std::int64_t, std::vector<Interaction>> out;
  for (const auto& r : rows) out[r.user].push_back(r);
  for (auto& [u, v] : out) {
    std::stable_sort(v.begin(), v.end(), [](const auto& x, const auto& y) { return x.timestamp < y.timestamp; });
  }
  return out;
}

// --- synthetic generator ------------------------------------------------------

void SynthSpec::validate() const {
  if (users < 1) throw ConfigError("synthetic data needs at least one user");
  if (cross_corr < 0.0 || cross_corr > 1.0) throw ConfigError("cross_corr must lie in [0,1]");
  if (seq_min < 1 || seq_min > seq_max) throw ConfigError("seq_len_range must satisfy 1 <= min <= max");
  if (items_per_domain < seq_max) {
    throw ConfigError("items_per_domain (" + std::to_string(items_per_domain) + ") < max sequence length (" +
                      std::to_string(seq_max) + ")");
  }
  if (latent_dim < 1) throw ConfigError("latent_dim must be positive");
}

nlohmann::json to_json(const SynthSpec& s) {
  return {{"users", s.users},           {"items_per_domain", s.items_per_domain},
          {"cross_corr", s.cross_corr}, {"seq_len_range", {s.seq_min, s.seq_max}},
          {"seed", s.seed},             {"latent_dim", s.latent_dim},
          {"sharpness", s.sharpness},   {"recency", s.recency}};
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.users = j.value("users", s.users);
  s.items_per_domain = j.value("items_per_domain", s.items_per_domain);
  s.cross_corr = j.value("cross_corr", s.cross_corr);
  if (j.contains("seq_len_range")) {
    const auto& r = j.at("seq_len_range");
    if (!r.is_array() || r.size() != 2) throw ConfigError("seq_len_range must be [min, max]");
    s.seq_min = r[0].get<std::size_t>();
    s.seq_max = r[1].get<std::size_t>();
  }
  s.seed = j.value("seed", s.seed);
  s.latent_dim = j.value("latent_dim", s.latent_dim);
  s.sharpness = j.value("sharpness", s.sharpness);
  s.recency = j.value("recency", s.recency);
  return s;
}

SynthLatents draw_latents(const SynthSpec& spec) {
  spec.validate();
  Rng rng = Rng(spec.seed).split("synth.latents");
  const std::size_t k = spec.latent_dim;
  SynthLatents lat;
  lat.dim = k;
  const double rho = spec.cross_corr;
  const double rest = std::sqrt(1.0 - rho * rho);
  lat.user_a.resize(spec.users * k);
  lat.user_b.resize(spec.users * k);
  for (std::size_t i = 0; i < spec.users * k; ++i) {
    const double ua = rng.normal();
    const double z = rng.normal();
    lat.user_a[i] = ua;
    lat.user_b[i] = rho * ua + rest * z;
  }
  lat.item_a.resize(spec.items_per_domain * k);
  lat.item_b.resize(spec.items_per_domain * k);
  for (auto& v : lat.item_a) v = rng.normal();
  for (auto& v : lat.item_b) v = rng.normal();
  return lat;
}

InteractionLog generate_synthetic(const SynthSpec& spec) {
  const SynthLatents lat = draw_latents(spec);
  const std::size_t k = lat.dim;
  const std::size_t V = spec.items_per_domain;
  const double temp = spec.sharpness / std::sqrt(static_cast<double>(k));
  const Rng seq_root = Rng(spec.seed).split("synth.sequences");

  InteractionLog log;
  log.vocab_a = V;
  log.vocab_b = V;
  std::vector<double> logits(V);
  for (std::size_t u = 0; u < spec.users; ++u) {
    Rng rng = seq_root.split(static_cast<std::uint64_t>(u));
    const auto n_a = static_cast<std::size_t>(rng.uniform_int(spec.seq_min, spec.seq_max));
    const auto n_b = static_cast<std::size_t>(rng.uniform_int(spec.seq_min, spec.seq_max));
    std::vector<Domain> order(n_a, Domain::kA);
    order.insert(order.end(), n_b, Domain::kB);
    std::shuffle(order.begin(), order.end(), rng.engine());

    std::vector<std::uint8_t> used_a(V, 0), used_b(V, 0);
    const double* prev = nullptr;
    std::int64_t t = 0;
    for (Domain dom : order) {
      const bool is_a = dom == Domain::kA;
      const double* user = (is_a ? lat.user_a : lat.user_b).data() + u * k;
      const auto& items = is_a ? lat.item_a : lat.item_b;
      auto& used = is_a ? used_a : used_b;
      double peak = -INFINITY;
      for (std::size_t j = 0; j < V; ++j) {
        if (used[j]) continue;
        const double* v = items.data() + j * k;
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += v[c] * (user[c] + (prev ? spec.recency * prev[c] : 0.0));
        logits[j] = temp * s;
        peak = std::max(peak, logits[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < V; ++j) {
        logits[j] = used[j] ? 0.0 : std::exp(logits[j] - peak);
        total += logits[j];
      }
      double draw = rng.uniform(0.0, total);
      std::size_t pick = V;
      for (std::size_t j = 0; j < V; ++j) {
        if (used[j]) continue;
        pick = j;
        draw -= logits[j];
        if (draw <= 0.0) break;
      }
      used[pick] = 1;
      prev = items.data() + pick * k;
      log.rows.push_back({static_cast<std::int64_t>(u + 1), static_cast<std::int64_t>(pick + 1), dom, ++t});
    }
  }
  return log;
}

// --- TSV ingestion -----------------------------------------------------------

namespace {

bool parse_int(const std::string& s, std::int64_t& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> f;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    f.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return f;
}

// Dense ids 1..V in sorted raw order; numeric ordering when all ids are integers.
std::vector<std::pair<std::string, std::int64_t>> dense_ids(std::vector<std::string> raw) {
  std::sort(raw.begin(), raw.end());
  raw.erase(std::unique(raw.begin(), raw.end()), raw.end());
  const bool numeric = std::all_of(raw.begin(), raw.end(), [](const auto& s) {
    std::int64_t v;
    return parse_int(s, v);
  });
  if (numeric) {
    std::sort(raw.begin(), raw.end(), [](const auto& x, const auto& y) {
      std::int64_t a, b;
      parse_int(x, a);
      parse_int(y, b);
      return a < b;
    });
  }
  std::vector<std::pair<std::string, std::int64_t>> out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out.emplace_back(raw[i], static_cast<std::int64_t>(i + 1));
  return out;
}

}  // namespace

LoadedLog load_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open interaction log '" + path + "'");
  struct Raw {
    std::string user, item;
    Domain domain;
    std::int64_t ts;
  };
  std::vector<Raw> raw;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_tabs(line);
    if (f.size() != 4) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields, got " +
                       std::to_string(f.size()));
    }
    std::int64_t ts;
    if (!parse_int(f[3], ts)) {
      if (raw.empty() && lineno == 1) continue;  // header
      throw ParseError(path + ":" + std::to_string(lineno) + ": bad timestamp '" + f[3] + "'");
    }
    Domain dom;
    if (f[2] == "A" || f[2] == "a") dom = Domain::kA;
    else if (f[2] == "B" || f[2] == "b") dom = Domain::kB;
    else throw ParseError(path + ":" + std::to_string(lineno) + ": domain must be A or B, got '" + f[2] + "'");
    if (f[0].empty() || f[1].empty()) throw ParseError(path + ":" + std::to_string(lineno) + ": empty id");
    raw.push_back({f[0], f[1], dom, ts});
  }

  LoadedLog out;
  std::vector<std::string> users, items_a, items_b;
  for (const auto& r : raw) {
    users.push_back(r.user);
    (r.domain == Domain::kA ? items_a : items_b).push_back(r.item);
  }
  out.mapping.users = dense_ids(users);
  out.mapping.items_a = dense_ids(items_a);
  out.mapping.items_b = dense_ids(items_b);
  auto index = [](const auto& pairs) {
    std::unordered_map<std::string, std::int64_t> m;
    for (const auto& [k, v] : pairs) m.emplace(k, v);
    return m;
  };
  const auto uid = index(out.mapping.users);
  const auto ia = index(out.mapping.items_a);
  const auto ib = index(out.mapping.items_b);
  out.log.vocab_a = out.mapping.items_a.size();
  out.log.vocab_b = out.mapping.items_b.size();

  InteractionLog dense;
  for (const auto& r : raw) {
    dense.rows.push_back({uid.at(r.user), (r.domain == Domain::kA ? ia : ib).at(r.item), r.domain, r.ts});
  }
  for (auto& [u, rows] : dense.by_user()) {
    for (std::size_t i = 1; i < rows.size(); ++i) rows[i].timestamp = std::max(rows[i].timestamp, rows[i - 1].timestamp + 1);
    out.log.rows.insert(out.log.rows.end(), rows.begin(), rows.end());
  }
  return out;
}

void write_log(const std::string& path, const InteractionLog& log) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << "user\titem\tdomain\ttimestamp\n";
  for (const auto& r : log.rows) {
    out << r.user << '\t' << r.item << '\t' << (r.domain == Domain::kA ? "A" : "B") << '\t' << r.timestamp << '\n';
  }
  if (!out) throw Error("failed writing '" + path + "'");
}

void write_id_mapping(const std::string& prefix, const IdMapping& mapping) {
  auto dump = [&](const std::string& name, const auto& pairs) {
    std::ofstream out(prefix + name);
    if (!out) throw Error("cannot open '" + prefix + name + "' for writing");
    out << "raw_id\tdense_id\n";
    for (const auto& [raw, dense] : pairs) out << raw << '\t' << dense << '\n';
  };
  dump("users.tsv", mapping.users);
  dump("items_A.tsv", mapping.items_a);
  dump("items_B.tsv", mapping.items_b);
}

// --- splits ------------------------------------------------------------------

const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

std::size_t SplitDataset::visible(std::size_t n, Split s) { return s == Split::kTest ? n - 1 : n - 2; }

std::int64_t SplitDataset::target(std::size_t u, Domain d, Split s) const {
  if (s == Split::kTrain) throw ContractError("training targets are drawn per epoch");
  const auto& items = d == Domain::kA ? users.at(u).a_items : users.at(u).b_items;
  return items[visible(items.size(), s)];
}

SplitDataset split_leave_one_out(const InteractionLog& log, std::size_t min_len) {
  if (min_len < 3) throw ConfigError("min_len must be at least 3 (train + val + test)");
  SplitDataset ds;
  ds.vocab_a = log.vocab_a;
  ds.vocab_b = log.vocab_b;
  for (const auto& [u, rows] : log.by_user()) {
    UserHistory h;
    h.user = u;
    for (const auto& r : rows) {
      if (r.domain == Domain::kA) {
        h.a_items.push_back(r.item);
        h.a_ts.push_back(r.timestamp);
      } else {
        h.b_items.push_back(r.item);
        h.b_ts.push_back(r.timestamp);
      }
    }
    if (h.a_items.size() < min_len || h.b_items.size() < min_len) {
      ++ds.dropped;
      continue;
    }
    ds.users.push_back(std::move(h));
  }
  if (ds.users.empty()) {
    throw EmptyDatasetError("no user has at least " + std::to_string(min_len) + " interactions in both domains (" +
                            std::to_string(ds.dropped) + " dropped)");
  }
  return ds;
}

std::vector<std::int64_t> sample_negatives(const std::vector<std::int64_t>& history, std::size_t vocab, std::size_t k,
                                           Rng& rng) {
  std::vector<std::uint8_t> seen(vocab + 1, 0);
  for (auto i : history) {
    if (i >= 1 && static_cast<std::size_t>(i) <= vocab) seen[static_cast<std::size_t>(i)] = 1;
  }
  std::vector<std::int64_t> pool;
  pool.reserve(vocab);
  for (std::size_t i = 1; i <= vocab; ++i)
    if (!seen[i]) pool.push_back(static_cast<std::int64_t>(i));
  if (pool.size() < k) {
    throw SamplingError("need " + std::to_string(k) + " negatives but only " + std::to_string(pool.size()) +
                        " items lie outside the history");
  }
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(pool.size() - 1)));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

UserInput input_for(const UserHistory& h, Split split) {
  const auto na = SplitDataset::visible(h.a_items.size(), split);
  const auto nb = SplitDataset::visible(h.b_items.size(), split);
  UserInput in;
  in.a_items.assign(h.a_items.begin(), h.a_items.begin() + static_cast<std::ptrdiff_t>(na));
  in.a_ts.assign(h.a_ts.begin(), h.a_ts.begin() + static_cast<std::ptrdiff_t>(na));
  in.b_items.assign(h.b_items.begin(), h.b_items.begin() + static_cast<std::ptrdiff_t>(nb));
  in.b_ts.assign(h.b_ts.begin(), h.b_ts.begin() + static_cast<std::ptrdiff_t>(nb));
  return in;
}

ModelBatch make_model_batch(const std::vector<const UserInput*>& users, std::size_t vocab_a, std::size_t max_len,
                            bool combined) {
  if (users.empty()) throw ContractError("empty batch");
  if (max_len < 1) throw ConfigError("max_len must be positive");
  const std::size_t B = users.size();
  auto tail = [&](std::size_t n) { return n > max_len ? n - max_len : 0; };
  std::size_t la = 1, lb = 1, lab = 1;
  for (const auto* u : users) {
    const std::size_t na = u->a_items.size() - tail(u->a_items.size());
    const std::size_t nb = u->b_items.size() - tail(u->b_items.size());
    la = std::max(la, na);
    lb = std::max(lb, nb);
    lab = std::max(lab, na + nb);
  }
  std::vector<std::int64_t> ia(B * la, 0), ib(B * lb, 0), iab(B * lab, 0);
  std::vector<std::int64_t> pa(B * la, -1), pb(B * lb, -1);
  for (std::size_t r = 0; r < B; ++r) {
    const auto& u = *users[r];
    const std::size_t sa = tail(u.a_items.size()), sb = tail(u.b_items.size());
    const std::size_t na = u.a_items.size() - sa, nb = u.b_items.size() - sb;
    for (std::size_t i = 0; i < na; ++i) ia[r * la + i] = u.a_items[sa + i];
    for (std::size_t i = 0; i < nb; ++i) ib[r * lb + i] = u.b_items[sb + i];
    std::size_t i = 0, j = 0, k = 0;
    while (i < na || j < nb) {
      const bool take_a = j >= nb || (i < na && u.a_ts[sa + i] <= u.b_ts[sb + j]);
      if (take_a) {
        iab[r * lab + k] = u.a_items[sa + i];
        pa[r * la + i++] = static_cast<std::int64_t>(k);
      } else {
        iab[r * lab + k] = static_cast<std::int64_t>(vocab_a) + u.b_items[sb + j];
        pb[r * lb + j++] = static_cast<std::int64_t>(k);
      }
      ++k;
    }
  }
  ModelBatch mb;
  mb.a = SequenceBatch::from_ids(IndexTensor({B, la}, std::move(ia)), Domain::kA);
  mb.b = SequenceBatch::from_ids(IndexTensor({B, lb}, std::move(ib)), Domain::kB);
  if (combined) {
    mb.ab = SequenceBatch::from_ids(IndexTensor({B, lab}, std::move(iab)), Domain::kCombined);
    mb.a_in_ab = IndexTensor({B, la}, std::move(pa));
    mb.b_in_ab = IndexTensor({B, lb}, std::move(pb));
  }
  return mb;
}

EvalCandidates build_eval_candidates(const SplitDataset& ds, Split split, std::size_t negatives, const Rng& rng) {
  if (split == Split::kTrain) throw ContractError("evaluation candidates are built for val or test");
  const Rng root = rng.split(to_string(split));
  EvalCandidates ec;
  for (std::size_t u = 0; u < ds.size(); ++u) {
    Rng r = root.split(static_cast<std::uint64_t>(u));
    for (Domain d : {Domain::kA, Domain::kB}) {
      const auto& hist = d == Domain::kA ? ds.users[u].a_items : ds.users[u].b_items;
      auto cands = sample_negatives(hist, d == Domain::kA ? ds.vocab_a : ds.vocab_b, negatives, r);
      const auto pos = static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(negatives)));
      cands.insert(cands.begin() + static_cast<std::ptrdiff_t>(pos), ds.target(u, d, split));
      (d == Domain::kA ? ec.a : ec.b).push_back(std::move(cands));
      (d == Domain::kA ? ec.pos_a : ec.pos_b).push_back(pos);
    }
  }
  return ec;
}

std::vector<TrainingExample> build_training_examples(const SplitDataset& ds, Rng& rng) {
  std::vector<TrainingExample> out;
  out.reserve(ds.size());
  auto cut = [&](const std::vector<std::int64_t>& items, const std::vector<std::int64_t>& ts,
                 std::vector<std::int64_t>& in_items, std::vector<std::int64_t>& in_ts) -> std::int64_t {
    const std::size_t n = SplitDataset::visible(items.size(), Split::kTrain);
    std::size_t c = n;
    std::int64_t target = 0;
    if (n >= 2) {
      c = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(n - 1)));
      target = items[c];
    }
    in_items.assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(c));
    in_ts.assign(ts.begin(), ts.begin() + static_cast<std::ptrdiff_t>(c));
    return target;
  };
  for (const auto& h : ds.users) {
    TrainingExample ex;
    ex.target_a = cut(h.a_items, h.a_ts, ex.input.a_items, ex.input.a_ts);
    ex.target_b = cut(h.b_items, h.b_ts, ex.input.b_items, ex.input.b_ts);
    out.push_back(std::move(ex));
  }
  return out;
}

DomainTargets make_training_targets(const SplitDataset& ds, const std::vector<std::size_t>& user_idx,
                                    const std::vector<TrainingExample>& examples, Domain d, std::size_t negatives,
                                    Rng& rng) {
  const std::size_t B = user_idx.size(), c = 1 + negatives;
  DomainTargets t;
  t.valid.assign(B, 0);
  std::vector<std::int64_t> cand(B * c, 1);
  for (std::size_t r = 0; r < B; ++r) {
    const std::size_t u = user_idx[r];
    const auto target = d == Domain::kA ? examples[u].target_a : examples[u].target_b;
    if (target == 0) continue;
    t.valid[r] = 1;
    const auto& hist = d == Domain::kA ? ds.users[u].a_items : ds.users[u].b_items;
    const auto negs = sample_negatives(hist, d == Domain::kA ? ds.vocab_a : ds.vocab_b, negatives, rng);
    cand[r * c] = target;
    std::copy(negs.begin(), negs.end(), cand.begin() + static_cast<std::ptrdiff_t>(r * c + 1));
  }
  t.candidates = IndexTensor({B, c}, std::move(cand));
  return t;
}

}  // namespace gcalab
