#include "gcalab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "gcalab/error.hpp"

namespace gcalab {

std::size_t rank_of(std::span<const double> scores, std::size_t positive_index) {
  if (positive_index >= scores.size()) throw ContractError("positive index outside the candidate list");
  const double p = scores[positive_index];
  std::size_t ahead = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > p || (scores[j] == p && j < positive_index)) ++ahead;
  }
  return ahead + 1;
}

double ndcg_at_k(std::span<const double> scores, std::size_t positive_index, std::size_t k) {
  if (k < 1) throw ContractError("ndcg cutoff k must be >= 1");
  const std::size_t rank = rank_of(scores, positive_index);
  return rank <= k ? 1.0 / std::log2(1.0 + static_cast<double>(rank)) : 0.0;
}

double auc(std::span<const double> scores, std::size_t positive_index) {
  if (scores.size() < 2) throw ContractError("auc needs at least two candidates");
  if (positive_index >= scores.size()) throw ContractError("positive index outside the candidate list");
  const double p = scores[positive_index];
  double credit = 0.0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j == positive_index) continue;
    if (scores[j] < p) credit += 1.0;
    else if (scores[j] == p) credit += 0.5;
  }
  return credit / static_cast<double>(scores.size() - 1);
}

void cosine_probe_update(CosineAccumulator& acc, const Tensor& x, const Tensor& xprime, const Mask& mask) {
  if (x.shape() != xprime.shape() || x.rank() != 3) {
    throw DimensionError("cosine probe shapes differ: " + shape_str(x.shape()) + " vs " + shape_str(xprime.shape()));
  }
  const std::size_t B = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (mask.shape != Shape{B, l}) throw DimensionError("cosine probe mask " + shape_str(mask.shape) + " mismatch");
  const auto a = x.data();
  const auto c = xprime.data();
  for (std::size_t r = 0; r < B * l; ++r) {
    if (!mask.values[r]) continue;
    double dot = 0, na = 0, nc = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += a[r * d + j] * c[r * d + j];
      na += a[r * d + j] * a[r * d + j];
      nc += c[r * d + j] * c[r * d + j];
    }
    const double denom = std::sqrt(na * nc);
    acc.sum += denom > 0 ? std::min(1.0, std::abs(dot) / denom) : 0.0;
    acc.count += 1.0;
  }
}

void cosine_probe_update(GcaProbe& probe, const Tensor& x, const Tensor& xprime, const Mask& mask) {
  cosine_probe_update(probe.xxprime, x, xprime, mask);
}

double pearson_r(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ContractError("pearson_r: series lengths differ");
  if (xs.size() < 3) throw ContractError("pearson_r: need at least 3 points");
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0 || syy == 0) throw UndefinedCorrelationError("pearson_r: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

FiveNumberSummary five_number_summary(std::vector<double> values) {
  if (values.empty()) throw ContractError("five-number summary of an empty series");
  std::sort(values.begin(), values.end());
  auto quantile = [&](double p) {
    const double h = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  return {values.front(), quantile(0.25), quantile(0.5), quantile(0.75), values.back()};
}

// --- MetricsRecord ---------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_unit(const char* name, double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw ContractError(std::string("metric ") + name + " outside [0,1]: " + fmt_double(v));
}

}  // namespace

void MetricsRecord::validate() const {
  check_unit("ndcg1_a", ndcg1_a);
  check_unit("ndcg1_b", ndcg1_b);
  check_unit("ndcg10_a", ndcg10_a);
  check_unit("ndcg10_b", ndcg10_b);
  check_unit("auc_a", auc_a);
  check_unit("auc_b", auc_b);
  for (const auto& [name, v] : {std::pair{"cos_xxprime_a", cos_xxprime_a}, std::pair{"cos_xxprime_b", cos_xxprime_b},
                                std::pair{"cos_xy_a", cos_xy_a}, std::pair{"cos_xy_b", cos_xy_b}}) {
    if (v) check_unit(name, *v);
  }
  if (param_count <= 0) throw ContractError("param_count must be positive");
}

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "config_id", "seed",     "param_count",   "epoch_of_best", "ndcg1_a",  "ndcg1_b",  "ndcg10_a",
      "ndcg10_b",  "auc_a",    "auc_b",         "cos_xxprime_a", "cos_xxprime_b", "cos_xy_a", "cos_xy_b"};
  return cols;
}

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names(metrics_columns().begin() + 4, metrics_columns().end());
  return names;
}

std::string metrics_csv_header() {
  std::string out;
  for (const auto& c : metrics_columns()) out += (out.empty() ? "" : ",") + c;
  return out;
}

std::optional<double> metric_value(const MetricsRecord& r, std::string_view name) {
  if (name == "ndcg1_a") return r.ndcg1_a;
  if (name == "ndcg1_b") return r.ndcg1_b;
  if (name == "ndcg10_a") return r.ndcg10_a;
  if (name == "ndcg10_b") return r.ndcg10_b;
  if (name == "auc_a") return r.auc_a;
  if (name == "auc_b") return r.auc_b;
  if (name == "cos_xxprime_a") return r.cos_xxprime_a;
  if (name == "cos_xxprime_b") return r.cos_xxprime_b;
  if (name == "cos_xy_a") return r.cos_xy_a;
  if (name == "cos_xy_b") return r.cos_xy_b;
  throw ContractError("unknown metric '" + std::string(name) + "'");
}

std::string to_csv_row(const MetricsRecord& r) {
  if (r.config_id.find_first_of(",\"\n") != std::string::npos) {
    throw ContractError("config_id may not contain commas, quotes or newlines: " + r.config_id);
  }
  std::ostringstream os;
  os << r.config_id << ',' << r.seed << ',' << r.param_count << ',' << r.epoch_of_best;
  for (const auto& name : metric_names()) {
    auto v = metric_value(r, name);
    os << ',' << (v ? fmt_double(*v) : "");
  }
  return os.str();
}

MetricsRecord from_csv_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  if (cells.size() != metrics_columns().size()) throw ParseError("metrics row has " + std::to_string(cells.size()) + " cells");
  auto num = [&](std::size_t i) -> std::optional<double> {
    if (cells[i].empty()) return std::nullopt;
    return std::strtod(cells[i].c_str(), nullptr);
  };
  MetricsRecord r;
  r.config_id = cells[0];
  r.seed = std::stoll(cells[1]);
  r.param_count = std::stoll(cells[2]);
  r.epoch_of_best = std::stoi(cells[3]);
  r.ndcg1_a = num(4).value_or(0);
  r.ndcg1_b = num(5).value_or(0);
  r.ndcg10_a = num(6).value_or(0);
  r.ndcg10_b = num(7).value_or(0);
  r.auc_a = num(8).value_or(0);
  r.auc_b = num(9).value_or(0);
  r.cos_xxprime_a = num(10);
  r.cos_xxprime_b = num(11);
  r.cos_xy_a = num(12);
  r.cos_xy_b = num(13);
  return r;
}

nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json j;
  j["config_id"] = r.config_id;
  j["seed"] = r.seed;
  j["param_count"] = r.param_count;
  j["epoch_of_best"] = r.epoch_of_best;
  for (const auto& name : metric_names()) {
    auto v = metric_value(r, name);
    j[name] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  }
  return j;
}

MetricsRecord metrics_from_json(const nlohmann::json& j) {
  auto opt = [&](const char* k) -> std::optional<double> {
    if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
    return j.at(k).get<double>();
  };
  MetricsRecord r;
  r.config_id = j.at("config_id").get<std::string>();
  r.seed = j.at("seed").get<long long>();
  r.param_count = j.at("param_count").get<long long>();
  r.epoch_of_best = j.at("epoch_of_best").get<int>();
  r.ndcg1_a = j.at("ndcg1_a").get<double>();
  r.ndcg1_b = j.at("ndcg1_b").get<double>();
  r.ndcg10_a = j.at("ndcg10_a").get<double>();
  r.ndcg10_b = j.at("ndcg10_b").get<double>();
  r.auc_a = j.at("auc_a").get<double>();
  r.auc_b = j.at("auc_b").get<double>();
  r.cos_xxprime_a = opt("cos_xxprime_a");
  r.cos_xxprime_b = opt("cos_xxprime_b");
  r.cos_xy_a = opt("cos_xy_a");
  r.cos_xy_b = opt("cos_xy_b");
  return r;
}

SeedAggregate aggregate_over_seeds(std::span<const MetricsRecord> records) {
  if (records.empty()) throw ContractError("aggregate_over_seeds: no records");
  SeedAggregate agg;
  agg.config_id = records.front().config_id;
  agg.count = records.size();
  agg.param_count = records.front().param_count;
  for (const auto& r : records) {
    if (r.config_id != agg.config_id) throw ContractError("aggregate_over_seeds: mixed config ids");
  }
  for (const auto& name : metric_names()) {
    std::vector<double> xs;
    for (const auto& r : records)
      if (auto v = metric_value(r, name)) xs.push_back(*v);
    if (xs.empty()) continue;
    MetricStat s;
    s.count = xs.size();
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
      double ss = 0;
      for (double x : xs) ss += (x - s.mean) * (x - s.mean);
      s.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    agg.stats[name] = s;
  }
  return agg;
}

}  // namespace gcalab
