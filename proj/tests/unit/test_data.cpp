#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "gcalab/data.hpp"
#include "gcalab/error.hpp"

using namespace gcalab;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("gcalab_data_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name, const std::string& content = {}) const {
    const auto p = (path_ / name).string();
    if (!content.empty()) std::ofstream(p) << content;
    return p;
  }

 private:
  fs::path path_;
};

SynthSpec tiny(double rho = 0.7, std::uint64_t seed = 3) {
  SynthSpec s;
  s.users = 200;
  s.items_per_domain = 40;
  s.seq_min = 4;
  s.seq_max = 9;
  s.cross_corr = rho;
  s.seed = seed;
  return s;
}

double pearson_of(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// Mean cosine between the average latent of a user's A items and of their B items.
double behavioural_cosine(const SynthSpec& spec) {
  const auto lat = draw_latents(spec);
  const auto log = generate_synthetic(spec);
  const std::size_t k = lat.dim;
  double total = 0;
  std::size_t n = 0;
  for (const auto& [u, rows] : log.by_user()) {
    std::vector<double> ma(k, 0), mb(k, 0);
    for (const auto& r : rows) {
      const auto& tab = r.domain == Domain::kA ? lat.item_a : lat.item_b;
      auto& m = r.domain == Domain::kA ? ma : mb;
      for (std::size_t c = 0; c < k; ++c) m[c] += tab[(r.item - 1) * k + c];
    }
    double dot = 0, na = 0, nb = 0;
    for (std::size_t c = 0; c < k; ++c) dot += ma[c] * mb[c], na += ma[c] * ma[c], nb += mb[c] * mb[c];
    total += dot / std::sqrt(na * nb);
    ++n;
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST(Synthetic, FullCorrelationGivesIdenticalInterests) {
  const auto lat = draw_latents(tiny(1.0));
  EXPECT_EQ(lat.user_a, lat.user_b);
}

TEST(Synthetic, ZeroCorrelationGivesIndependentInterests) {
  auto s = tiny(0.0);
  s.users = 1000;
  const auto lat = draw_latents(s);
  for (std::size_t c = 0; c < lat.dim; ++c) {
    std::vector<double> x, y;
    for (std::size_t u = 0; u < s.users; ++u) {
      x.push_back(lat.user_a[u * lat.dim + c]);
      y.push_back(lat.user_b[u * lat.dim + c]);
    }
    EXPECT_LT(std::abs(pearson_of(x, y)), 0.1) << "latent dim " << c;
  }
}

TEST(Synthetic, LatentCorrelationTracksCrossCorr) {
  auto s = tiny(0.5);
  s.users = 2000;
  const auto lat = draw_latents(s);
  EXPECT_NEAR(pearson_of(lat.user_a, lat.user_b), 0.5, 0.05);
}

TEST(Synthetic, SameSeedBitwiseEqual) {
  const auto a = generate_synthetic(tiny(0.7, 11));
  const auto b = generate_synthetic(tiny(0.7, 11));
  EXPECT_EQ(a.rows, b.rows);
  const auto c = generate_synthetic(tiny(0.7, 12));
  EXPECT_NE(a.rows, c.rows);
}

TEST(Synthetic, CrossDomainSimilarityIsMonotone) {
  const double c0 = behavioural_cosine(tiny(0.0));
  const double c5 = behavioural_cosine(tiny(0.5));
  const double c1 = behavioural_cosine(tiny(1.0));
  EXPECT_LT(c0, c5);
  EXPECT_LT(c5, c1);
}

TEST(Synthetic, ShapeOfTheLog) {
  const auto s = tiny();
  const auto log = generate_synthetic(s);
  EXPECT_EQ(log.vocab_a, s.items_per_domain);
  const auto users = log.by_user();
  EXPECT_EQ(users.size(), s.users);
  for (const auto& [u, rows] : users) {
    std::set<std::int64_t> a, b;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i) EXPECT_LT(rows[i - 1].timestamp, rows[i].timestamp);
      EXPECT_GE(rows[i].item, 1);
      EXPECT_LE(rows[i].item, static_cast<std::int64_t>(s.items_per_domain));
      (rows[i].domain == Domain::kA ? a : b).insert(rows[i].item);
    }
    // No repeats within a domain; lengths within range.
    std::size_t na = 0;
    for (const auto& r : rows) na += r.domain == Domain::kA;
    EXPECT_EQ(a.size(), na);
    EXPECT_EQ(b.size(), rows.size() - na);
    EXPECT_GE(na, s.seq_min);
    EXPECT_LE(na, s.seq_max);
  }
}

TEST(Synthetic, Validation) {
  auto s = tiny();
  s.items_per_domain = 5;
  s.seq_max = 6;
  s.seq_min = 3;
  EXPECT_THROW(generate_synthetic(s), ConfigError);
  s = tiny(1.5);
  EXPECT_THROW(s.validate(), ConfigError);
  s = tiny();
  s.seq_min = 10;
  s.seq_max = 9;
  EXPECT_THROW(s.validate(), ConfigError);
  s = tiny();
  EXPECT_EQ(to_json(synth_spec_from_json(to_json(s))), to_json(s));
}

TEST(LoadLog, EmptyFile) {
  TempDir dir;
  const auto p = dir.file("empty.tsv");
  std::ofstream(p).close();
  const auto loaded = load_log(p);
  EXPECT_TRUE(loaded.log.rows.empty());
  EXPECT_EQ(loaded.log.vocab_a, 0u);
  EXPECT_THROW(split_leave_one_out(loaded.log), EmptyDatasetError);
}

TEST(LoadLog, CountsAndRemap) {
  TempDir dir;
  const auto p = dir.file("log.tsv", "user\titem\tdomain\ttimestamp\nu7\t100\tA\t1\nu7\t20\tB\t2\nu3\t9\ta\t5\n");
  const auto loaded = load_log(p);
  EXPECT_EQ(loaded.log.rows.size(), 3u);
  EXPECT_EQ(loaded.log.by_user().size(), 2u);
  EXPECT_EQ(loaded.log.vocab_a, 2u);
  EXPECT_EQ(loaded.log.vocab_b, 1u);
  // Numeric ids sort numerically, so 9 -> 1 and 100 -> 2.
  EXPECT_EQ(loaded.mapping.items_a, (std::vector<std::pair<std::string, std::int64_t>>{{"9", 1}, {"100", 2}}));
  EXPECT_EQ(loaded.mapping.users, (std::vector<std::pair<std::string, std::int64_t>>{{"u3", 1}, {"u7", 2}}));
}

TEST(LoadLog, RoundTrip) {
  TempDir dir;
  const auto log = generate_synthetic(tiny());
  const auto p = dir.file("synth.tsv");
  write_log(p, log);
  const auto back = load_log(p);
  // Dense ids already sorted and contiguous: ingestion is the identity.
  auto a = log.rows, b = back.log.rows;
  auto key = [](const Interaction& x, const Interaction& y) {
    return std::tie(x.user, x.timestamp) < std::tie(y.user, y.timestamp);
  };
  std::sort(a.begin(), a.end(), key);
  std::sort(b.begin(), b.end(), key);
  EXPECT_EQ(a, b);
}

TEST(LoadLog, ParseErrorNamesTheLine) {
  TempDir dir;
  const auto p = dir.file("bad.tsv", "1\t1\tA\t1\n1\t2\tA\t2\n1\t3\tC\t3\n");
  try {
    load_log(p);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(load_log(dir.file("fields.tsv", "1\t1\tA\n")), ParseError);
  EXPECT_THROW(load_log(dir.file("ts.tsv", "1\t1\tA\t1\n1\t1\tA\tx\n")), ParseError);
  EXPECT_THROW(load_log(dir.file("missing.tsv")), ParseError);
}

TEST(LoadLog, TiedTimestampsKeepFileOrder) {
  TempDir dir;
  const auto p = dir.file("ties.tsv", "1\t5\tB\t10\n1\t3\tA\t10\n1\t4\tA\t10\n1\t1\tA\t11\n");
  const auto log = load_log(p).log;
  const auto rows = log.by_user().at(1);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].domain, Domain::kB);
  EXPECT_EQ(rows[1].item, 2);  // raw 3
  EXPECT_EQ(rows[2].item, 3);  // raw 4
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_LT(rows[i - 1].timestamp, rows[i].timestamp);
}

TEST(Split, ThreeItemsPerDomain) {
  InteractionLog log;
  log.vocab_a = log.vocab_b = 9;
  for (std::int64_t t = 1; t <= 3; ++t) {
    log.rows.push_back({1, t, Domain::kA, 2 * t});
    log.rows.push_back({1, 3 + t, Domain::kB, 2 * t + 1});
  }
  const auto ds = split_leave_one_out(log);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(input_for(ds.users[0], Split::kVal).a_items, std::vector<std::int64_t>{1});
  EXPECT_EQ(ds.target(0, Domain::kA, Split::kVal), 2);
  EXPECT_EQ(ds.target(0, Domain::kA, Split::kTest), 3);
  EXPECT_EQ(input_for(ds.users[0], Split::kTest).b_items, (std::vector<std::int64_t>{4, 5}));
  EXPECT_EQ(ds.target(0, Domain::kB, Split::kTest), 6);
  EXPECT_THROW(ds.target(0, Domain::kA, Split::kTrain), ContractError);
  EXPECT_THROW(split_leave_one_out(log, 2), ConfigError);
}

TEST(Split, DropCountMatchesBruteForceAndConserves) {
  auto s = tiny();
  s.seq_min = 2;
  s.seq_max = 6;
  const auto log = generate_synthetic(s);
  for (std::size_t min_len : {3u, 4u, 5u}) {
    std::map<std::int64_t, std::pair<std::size_t, std::size_t>> counts;
    for (const auto& r : log.rows) (r.domain == Domain::kA ? counts[r.user].first : counts[r.user].second)++;
    std::size_t keep = 0, rows_kept = 0;
    for (const auto& [u, c] : counts)
      if (c.first >= min_len && c.second >= min_len) ++keep, rows_kept += c.first + c.second;
    const auto ds = split_leave_one_out(log, min_len);
    EXPECT_EQ(ds.size(), keep);
    EXPECT_EQ(ds.dropped, counts.size() - keep);
    std::size_t rows = 0;
    for (const auto& u : ds.users) rows += u.a_items.size() + u.b_items.size();
    EXPECT_EQ(rows, rows_kept);
    // train prefix + val + test == full history for each domain
    for (std::size_t u = 0; u < ds.size(); ++u) {
      const auto in = input_for(ds.users[u], Split::kVal);
      EXPECT_EQ(in.a_items.size() + 2, ds.users[u].a_items.size());
    }
  }
  auto s2 = tiny();
  s2.seq_min = s2.seq_max = 2;
  EXPECT_THROW(split_leave_one_out(generate_synthetic(s2)), EmptyDatasetError);
}

TEST(Negatives, ForcedComplement) {
  Rng rng(1);
  auto n = sample_negatives({1, 2, 3}, 6, 3, rng);
  std::sort(n.begin(), n.end());
  EXPECT_EQ(n, (std::vector<std::int64_t>{4, 5, 6}));
  EXPECT_THROW(sample_negatives({1, 2, 3}, 6, 4, rng), SamplingError);
  EXPECT_TRUE(sample_negatives({1, 2}, 2, 0, rng).empty());
}

TEST(Negatives, NeverHitHistoryAndAreDistinct) {
  Rng rng(2);
  const std::vector<std::int64_t> hist{2, 5, 7, 11};
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = sample_negatives(hist, 20, 6, rng);
    EXPECT_EQ(std::set<std::int64_t>(n.begin(), n.end()).size(), 6u);
    for (auto i : n) {
      EXPECT_EQ(std::count(hist.begin(), hist.end(), i), 0);
      EXPECT_GE(i, 1);
      EXPECT_LE(i, 20);
    }
  }
}

TEST(Negatives, UniformOverTheComplement) {
  Rng rng(3);
  const std::vector<std::int64_t> hist{1, 4, 9};
  const std::size_t vocab = 15, draws = 10000;
  std::map<std::int64_t, double> freq;
  for (std::size_t t = 0; t < draws; ++t) freq[sample_negatives(hist, vocab, 1, rng)[0]] += 1;
  const double cells = static_cast<double>(vocab - hist.size());
  ASSERT_EQ(freq.size(), vocab - hist.size());
  const double expected = static_cast<double>(draws) / cells;
  double chi2 = 0;
  for (const auto& [item, f] : freq) chi2 += (f - expected) * (f - expected) / expected;
  const boost::math::chi_squared dist(cells - 1);
  EXPECT_GT(boost::math::cdf(boost::math::complement(dist, chi2)), 0.01) << "chi2 = " << chi2;
}

TEST(Batch, PaddingAndTail) {
  UserInput u1{{1, 2, 3, 4}, {1, 3, 5, 7}, {6, 7}, {2, 4}};
  UserInput u2{{9}, {1}, {8}, {2}};
  const auto mb = make_model_batch({&u1, &u2}, 10, 3, false);
  EXPECT_EQ(mb.a.ids.shape, (Shape{2, 3}));
  EXPECT_EQ(mb.a.ids.values, (std::vector<std::int64_t>{2, 3, 4, 9, 0, 0}));
  EXPECT_EQ(mb.b.ids.values, (std::vector<std::int64_t>{6, 7, 8, 0}));
  EXPECT_EQ(mb.a.mask.values, (std::vector<std::uint8_t>{1, 1, 1, 1, 0, 0}));
  EXPECT_EQ(mb.ab.ids.numel(), 0u);
  EXPECT_THROW(make_model_batch({}, 10, 3, false), ContractError);
}

TEST(Batch, InterleavedTimeline) {
  // A at t = 1, 3, 4; B at t = 2, 4 (tie: A first).
  UserInput u{{1, 2, 3}, {1, 3, 4}, {5, 6}, {2, 4}};
  const auto mb = make_model_batch({&u}, 10, 5, true);
  EXPECT_EQ(mb.ab.ids.values, (std::vector<std::int64_t>{1, 15, 2, 3, 16}));
  EXPECT_EQ(mb.a_in_ab.values, (std::vector<std::int64_t>{0, 2, 3}));
  EXPECT_EQ(mb.b_in_ab.values, (std::vector<std::int64_t>{1, 4}));
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_EQ(mb.ab.ids.values[mb.a_in_ab.values[i]], mb.a.ids.values[i]);
  for (std::size_t i = 0; i < 2; ++i)
    EXPECT_EQ(mb.ab.ids.values[mb.b_in_ab.values[i]], mb.b.ids.values[i] + 10);
}

TEST(Candidates, EvalListsHoldTheTarget) {
  const auto ds = split_leave_one_out(generate_synthetic(tiny()));
  const Rng rng(4);
  const auto ec = build_eval_candidates(ds, Split::kTest, 20, rng);
  const auto again = build_eval_candidates(ds, Split::kTest, 20, rng);
  EXPECT_EQ(ec.a, again.a);
  ASSERT_EQ(ec.a.size(), ds.size());
  std::map<std::size_t, std::size_t> where;
  for (std::size_t u = 0; u < ds.size(); ++u) {
    ASSERT_EQ(ec.a[u].size(), 21u);
    EXPECT_EQ(ec.a[u][ec.pos_a[u]], ds.target(u, Domain::kA, Split::kTest));
    EXPECT_EQ(ec.b[u][ec.pos_b[u]], ds.target(u, Domain::kB, Split::kTest));
    for (std::size_t j = 0; j < 21; ++j) {
      if (j == ec.pos_a[u]) continue;
      const auto& h = ds.users[u].a_items;
      EXPECT_EQ(std::count(h.begin(), h.end(), ec.a[u][j]), 0);
    }
    where[ec.pos_a[u]]++;
  }
  EXPECT_GT(where.size(), 10u);  // positive position is not fixed
  EXPECT_NE(build_eval_candidates(ds, Split::kVal, 20, rng).a, ec.a);
  EXPECT_THROW(build_eval_candidates(ds, Split::kTrain, 20, rng), ContractError);
}

TEST(Candidates, TrainingTargetsComeFromTheTrainingPrefix) {
  const auto ds = split_leave_one_out(generate_synthetic(tiny()));
  Rng rng(5);
  const auto ex = build_training_examples(ds, rng);
  ASSERT_EQ(ex.size(), ds.size());
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto t = make_training_targets(ds, idx, ex, Domain::kA, 4, rng);
  EXPECT_EQ(t.candidates.shape, (Shape{ds.size(), 5}));
  for (std::size_t u = 0; u < ds.size(); ++u) {
    const auto& h = ds.users[u].a_items;
    const std::size_t n = SplitDataset::visible(h.size(), Split::kTrain);
    const auto& in = ex[u].input.a_items;
    EXPECT_TRUE(std::equal(in.begin(), in.end(), h.begin()));
    if (n < 2) {
      EXPECT_EQ(ex[u].target_a, 0);
      EXPECT_EQ(t.valid[u], 0);
      continue;
    }
    EXPECT_GE(in.size(), 1u);
    EXPECT_LT(in.size(), n);
    EXPECT_EQ(ex[u].target_a, h[in.size()]);
    EXPECT_EQ(t.candidates.at(u, 0), ex[u].target_a);
    for (std::size_t j = 1; j < 5; ++j) EXPECT_EQ(std::count(h.begin(), h.end(), t.candidates.at(u, j)), 0);
  }
}
