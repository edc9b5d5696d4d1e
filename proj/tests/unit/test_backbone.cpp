#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "gcalab/backbone.hpp"
#include "gcalab/data.hpp"
#include "gcalab/error.hpp"
#include "gcalab/metrics.hpp"
#include "support/model_zoo.hpp"

using namespace gcalab;
using namespace gcalab::testing;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  SplitDataset ds;
  std::vector<UserInput> inputs;

  explicit Fixture(std::size_t users = 16, std::size_t vocab = 30) {
    SynthSpec s;
    s.users = users;
    s.items_per_domain = vocab;
    s.seq_min = 4;
    s.seq_max = 10;
    s.seed = 5;
    ds = split_leave_one_out(generate_synthetic(s));
    for (const auto& u : ds.users) inputs.push_back(input_for(u, Split::kTest));
  }

  ModelBatch batch(const ModelConfig& cfg, std::size_t from = 0, std::size_t n = 8) const {
    std::vector<const UserInput*> ptrs;
    for (std::size_t i = from; i < from + n; ++i) ptrs.push_back(&inputs[i]);
    return make_model_batch(ptrs, ds.vocab_a, cfg.max_len, cfg.combined_thread);
  }
};

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

void fill(Tensor t, double v) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), v);
}

}  // namespace

TEST(ModelConfig, Validation) {
  auto c = small();
  EXPECT_NO_THROW(c.validate());
  c.gca.kv_source = KvSource::kCombined;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small();
  c.adapter_rank = 8;
  c.combined_thread = true;
  EXPECT_THROW(c.validate(), ConfigError);  // rank must be < d
  c = small();
  c.freeze_combined_embedding = true;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small();
  c.gca.placements = {2};
  EXPECT_THROW(c.validate(), ConfigError);  // stage 2 needs the adapter wiring
  c = small(ModelConfig::shared_adapter_preset());
  c.gca.placements = {2};
  EXPECT_NO_THROW(c.validate());
  EXPECT_THROW(Model::build(small(ModelConfig{.gca = {.kv_source = KvSource::kCombined}}), 0), ConfigError);
}

TEST(ModelConfig, JsonRoundTripAndPresets) {
  for (const auto& c : config_zoo()) {
    const auto back = model_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
  }
  const auto j = nlohmann::json{{"preset", "tri_thread"}, {"gca", {{"placements", {0}}}}};
  const auto c = model_config_from_json(j);
  EXPECT_TRUE(c.freeze_combined_embedding);
  EXPECT_EQ(c.gca.kv_source, KvSource::kCombined);  // preset GCA settings survive the merge
  EXPECT_EQ(c.gca.placements, std::vector<int>{0});
  EXPECT_THROW(model_config_from_json({{"preset", "nope"}}), ConfigError);
}

TEST(Build, SameSeedBitwiseIdentical) {
  for (const auto& cfg : config_zoo()) {
    Model a = Model::build(cfg, 42), b = Model::build(cfg, 42), c = Model::build(cfg, 43);
    ASSERT_EQ(a.params().all().size(), b.params().all().size());
    bool differs = false;
    for (std::size_t i = 0; i < a.params().all().size(); ++i) {
      const auto& pa = a.params().all()[i];
      const auto& pb = b.params().all()[i];
      EXPECT_EQ(pa.name, pb.name);
      EXPECT_TRUE(std::equal(pa.tensor.data().begin(), pa.tensor.data().end(), pb.tensor.data().begin()));
      const auto& pc = c.params().all()[i];
      differs |= !std::equal(pa.tensor.data().begin(), pa.tensor.data().end(), pc.tensor.data().begin());
    }
    EXPECT_TRUE(differs);
  }
}

TEST(Build, ParameterCountMatchesHandFormula) {
  const auto zoo = config_zoo();
  ASSERT_GE(zoo.size(), 10u);
  for (const auto& cfg : zoo) {
    Model m = Model::build(cfg, 1);
    EXPECT_EQ(m.parameter_count(), count_by_hand(cfg)) << to_json(cfg).dump();
    EXPECT_EQ(parameter_count(cfg), count_by_hand(cfg));
  }
}

TEST(Build, SharedEncoderHasFewerParameters) {
  auto c = small();
  const auto indep = parameter_count(c);
  c.encoder_sharing = EncoderSharing::kShared;
  EXPECT_LT(parameter_count(c), indep);
}

TEST(Build, PlacementsAddTwoBlocksEach) {
  for (auto base : {small(), small(ModelConfig::shared_adapter_preset())}) {
    const auto plain = parameter_count(base);
    const auto one = GcaBlock::parameter_count(base.d, base.gca);
    for (std::vector<int> p : {std::vector<int>{0}, {0, 1}, {1}}) {
      auto c = base;
      c.gca.placements = p;
      EXPECT_EQ(parameter_count(c) - plain, p.size() * 2 * one);
    }
  }
}

TEST(Build, ParameterNamesUnique) {
  auto c = small(ModelConfig::shared_adapter_preset());
  c.gca.placements = {0, 1, 2};
  Model m = Model::build(c, 0);
  std::set<std::string> names;
  for (const auto& p : m.params().all()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
}

TEST(Forward, ShapesForEveryConfig) {
  Fixture fx;
  for (const auto& cfg : config_zoo()) {
    Model m = Model::build(cfg, 3);
    const auto batch = fx.batch(cfg);
    const auto out = m.forward(batch);
    EXPECT_EQ(out.repr_a.shape(), (Shape{8, batch.a.length(), cfg.d}));
    EXPECT_EQ(out.repr_b.shape(), (Shape{8, batch.b.length(), cfg.d}));
  }
}

TEST(Forward, NoPlacementsIsPlainEncoderThreads) {
  Fixture fx;
  auto cfg = small();
  Model m = Model::build(cfg, 4);
  const auto batch = fx.batch(cfg);
  const auto out = m.forward(batch);
  const Tensor ea = mask_rows(m.encode(m.embed(batch.a), batch.a.mask, Domain::kA, {}), batch.a.mask);
  const Tensor eb = mask_rows(m.encode(m.embed(batch.b), batch.b.mask, Domain::kB, {}), batch.b.mask);
  EXPECT_EQ(max_abs_diff(mask_rows(out.repr_a, batch.a.mask), ea), 0.0);
  EXPECT_EQ(max_abs_diff(mask_rows(out.repr_b, batch.b.mask), eb), 0.0);
}

TEST(Forward, ZeroAdaptersReduceToSharedEncoder) {
  Fixture fx;
  auto cfg = small(ModelConfig::shared_adapter_preset());
  Model m = Model::build(cfg, 5);
  for (auto& [name, a] : m.adapters()) {
    // Up-projections start at zero; perturb the down-projections to show
    // they do not matter.
    for (auto& v : a->down.mutable_data()) v += 0.3;
    for (double v : a->up.data()) ASSERT_EQ(v, 0.0) << name;
  }
  const auto batch = fx.batch(cfg);
  const auto out = m.forward(batch);
  const Tensor ea = mask_rows(m.encode(m.embed(batch.a), batch.a.mask, Domain::kA, {}), batch.a.mask);
  EXPECT_EQ(max_abs_diff(out.repr_a, ea), 0.0);

  fill(m.adapters()[0].second->up, 0.1);  // dlora.A on: output moves
  EXPECT_GT(max_abs_diff(m.forward(batch).repr_a, ea), 1e-3);
}

TEST(Forward, FrozenCombinedTableGetsNoGradient) {
  Fixture fx;
  auto cfg = small(ModelConfig::tri_thread_preset());
  cfg.gca.placements = {0};
  Model m = Model::build(cfg, 6);
  const auto& table = m.params().get("emb.AB");
  EXPECT_TRUE(table.frozen);
  // Domain tables start as copies of the combined rows.
  const auto ab = table.tensor.data();
  const auto a = m.item_table(Domain::kA).data();
  const auto b = m.item_table(Domain::kB).data();
  EXPECT_TRUE(std::equal(a.begin(), a.end(), ab.begin()));
  EXPECT_TRUE(std::equal(b.begin() + cfg.d, b.end(), ab.begin() + (cfg.vocab_a + 1) * cfg.d));

  const auto batch = fx.batch(cfg);
  const auto out = m.forward(batch);
  sum(add(sum(out.repr_a), sum(out.repr_b))).backward();
  EXPECT_FALSE(table.tensor.has_grad());
  EXPECT_TRUE(m.params().get("emb.A").tensor.has_grad());
}

TEST(Forward, ProbesFireInPlacementOrder) {
  Fixture fx;
  auto cfg = small(ModelConfig::shared_adapter_preset());
  cfg.gca.placements = {0, 1, 2};
  Model m = Model::build(cfg, 7);
  ProbeSet probes;
  m.forward(fx.batch(cfg), {}, &probes);
  EXPECT_EQ(probes.firing_order, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(probes.probes.size(), 6u);

  auto pw = small(ModelConfig::pairwise_preset());
  pw.gca.placements = {0, 1};
  Model p = Model::build(pw, 7);
  ProbeSet pp;
  p.forward(fx.batch(pw), {}, &pp);
  EXPECT_EQ(pp.firing_order, (std::vector<int>{0, 1}));
  for (const auto& [key, probe] : pp.probes) {
    EXPECT_NE(key.first, 2);
    EXPECT_GE(probe.cos_xxprime(), 0.0);
    EXPECT_LE(probe.cos_xxprime(), 1.0);
  }
}

TEST(Forward, EvalModeDeterministicAndTrainingUsesDropout) {
  Fixture fx;
  auto cfg = small(ModelConfig::pairwise_preset());
  cfg.gca.placements = {0};
  Model m = Model::build(cfg, 8);
  const auto batch = fx.batch(cfg);
  EXPECT_EQ(max_abs_diff(m.forward(batch).repr_a, m.forward(batch).repr_a), 0.0);
  Rng r(1);
  const ForwardContext train{true, 0.5, &r};
  EXPECT_GT(max_abs_diff(m.forward(batch, train).repr_a, m.forward(batch).repr_a), 1e-6);
}

TEST(Forward, PlacementsNeverChangeShapes) {
  Fixture fx;
  auto base = small(ModelConfig::shared_adapter_preset());
  const auto batch = fx.batch(base);
  const auto ref = Model::build(base, 1).forward(batch);
  for (std::vector<int> p : {std::vector<int>{0}, {1}, {2}, {0, 2}, {0, 1, 2}}) {
    auto c = base;
    c.gca.placements = p;
    const auto out = Model::build(c, 1).forward(batch);
    EXPECT_EQ(out.repr_a.shape(), ref.repr_a.shape());
    EXPECT_EQ(out.repr_b.shape(), ref.repr_b.shape());
  }
}

TEST(Score, ZeroEmbeddingScoresZero) {
  Fixture fx;
  auto cfg = small();
  Model m = Model::build(cfg, 9);
  Tensor table = m.item_table(Domain::kA);
  auto v = table.mutable_data();
  std::fill(v.begin() + 5 * cfg.d, v.begin() + 6 * cfg.d, 0.0);
  const auto batch = fx.batch(cfg);
  const auto out = m.forward(batch);
  const Tensor s = m.score_next_item(out.repr_a, batch.a.mask, IndexTensor({8, 2}, std::vector<std::int64_t>(16, 5)),
                                     Domain::kA);
  for (double x : s.data()) EXPECT_EQ(x, 0.0);
  EXPECT_THROW(m.score_next_item(out.repr_a, batch.a.mask, IndexTensor({8, 1}, std::vector<std::int64_t>(8, 31)),
                                 Domain::kA),
               IndexError);
  EXPECT_THROW(m.score_next_item(out.repr_a, batch.a.mask, IndexTensor({8, 1}, std::vector<std::int64_t>(8, 0)),
                                 Domain::kA),
               IndexError);
}

TEST(Score, InvariantToTrailingPadding) {
  Fixture fx(40);
  for (auto cfg : {small(), small(ModelConfig::pairwise_preset()), small(ModelConfig::shared_adapter_preset())}) {
    cfg.gca.placements = {0};
    Model m = Model::build(cfg, 10);
    // Find a short user and a long one so the pair batch pads the short one.
    std::size_t shortest = 0, longest = 0;
    for (std::size_t i = 0; i < fx.inputs.size(); ++i) {
      if (fx.inputs[i].a_items.size() < fx.inputs[shortest].a_items.size()) shortest = i;
      if (fx.inputs[i].a_items.size() > fx.inputs[longest].a_items.size()) longest = i;
    }
    ASSERT_LT(fx.inputs[shortest].a_items.size(), fx.inputs[longest].a_items.size());
    const auto alone = make_model_batch({&fx.inputs[shortest]}, fx.ds.vocab_a, cfg.max_len, cfg.combined_thread);
    const auto pair = make_model_batch({&fx.inputs[shortest], &fx.inputs[longest]}, fx.ds.vocab_a, cfg.max_len,
                                       cfg.combined_thread);
    ASSERT_GT(pair.a.length(), alone.a.length());
    std::vector<std::int64_t> cands(30);
    for (std::size_t i = 0; i < 30; ++i) cands[i] = static_cast<std::int64_t>(i + 1);
    std::vector<std::int64_t> cands2 = cands;
    cands2.insert(cands2.end(), cands.begin(), cands.end());
    const Tensor s1 = m.score_next_item(m.forward(alone).repr_a, alone.a.mask, IndexTensor({1, 30}, cands), Domain::kA);
    const Tensor s2 = m.score_next_item(m.forward(pair).repr_a, pair.a.mask, IndexTensor({2, 30}, cands2), Domain::kA);
    for (std::size_t j = 0; j < 30; ++j) EXPECT_NEAR(s1.data()[j], s2.data()[j], 1e-12);
  }
}

TEST(Score, FullVocabularyArgmaxMatchesBruteForce) {
  Fixture fx;
  auto cfg = small(ModelConfig::pairwise_preset());
  Model m = Model::build(cfg, 11);
  const auto batch = fx.batch(cfg);
  const auto out = m.forward(batch);
  std::vector<std::int64_t> cands;
  for (std::size_t b = 0; b < 8; ++b)
    for (std::size_t i = 1; i <= 30; ++i) cands.push_back(static_cast<std::int64_t>(i));
  const Tensor s = m.score_next_item(out.repr_b, batch.b.mask, IndexTensor({8, 30}, cands), Domain::kB);
  const auto table = m.item_table(Domain::kB).data();
  for (std::size_t b = 0; b < 8; ++b) {
    std::size_t last = 0;
    for (std::size_t i = 0; i < batch.b.length(); ++i)
      if (batch.b.mask.at(b, i)) last = i;
    std::size_t best = 0, best_s = 0;
    double best_v = -1e300, best_sv = -1e300;
    for (std::size_t item = 1; item <= 30; ++item) {
      double dot = 0;
      for (std::size_t c = 0; c < cfg.d; ++c) dot += out.repr_b.at({b, last, c}) * table[item * cfg.d + c];
      EXPECT_NEAR(s.at({b, item - 1}), dot, 1e-12);
      if (dot > best_v) best_v = dot, best = item;
      if (s.at({b, item - 1}) > best_sv) best_sv = s.at({b, item - 1}), best_s = item;
    }
    EXPECT_EQ(best, best_s);
  }
}

TEST(Loss, AllZeroScoresGiveClosedForm) {
  Fixture fx;
  auto cfg = small();
  Model m = Model::build(cfg, 12);
  fill(m.item_table(Domain::kA), 0.0);
  fill(m.item_table(Domain::kB), 0.0);
  const std::size_t k = 4;
  Rng rng(1);
  std::vector<std::size_t> idx(8);
  std::iota(idx.begin(), idx.end(), 0);
  const auto ex = build_training_examples(fx.ds, rng);
  std::vector<const UserInput*> in;
  for (auto i : idx) in.push_back(&ex[i].input);
  const auto batch = make_model_batch(in, fx.ds.vocab_a, cfg.max_len, false);
  const auto ta = make_training_targets(fx.ds, idx, ex, Domain::kA, k, rng);
  const auto tb = make_training_targets(fx.ds, idx, ex, Domain::kB, k, rng);
  const double loss = m.training_loss(batch, ta, tb, {}).item();
  // Per valid example and domain: (1 + k) * ln 2; averaged within, summed across domains.
  EXPECT_NEAR(loss, 2 * (1 + k) * std::log(2.0), 1e-12);
}

TEST(Loss, SaturatedScoresGiveNearZeroLoss) {
  auto cfg = small();
  cfg.vocab_a = cfg.vocab_b = 6;
  Model m = Model::build(cfg, 13);
  // Constant final representation r; positive rows score +20, negatives -20.
  std::vector<double> r(cfg.d, 0.0);
  r[0] = 1.0;
  for (const char* enc : {"enc.A", "enc.B"}) {
    fill(m.params().get(std::string(enc) + ".ln_out.gain").tensor, 0.0);
    Tensor bias = m.params().get(std::string(enc) + ".ln_out.bias").tensor;
    std::copy(r.begin(), r.end(), bias.mutable_data().begin());
  }
  for (auto dom : {Domain::kA, Domain::kB}) {
    Tensor t = m.item_table(dom);
    auto v = t.mutable_data();
    for (std::size_t item = 1; item <= 6; ++item) v[item * cfg.d] = item == 1 ? 20.0 : -20.0;
  }
  ModelBatch batch;
  batch.a = SequenceBatch::from_ids(IndexTensor({2, 2}, {2, 3, 4, 0}), Domain::kA);
  batch.b = SequenceBatch::from_ids(IndexTensor({2, 1}, {5, 6}), Domain::kB);
  DomainTargets t{IndexTensor({2, 5}, {1, 2, 3, 4, 5, 1, 6, 5, 4, 3}), {1, 1}};
  const double loss = m.training_loss(batch, t, t, {}).item();
  EXPECT_LT(loss, 1e-6);
  EXPECT_NEAR(loss, 2 * 5 * std::log1p(std::exp(-20.0)), 1e-15);
}

TEST(Loss, InvalidRowsIgnored) {
  Fixture fx;
  auto cfg = small();
  Model m = Model::build(cfg, 14);
  const auto batch = fx.batch(cfg, 0, 2);
  DomainTargets none{IndexTensor({2, 3}, {1, 2, 3, 1, 2, 3}), {0, 0}};
  EXPECT_EQ(m.training_loss(batch, none, none, {}).item(), 0.0);
  DomainTargets first{IndexTensor({2, 3}, {1, 2, 3, 4, 5, 6}), {1, 0}};
  DomainTargets first_alt{IndexTensor({2, 3}, {1, 2, 3, 9, 9, 9}), {1, 0}};
  EXPECT_EQ(m.training_loss(batch, first, none, {}).item(), m.training_loss(batch, first_alt, none, {}).item());
}

TEST(Loss, DecreasesOverFiftyAdamSteps) {
  Fixture fx(64, 40);
  auto cfg = small(ModelConfig::pairwise_preset());
  cfg.vocab_a = cfg.vocab_b = 40;
  cfg.gca.placements = {0};
  Model m = Model::build(cfg, 15);
  Adam opt(m.params(), {3e-3});
  Rng rng(2);
  const auto ex = build_training_examples(fx.ds, rng);
  std::vector<std::size_t> idx(fx.ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<const UserInput*> in;
  for (auto i : idx) in.push_back(&ex[i].input);
  const auto batch = make_model_batch(in, fx.ds.vocab_a, cfg.max_len, true);
  const auto ta = make_training_targets(fx.ds, idx, ex, Domain::kA, 4, rng);
  const auto tb = make_training_targets(fx.ds, idx, ex, Domain::kB, 4, rng);
  double first = 0, last = 0;
  for (int step = 0; step < 50; ++step) {
    opt.zero_grad();
    Tensor loss = m.training_loss(batch, ta, tb, {});
    if (step == 0) first = loss.item();
    last = loss.item();
    loss.backward();
    opt.step();
  }
  EXPECT_LT(last, 0.8 * first);
}

TEST(Model, CloneCopiesValues) {
  auto cfg = small(ModelConfig::tri_thread_preset());
  Model m = Model::build(cfg, 16);
  fill(m.params().get("enc.A.ln_out.bias").tensor, 0.25);
  Model c = m.clone();
  EXPECT_EQ(c.params().get("enc.A.ln_out.bias").tensor.data()[0], 0.25);
  fill(c.params().get("enc.A.ln_out.bias").tensor, 0.5);
  EXPECT_EQ(m.params().get("enc.A.ln_out.bias").tensor.data()[0], 0.25);
}

TEST(Checkpoint, RoundTripAndValidation) {
  const auto dir = fs::temp_directory_path() / "gcalab_ckpt_test";
  fs::create_directories(dir);
  const auto path = (dir / "m.ckpt").string();
  auto cfg = small(ModelConfig::shared_adapter_preset());
  cfg.gca.placements = {1};
  Model m = Model::build(cfg, 17);
  write_checkpoint(path, make_checkpoint(m, "{\"note\":1}"));
  const auto ck = read_checkpoint(path);
  EXPECT_EQ(ck.version, kCheckpointVersion);
  EXPECT_EQ(ck.metadata, "{\"note\":1}");
  Model other = Model::build(cfg, 99);
  load_checkpoint_into(other, ck);
  for (std::size_t i = 0; i < m.params().all().size(); ++i) {
    const auto a = m.params().all()[i].tensor.data(), b = other.params().all()[i].tensor.data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }

  auto wider = cfg;
  wider.d = 12;
  wider.heads = 4;
  wider.gca.heads = 4;
  Model w = Model::build(wider, 0);
  EXPECT_THROW(load_checkpoint_into(w, ck), Error);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  EXPECT_THROW(read_checkpoint(path), ParseError);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write("GCALABCK", 8);
  }
  EXPECT_THROW(read_checkpoint(path), ParseError);
  fs::remove_all(dir);
}
