#include "gcalab/backbone.hpp"

#include <cmath>

#include "gcalab/error.hpp"

namespace gcalab {

const char* to_string(EncoderSharing s) { return s == EncoderSharing::kShared ? "shared" : "independent"; }
const char* to_string(CombinedFusion f) { return f == CombinedFusion::kConcat ? "concat" : "add"; }

ModelConfig ModelConfig::pairwise_preset() {
  ModelConfig c;
  c.encoder_sharing = EncoderSharing::kIndependent;
  c.combined_thread = true;
  c.fusion = CombinedFusion::kConcat;
  c.gca.kv_source = KvSource::kPairwise;
  return c;
}

ModelConfig ModelConfig::shared_adapter_preset() {
  ModelConfig c;
  c.encoder_sharing = EncoderSharing::kShared;
  c.combined_thread = true;
  c.adapter_rank = 4;
  c.gca.kv_source = KvSource::kCombined;
  return c;
}

ModelConfig ModelConfig::tri_thread_preset() {
  ModelConfig c;
  c.encoder_sharing = EncoderSharing::kIndependent;
  c.combined_thread = true;
  c.freeze_combined_embedding = true;
  c.fusion = CombinedFusion::kAdd;
  c.gca.kv_source = KvSource::kCombined;
  return c;
}

void ModelConfig::validate() const {
  if (vocab_a < 1 || vocab_b < 1) throw ConfigError("vocabularies must be non-empty");
  if (d < 2) throw ConfigError("hidden dim must be >= 2");
  if (layers < 1) throw ConfigError("encoder needs at least one layer");
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("hidden dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (!gca.placements.empty() && (gca.heads == 0 || d % gca.heads != 0)) {
    throw ConfigError("hidden dim " + std::to_string(d) + " not divisible by " + std::to_string(gca.heads) +
                      " GCA heads");
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout probability must be in [0,1)");
  if (max_len < 1) throw ConfigError("max_len must be positive");
  if (adapter_rank) {
    if (*adapter_rank < 1 || *adapter_rank >= d) throw ConfigError("adapter rank must be in [1, d)");
    if (!combined_thread) throw ConfigError("invariant adapters need the combined thread");
  }
  if (gca.kv_source == KvSource::kCombined && !combined_thread) {
    throw ConfigError("kv_source=combined requires combined_thread");
  }
  if (freeze_combined_embedding && !combined_thread) {
    throw ConfigError("freeze_combined_embedding requires combined_thread");
  }
  gca.validate(max_stage());
}

// --- JSON -------------------------------------------------------------------

nlohmann::json to_json(const GcaConfig& c) {
  return {{"gate_activation", to_string(c.gate_activation)},
          {"use_layernorm", c.use_layernorm},
          {"heads", c.heads},
          {"gate_hidden", c.gate_hidden},
          {"placements", c.placements},
          {"kv_source", to_string(c.kv_source)},
          {"zero_init_gate", c.zero_init_gate}};
}

GcaConfig gca_config_from_json(const nlohmann::json& j) {
  GcaConfig c;
  if (j.contains("gate_activation")) c.gate_activation = parse_gate_activation(j.at("gate_activation").get<std::string>());
  c.use_layernorm = j.value("use_layernorm", c.use_layernorm);
  c.heads = j.value("heads", c.heads);
  c.gate_hidden = j.value("gate_hidden", c.gate_hidden);
  if (j.contains("placements")) c.placements = j.at("placements").get<std::vector<int>>();
  if (j.contains("kv_source")) c.kv_source = parse_kv_source(j.at("kv_source").get<std::string>());
  c.zero_init_gate = j.value("zero_init_gate", c.zero_init_gate);
  return c;
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j = {{"vocab_a", c.vocab_a},
                      {"vocab_b", c.vocab_b},
                      {"d", c.d},
                      {"layers", c.layers},
                      {"heads", c.heads},
                      {"ffn_hidden", c.ffn_hidden},
                      {"encoder_sharing", to_string(c.encoder_sharing)},
                      {"combined_thread", c.combined_thread},
                      {"freeze_combined_embedding", c.freeze_combined_embedding},
                      {"adapter_rank", c.adapter_rank ? nlohmann::json(*c.adapter_rank) : nlohmann::json(nullptr)},
                      {"fusion", to_string(c.fusion)},
                      {"gca", to_json(c.gca)},
                      {"dropout_p", c.dropout_p},
                      {"max_len", c.max_len}};
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("preset")) {
    const auto p = j.at("preset").get<std::string>();
    if (p == "pairwise") c = ModelConfig::pairwise_preset();
    else if (p == "shared_adapter") c = ModelConfig::shared_adapter_preset();
    else if (p == "tri_thread") c = ModelConfig::tri_thread_preset();
    else throw ConfigError("unknown model preset '" + p + "'");
  }
  c.vocab_a = j.value("vocab_a", c.vocab_a);
  c.vocab_b = j.value("vocab_b", c.vocab_b);
  c.d = j.value("d", c.d);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
  if (j.contains("encoder_sharing")) {
    const auto s = j.at("encoder_sharing").get<std::string>();
    if (s == "shared") c.encoder_sharing = EncoderSharing::kShared;
    else if (s == "independent") c.encoder_sharing = EncoderSharing::kIndependent;
    else throw ConfigError("unknown encoder_sharing '" + s + "'");
  }
  c.combined_thread = j.value("combined_thread", c.combined_thread);
  c.freeze_combined_embedding = j.value("freeze_combined_embedding", c.freeze_combined_embedding);
  if (j.contains("adapter_rank")) {
    if (j.at("adapter_rank").is_null()) c.adapter_rank.reset();
    else c.adapter_rank = j.at("adapter_rank").get<std::size_t>();
  }
  if (j.contains("fusion")) {
    const auto f = j.at("fusion").get<std::string>();
    if (f == "concat") c.fusion = CombinedFusion::kConcat;
    else if (f == "add") c.fusion = CombinedFusion::kAdd;
    else throw ConfigError("unknown fusion '" + f + "'");
  }
  if (j.contains("gca")) {
    // Merge over the preset's GCA settings rather than replacing them.
    nlohmann::json g = to_json(c.gca);
    g.update(j.at("gca"));
    c.gca = gca_config_from_json(g);
  }
  c.dropout_p = j.value("dropout_p", c.dropout_p);
  c.max_len = j.value("max_len", c.max_len);
  return c;
}

// --- parameter count ----------------------------------------------------------

std::size_t parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d;
  std::size_t n = (cfg.vocab_a + 1) * d + (cfg.vocab_b + 1) * d + 2 * cfg.max_len * d;
  std::size_t threads = 2;
  if (cfg.combined_thread) {
    n += (cfg.vocab_a + cfg.vocab_b + 1) * d + 3 * d + cfg.combined_max_len() * d;
    threads = 3;
  }
  const std::size_t stacks = cfg.encoder_sharing == EncoderSharing::kShared ? 1 : threads;
  n += stacks * Encoder::parameter_count(d, cfg.layers, cfg.ffn_width());
  n += 2 * cfg.gca.placements.size() * GcaBlock::parameter_count(d, cfg.gca);
  if (cfg.adapter_rank) {
    n += 5 * 2 * d * *cfg.adapter_rank;
  } else if (cfg.combined_thread && cfg.fusion == CombinedFusion::kConcat) {
    n += 2 * (2 * d * d + d);
  }
  return n;
}

// --- model ------------------------------------------------------------------

Tensor LowRankAdapter::operator()(const Tensor& x, const Tensor& source) const {
  return add(x, matmul(matmul(source, down), up));
}

namespace {

LowRankAdapter make_adapter(ParameterStore& store, const std::string& prefix, std::size_t d, std::size_t r,
                            LowRankAdapter::Kind kind, Rng& rng) {
  LowRankAdapter a;
  a.kind = kind;
  a.down = store.uniform(prefix + ".down", {d, r}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  a.up = store.zeros(prefix + ".up", {r, d});
  return a;
}

Tensor make_item_table(ParameterStore& store, const std::string& name, std::size_t rows, std::size_t d, Rng& rng,
                  bool frozen = false) {
  std::vector<double> v(rows * d, 0.0);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = d; i < v.size(); ++i) v[i] = rng.normal(0.0, sd);  // row 0 is padding
  return store.add(name, Tensor::from({rows, d}, std::move(v)), frozen);
}

}  // namespace

Model Model::build(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  m.seed_ = seed;
  const Rng root = Rng(seed).split("model");
  const std::size_t d = cfg.d;
  auto& store = m.store_;

  {
    Rng r = root.split("embeddings");
    if (cfg.combined_thread && cfg.freeze_combined_embedding) {
      // Domain tables start as copies of their rows in the frozen combined table.
      m.emb_ab_ = make_item_table(store, "emb.AB", cfg.vocab_a + cfg.vocab_b + 1, d, r, true);
      const auto src = m.emb_ab_.data();
      std::vector<double> a(src.begin(), src.begin() + static_cast<std::ptrdiff_t>((cfg.vocab_a + 1) * d));
      std::vector<double> b((cfg.vocab_b + 1) * d, 0.0);
      std::copy(src.begin() + static_cast<std::ptrdiff_t>((cfg.vocab_a + 1) * d), src.end(), b.begin() + d);
      m.emb_a_ = store.add("emb.A", Tensor::from({cfg.vocab_a + 1, d}, std::move(a)));
      m.emb_b_ = store.add("emb.B", Tensor::from({cfg.vocab_b + 1, d}, std::move(b)));
    } else {
      m.emb_a_ = make_item_table(store, "emb.A", cfg.vocab_a + 1, d, r);
      m.emb_b_ = make_item_table(store, "emb.B", cfg.vocab_b + 1, d, r);
      if (cfg.combined_thread) m.emb_ab_ = make_item_table(store, "emb.AB", cfg.vocab_a + cfg.vocab_b + 1, d, r);
    }
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    m.pos_a_ = store.normal("pos.A", {cfg.max_len, d}, sd, r);
    m.pos_b_ = store.normal("pos.B", {cfg.max_len, d}, sd, r);
    if (cfg.combined_thread) {
      m.tag_ab_ = store.normal("tag.AB", {3, d}, sd, r);
      m.pos_ab_ = store.normal("pos.AB", {cfg.combined_max_len(), d}, sd, r);
    }
  }

  AttentionConfig acfg;
  acfg.d = d;
  acfg.heads = cfg.heads;
  acfg.dropout_p = cfg.dropout_p;
  acfg.max_len = cfg.combined_max_len();
  acfg.ffn_hidden = cfg.ffn_hidden;
  if (cfg.encoder_sharing == EncoderSharing::kShared) {
    Rng r = root.split("enc");
    m.encoders_.emplace_back(store, "enc", acfg, cfg.layers, r);
  } else {
    Rng ra = root.split("enc.A");
    Rng rb = root.split("enc.B");
    m.encoders_.emplace_back(store, "enc.A", acfg, cfg.layers, ra);
    m.encoders_.emplace_back(store, "enc.B", acfg, cfg.layers, rb);
    if (cfg.combined_thread) {
      Rng rab = root.split("enc.AB");
      m.encoders_.emplace_back(store, "enc.AB", acfg, cfg.layers, rab);
    }
  }

  {
    Rng r = root.split("gca");
    m.gca_ = apply_placements(store, d, cfg.gca, cfg.max_stage(), r);
  }

  if (cfg.adapter_rank) {
    Rng r = root.split("adapters");
    const std::size_t rank = *cfg.adapter_rank;
    using K = LowRankAdapter::Kind;
    m.dlora_a_ = make_adapter(store, "dlora.A", d, rank, K::kDomain, r);
    m.dlora_b_ = make_adapter(store, "dlora.B", d, rank, K::kDomain, r);
    m.dlora_ab_ = make_adapter(store, "dlora.AB", d, rank, K::kDomain, r);
    m.ilora_a_ = make_adapter(store, "ilora.A", d, rank, K::kInvariant, r);
    m.ilora_b_ = make_adapter(store, "ilora.B", d, rank, K::kInvariant, r);
  } else if (cfg.combined_thread && cfg.fusion == CombinedFusion::kConcat) {
    Rng r = root.split("fuse");
    const double bound = 1.0 / std::sqrt(2.0 * static_cast<double>(d));
    m.fuse_a_w_ = store.uniform("fuse.A.w", {2 * d, d}, bound, r);
    m.fuse_a_b_ = store.zeros("fuse.A.b", {d});
    m.fuse_b_w_ = store.uniform("fuse.B.w", {2 * d, d}, bound, r);
    m.fuse_b_b_ = store.zeros("fuse.B.b", {d});
  }
  return m;
}

Model Model::clone() const {
  Model m = build(cfg_, seed_);
  m.store_.restore(store_.snapshot());
  return m;
}

std::vector<std::pair<std::string, LowRankAdapter*>> Model::adapters() {
  std::vector<std::pair<std::string, LowRankAdapter*>> out;
  if (dlora_a_) out.emplace_back("dlora.A", &*dlora_a_);
  if (dlora_b_) out.emplace_back("dlora.B", &*dlora_b_);
  if (dlora_ab_) out.emplace_back("dlora.AB", &*dlora_ab_);
  if (ilora_a_) out.emplace_back("ilora.A", &*ilora_a_);
  if (ilora_b_) out.emplace_back("ilora.B", &*ilora_b_);
  return out;
}

const Tensor& Model::item_table(Domain d) const {
  switch (d) {
    case Domain::kA: return emb_a_;
    case Domain::kB: return emb_b_;
    case Domain::kCombined:
      if (!cfg_.combined_thread) throw ContractError("model has no combined thread");
      return emb_ab_;
  }
  throw ContractError("unknown domain");
}

Tensor Model::embed(const SequenceBatch& seq) const {
  switch (seq.domain) {
    case Domain::kA:
      seq.validate(cfg_.max_len);
      return mask_rows(add_position_embedding(embedding_gather(emb_a_, seq.ids), seq.mask, pos_a_), seq.mask);
    case Domain::kB:
      seq.validate(cfg_.max_len);
      return mask_rows(add_position_embedding(embedding_gather(emb_b_, seq.ids), seq.mask, pos_b_), seq.mask);
    case Domain::kCombined: {
      if (!cfg_.combined_thread) throw ContractError("model has no combined thread");
      seq.validate(cfg_.combined_max_len());
      std::vector<std::int64_t> tags(seq.ids.numel());
      for (std::size_t i = 0; i < tags.size(); ++i) {
        const auto id = seq.ids.values[i];
        tags[i] = id == 0 ? 0 : (id <= static_cast<std::int64_t>(cfg_.vocab_a) ? 1 : 2);
      }
      const Tensor x = add(embedding_gather(emb_ab_, seq.ids), embedding_gather(tag_ab_, IndexTensor(seq.ids.shape, tags)));
      return mask_rows(add_position_embedding(x, seq.mask, pos_ab_), seq.mask);
    }
  }
  throw ContractError("unknown domain");
}

Tensor Model::encode(const Tensor& x, const Mask& mask, Domain thread, const ForwardContext& ctx) const {
  if (encoders_.size() == 1) return encoders_[0].forward(x, mask, ctx);
  const std::size_t idx = thread == Domain::kA ? 0 : thread == Domain::kB ? 1 : 2;
  if (idx >= encoders_.size()) throw ContractError("model has no combined-thread encoder");
  return encoders_[idx].forward(x, mask, ctx);
}

ForwardOutput Model::forward(const ModelBatch& batch, const ForwardContext& ctx, ProbeSet* probes) const {
  if (batch.a.batch() != batch.b.batch()) throw DimensionError("domain batches must have the same number of users");
  const bool combined = cfg_.combined_thread;
  if (combined && batch.ab.mask.shape.empty()) throw ContractError("model needs the combined sequence");

  auto seq = [](Tensor h, const SequenceBatch& like) { return SequenceBatch::from_hidden(std::move(h), like.mask, like.domain); };

  SequenceBatch xa = seq(embed(batch.a), batch.a);
  SequenceBatch xb = seq(embed(batch.b), batch.b);
  SequenceBatch xab;
  if (combined) xab = seq(embed(batch.ab), batch.ab);

  const bool pairwise = cfg_.gca.kv_source == KvSource::kPairwise;
  auto run_stage = [&](int stage) {
    if (!gca_.has(stage)) return;
    const SequenceBatch& kv_a = pairwise ? xb : xab;
    const SequenceBatch& kv_b = pairwise ? xa : xab;
    auto [na, nb] = gca_.apply(stage, xa, xb, kv_a, kv_b, ctx, probes);
    xa.hidden = std::move(na);
    xb.hidden = std::move(nb);
  };

  run_stage(0);
  xa.hidden = mask_rows(ctx.drop(xa.hidden), xa.mask);
  xb.hidden = mask_rows(ctx.drop(xb.hidden), xb.mask);
  if (combined) xab.hidden = mask_rows(ctx.drop(xab.hidden), xab.mask);

  const bool adapters = cfg_.adapter_rank.has_value();
  if (adapters) run_stage(1);

  xa.hidden = encode(xa.hidden, xa.mask, Domain::kA, ctx);
  xb.hidden = encode(xb.hidden, xb.mask, Domain::kB, ctx);
  if (combined) xab.hidden = encode(xab.hidden, xab.mask, Domain::kCombined, ctx);

  ForwardOutput out;
  if (adapters) {
    xa.hidden = (*dlora_a_)(xa.hidden, xa.hidden);
    xb.hidden = (*dlora_b_)(xb.hidden, xb.hidden);
    xab.hidden = mask_rows((*dlora_ab_)(xab.hidden, xab.hidden), xab.mask);
    run_stage(2);
    out.repr_a = mask_rows((*ilora_a_)(xa.hidden, gather_positions(xab.hidden, batch.a_in_ab)), xa.mask);
    out.repr_b = mask_rows((*ilora_b_)(xb.hidden, gather_positions(xab.hidden, batch.b_in_ab)), xb.mask);
    return out;
  }

  run_stage(1);
  if (!combined) {
    out.repr_a = xa.hidden;
    out.repr_b = xb.hidden;
    return out;
  }
  const Tensor ga = gather_positions(xab.hidden, batch.a_in_ab);
  const Tensor gb = gather_positions(xab.hidden, batch.b_in_ab);
  if (cfg_.fusion == CombinedFusion::kConcat) {
    out.repr_a = mask_rows(linear(concat_lastdim(xa.hidden, ga), fuse_a_w_, fuse_a_b_), xa.mask);
    out.repr_b = mask_rows(linear(concat_lastdim(xb.hidden, gb), fuse_b_w_, fuse_b_b_), xb.mask);
  } else {
    out.repr_a = mask_rows(add(xa.hidden, ga), xa.mask);
    out.repr_b = mask_rows(add(xb.hidden, gb), xb.mask);
  }
  return out;
}

Tensor Model::score_next_item(const Tensor& repr, const Mask& mask, const IndexTensor& candidates, Domain domain) const {
  if (domain == Domain::kCombined) throw ContractError("scoring is per domain");
  if (repr.rank() != 3 || mask.shape != Shape{repr.dim(0), repr.dim(1)}) {
    throw DimensionError("score_next_item: repr " + shape_str(repr.shape()) + " / mask " + shape_str(mask.shape));
  }
  const std::size_t B = repr.dim(0), l = repr.dim(1), d = repr.dim(2);
  if (candidates.shape.size() != 2 || candidates.shape[0] != B) {
    throw DimensionError("score_next_item: candidates " + shape_str(candidates.shape) + " for batch of " +
                         std::to_string(B));
  }
  const auto vocab = static_cast<std::int64_t>(domain == Domain::kA ? cfg_.vocab_a : cfg_.vocab_b);
  for (auto c : candidates.values) {
    if (c < 1 || c > vocab) {
      throw IndexError("candidate item " + std::to_string(c) + " outside vocabulary [1," + std::to_string(vocab) + "]");
    }
  }
  std::vector<std::int64_t> last(B, -1);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < l; ++i)
      if (mask.at(b, i)) last[b] = static_cast<std::int64_t>(i);
  const Tensor h = gather_positions(repr, IndexTensor({B, 1}, std::move(last)));
  const Tensor e = embedding_gather(item_table(domain), candidates);
  const std::size_t c = candidates.shape[1];
  (void)d;
  return reshape(matmul(h, transpose_last2(e)), {B, c});
}

Tensor Model::training_loss(const ModelBatch& batch, const DomainTargets& targets_a, const DomainTargets& targets_b,
                            const ForwardContext& ctx) const {
  const ForwardOutput out = forward(batch, ctx);
  Tensor total;
  auto domain_loss = [&](const Tensor& repr, const SequenceBatch& seq, const DomainTargets& t, Domain dom) {
    const std::size_t B = seq.batch();
    if (t.valid.size() != B) throw DimensionError("target validity mask does not match batch");
    std::size_t n_valid = 0;
    for (auto v : t.valid) n_valid += v != 0;
    if (n_valid == 0) return;
    const Tensor scores = score_next_item(repr, seq.mask, t.candidates, dom);
    const std::size_t c = t.candidates.shape[1];
    std::vector<double> sign(c, 1.0);
    sign[0] = -1.0;
    std::vector<double> w(B * c, 0.0);
    for (std::size_t b = 0; b < B; ++b)
      if (t.valid[b])
        for (std::size_t j = 0; j < c; ++j) w[b * c + j] = 1.0 / static_cast<double>(n_valid);
    const Tensor bce = softplus(mul(scores, Tensor::from({c}, std::move(sign))));
    const Tensor loss = sum(mul(bce, Tensor::from({B, c}, std::move(w))));
    total = total.defined() ? add(total, loss) : loss;
  };
  domain_loss(out.repr_a, batch.a, targets_a, Domain::kA);
  domain_loss(out.repr_b, batch.b, targets_b, Domain::kB);
  if (!total.defined()) total = Tensor::scalar(0.0);
  if (!std::isfinite(total.item())) throw NumericalError("training loss is not finite");
  return total;
}

}  // namespace gcalab
