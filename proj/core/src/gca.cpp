#include "gcalab/gca.hpp"

#include <algorithm>
#include <cmath>

#include "gcalab/error.hpp"

namespace gcalab {

const char* to_string(GateActivation a) { return a == GateActivation::kSigmoid ? "sigmoid" : "tanh"; }
const char* to_string(KvSource k) { return k == KvSource::kPairwise ? "pairwise" : "combined"; }

GateActivation parse_gate_activation(const std::string& s) {
  if (s == "sigmoid") return GateActivation::kSigmoid;
  if (s == "tanh") return GateActivation::kTanh;
  throw ConfigError("unknown gate activation '" + s + "' (expected sigmoid or tanh)");
}

KvSource parse_kv_source(const std::string& s) {
  if (s == "pairwise") return KvSource::kPairwise;
  if (s == "combined") return KvSource::kCombined;
  throw ConfigError("unknown kv_source '" + s + "' (expected pairwise or combined)");
}

void GcaConfig::validate(int max_stage) const {
  for (std::size_t i = 0; i < placements.size(); ++i) {
    if (placements[i] < 0) throw ConfigError("GCA placement must be non-negative");
    if (i > 0 && placements[i] <= placements[i - 1]) throw ConfigError("GCA placements must be sorted and unique");
    if (placements[i] > max_stage) {
      throw ConfigError("GCA placement " + std::to_string(placements[i]) + " beyond backbone depth " +
                        std::to_string(max_stage));
    }
  }
  if (!placements.empty() && heads == 0) throw ConfigError("GCA heads must be positive");
}

std::pair<Tensor, Tensor> align_lengths(const SequenceBatch& x_a, const SequenceBatch& x_b) {
  if (!x_a.hidden.defined() || !x_b.hidden.defined()) throw ContractError("align_lengths needs hidden states");
  const Tensor& a = x_a.hidden;
  const Tensor& b = x_b.hidden;
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
    throw DimensionError("align_lengths: incompatible batches " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t L = std::max(a.dim(1), b.dim(1));
  return {pad_seq(a, L), pad_seq(b, L)};
}

GateFfn GateFfn::create(ParameterStore& store, const std::string& prefix, std::size_t d, std::size_t hidden,
                        GateActivation activation, bool zero_init, Rng& rng) {
  if (hidden < 1) throw ConfigError("gate hidden width must be >= 1");
  GateFfn g;
  g.activation = activation;
  g.w1 = store.uniform(prefix + ".w1", {2 * d, hidden}, 1.0 / std::sqrt(2.0 * static_cast<double>(d)), rng);
  g.b1 = store.zeros(prefix + ".b1", {hidden});
  if (zero_init) {
    g.w2 = store.zeros(prefix + ".w2", {hidden, d});
  } else {
    g.w2 = store.uniform(prefix + ".w2", {hidden, d}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  }
  g.b2 = store.zeros(prefix + ".b2", {d});
  return g;
}

Tensor GateFfn::operator()(const Tensor& x_a, const Tensor& x_b) const {
  if (x_a.shape() != x_b.shape()) {
    throw DimensionError("gate inputs are not length-aligned: " + shape_str(x_a.shape()) + " vs " +
                         shape_str(x_b.shape()));
  }
  const Tensor pre = linear(relu(linear(concat_lastdim(x_a, x_b), w1, b1)), w2, b2);
  return activation == GateActivation::kSigmoid ? sigmoid(pre) : tanh(pre);
}

Tensor gate_ffn(const GateFfn& gate, const Tensor& x_a, const Tensor& x_b) { return gate(x_a, x_b); }

GcaBlock::GcaBlock(ParameterStore& store, const std::string& prefix, std::size_t d, const GcaConfig& cfg, Rng& rng)
    : heads_(cfg.heads) {
  if (heads_ == 0 || d % heads_ != 0) {
    throw ConfigError("GCA width " + std::to_string(d) + " not divisible by " + std::to_string(heads_) + " heads");
  }
  attn_ = AttentionWeights::create(store, prefix + ".attn", d, rng);
  gate_ = GateFfn::create(store, prefix + ".gate", d, cfg.gate_hidden_for(d), cfg.gate_activation, cfg.zero_init_gate,
                          rng);
  if (cfg.use_layernorm) ln_ = LayerNormWeights::create(store, prefix + ".ln", d);
}

Tensor GcaBlock::cross_attend(const SequenceBatch& x_a, const SequenceBatch& x_kv, const ForwardContext& ctx) const {
  AttentionOptions opt;
  opt.causal = false;
  opt.empty_rows = EmptyRowPolicy::kZero;
  return multi_head_attention(attn_, heads_, x_a.hidden, x_kv.hidden, x_kv.hidden, x_kv.mask, opt, ctx);
}

Tensor GcaBlock::forward(const SequenceBatch& x_a, const SequenceBatch& x_kv, const ForwardContext& ctx,
                         GcaProbe* probe) const {
  if (!x_a.hidden.defined() || !x_kv.hidden.defined()) throw ContractError("GCA needs hidden states on both inputs");
  const std::size_t la = x_a.hidden.dim(1);
  const Tensor attended = cross_attend(x_a, x_kv, ctx);
  auto [qa, kva] = align_lengths(x_a, x_kv);
  const Tensor g = slice_seq(gate_(qa, kva), 0, la);
  Tensor out = add(x_a.hidden, mul(g, attended));
  if (ln_) out = (*ln_)(out);

  if (probe) {
    cosine_probe_update(probe->xxprime, x_a.hidden.detach(), attended.detach(), x_a.mask);
    const std::size_t lk = x_kv.hidden.dim(1);
    const std::size_t common = std::min(la, lk);
    const std::size_t B = x_a.hidden.dim(0);
    std::vector<std::uint8_t> both(B * common);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < common; ++i) both[b * common + i] = x_a.mask.at(b, i) && x_kv.mask.at(b, i);
    NoGradGuard no_grad;
    cosine_probe_update(probe->xy, slice_seq(x_a.hidden.detach(), 0, common),
                        slice_seq(x_kv.hidden.detach(), 0, common), Mask({B, common}, std::move(both)));
    ++probe->batch_count;
  }
  return out;
}

std::size_t GcaBlock::parameter_count(std::size_t d, const GcaConfig& cfg) {
  const std::size_t h = cfg.gate_hidden_for(d);
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t gate = 2 * d * h + h + h * d + d;
  const std::size_t ln = cfg.use_layernorm ? 2 * d : 0;
  return attn + gate + ln;
}

Tensor gca_forward(const GcaBlock& block, const SequenceBatch& x_a, const SequenceBatch& x_kv,
                   const ForwardContext& ctx, GcaProbe* probe) {
  return block.forward(x_a, x_kv, ctx, probe);
}

namespace {

std::optional<double> probe_mean(const ProbeSet& set, Domain d, bool xxprime) {
  CosineAccumulator acc;
  for (const auto& [key, p] : set.probes)
    if (key.second == d) acc.merge(xxprime ? p.xxprime : p.xy);
  if (acc.count == 0) return std::nullopt;
  return acc.mean();
}

}  // namespace

std::optional<double> ProbeSet::mean_xxprime(Domain d) const { return probe_mean(*this, d, true); }
std::optional<double> ProbeSet::mean_xy(Domain d) const { return probe_mean(*this, d, false); }

const GcaBlock& GcaStack::block(int stage, Domain d) const {
  auto it = pairs_.find(stage);
  if (it == pairs_.end()) throw ContractError("no GCA installed at stage " + std::to_string(stage));
  return d == Domain::kB ? it->second.second : it->second.first;
}

GcaBlock& GcaStack::block(int stage, Domain d) {
  return const_cast<GcaBlock&>(static_cast<const GcaStack&>(*this).block(stage, d));
}

std::pair<Tensor, Tensor> GcaStack::apply(int stage, const SequenceBatch& x_a, const SequenceBatch& x_b,
                                          const SequenceBatch& kv_a, const SequenceBatch& kv_b,
                                          const ForwardContext& ctx, ProbeSet* probes) const {
  GcaProbe* pa = probes ? &probes->at(stage, Domain::kA) : nullptr;
  GcaProbe* pb = probes ? &probes->at(stage, Domain::kB) : nullptr;
  if (probes) probes->firing_order.push_back(stage);
  Tensor out_a = mask_rows(block(stage, Domain::kA).forward(x_a, kv_a, ctx, pa), x_a.mask);
  Tensor out_b = mask_rows(block(stage, Domain::kB).forward(x_b, kv_b, ctx, pb), x_b.mask);
  return {std::move(out_a), std::move(out_b)};
}

GcaStack apply_placements(ParameterStore& store, std::size_t d, const GcaConfig& cfg, int max_stage, Rng& rng) {
  cfg.validate(max_stage);
  GcaStack stack;
  stack.placements_ = cfg.placements;
  for (int n : cfg.placements) {
    const std::string prefix = "gca." + std::to_string(n);
    Rng ra = rng.split(prefix + ".A");
    Rng rb = rng.split(prefix + ".B");
    GcaBlock a(store, prefix + ".A", d, cfg, ra);
    GcaBlock b(store, prefix + ".B", d, cfg, rb);
    stack.pairs_.emplace(n, std::pair<GcaBlock, GcaBlock>(std::move(a), std::move(b)));
  }
  return stack;
}

}  // namespace gcalab
