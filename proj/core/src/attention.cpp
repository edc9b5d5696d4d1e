#include "gcalab/attention.hpp"

#include <cmath>

#include "gcalab/error.hpp"

namespace gcalab {

const char* domain_name(Domain d) {
  switch (d) {
    case Domain::kA: return "A";
    case Domain::kB: return "B";
    case Domain::kCombined: return "AB";
  }
  return "?";
}

SequenceBatch SequenceBatch::from_ids(IndexTensor ids, Domain domain) {
  if (ids.shape.size() != 2) throw DimensionError("sequence ids must be [B,l], got " + shape_str(ids.shape));
  std::vector<std::uint8_t> m(ids.numel());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = ids.values[i] != 0;
  SequenceBatch out;
  out.mask = Mask(ids.shape, std::move(m));
  out.ids = std::move(ids);
  out.domain = domain;
  return out;
}

SequenceBatch SequenceBatch::from_hidden(Tensor hidden, Domain domain) {
  if (hidden.rank() != 3) throw DimensionError("hidden states must be [B,l,d], got " + shape_str(hidden.shape()));
  Mask m = Mask::ones({hidden.dim(0), hidden.dim(1)});
  return from_hidden(std::move(hidden), std::move(m), domain);
}

SequenceBatch SequenceBatch::from_hidden(Tensor hidden, Mask mask, Domain domain) {
  if (hidden.rank() != 3 || mask.shape != Shape{hidden.dim(0), hidden.dim(1)}) {
    throw DimensionError("hidden " + shape_str(hidden.shape()) + " does not match mask " + shape_str(mask.shape));
  }
  SequenceBatch out;
  out.mask = std::move(mask);
  out.hidden = std::move(hidden);
  out.domain = domain;
  return out;
}

void SequenceBatch::validate(std::size_t max_len) const {
  if (mask.shape.size() != 2) throw DimensionError("sequence mask must be [B,l], got " + shape_str(mask.shape));
  if (length() > max_len) {
    throw DimensionError("sequence length " + std::to_string(length()) + " exceeds max_len " + std::to_string(max_len));
  }
  if (!ids.values.empty()) {
    if (ids.shape != mask.shape) throw DimensionError("ids and mask shapes differ");
    for (std::size_t i = 0; i < ids.numel(); ++i) {
      if ((ids.values[i] != 0) != (mask.values[i] != 0)) throw ContractError("padding id 0 must coincide with mask false");
    }
  }
  if (hidden.defined() && (hidden.rank() != 3 || hidden.dim(0) != batch() || hidden.dim(1) != length())) {
    throw DimensionError("hidden " + shape_str(hidden.shape()) + " does not match mask " + shape_str(mask.shape));
  }
}

void AttentionConfig::validate() const {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("hidden dim " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout probability must be in [0,1)");
  if (max_len == 0) throw ConfigError("max_len must be positive");
}

Tensor ForwardContext::drop(const Tensor& x) const {
  if (!training || dropout_p == 0.0) return x;
  if (!rng) throw ContractError("dropout in training mode needs an rng");
  return dropout(x, dropout_p, *rng, true);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

LayerNormWeights LayerNormWeights::create(ParameterStore& store, const std::string& prefix, std::size_t d) {
  return {store.ones(prefix + ".gain", {d}), store.zeros(prefix + ".bias", {d})};
}

AttentionWeights AttentionWeights::create(ParameterStore& store, const std::string& prefix, std::size_t d, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionWeights w;
  w.wq = store.uniform(prefix + ".wq", {d, d}, bound, rng);
  w.bq = store.zeros(prefix + ".bq", {d});
  w.wk = store.uniform(prefix + ".wk", {d, d}, bound, rng);
  w.bk = store.zeros(prefix + ".bk", {d});
  w.wv = store.uniform(prefix + ".wv", {d, d}, bound, rng);
  w.bv = store.zeros(prefix + ".bv", {d});
  w.wo = store.uniform(prefix + ".wo", {d, d}, bound, rng);
  w.bo = store.zeros(prefix + ".bo", {d});
  return w;
}

Tensor multi_head_attention(const AttentionWeights& w, std::size_t heads, const Tensor& q, const Tensor& k,
                            const Tensor& v, const Mask& kv_mask, const AttentionOptions& options,
                            const ForwardContext& ctx) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw DimensionError("attention inputs must be [B,l,d]: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  }
  const std::size_t B = q.dim(0), lq = q.dim(1), d = q.dim(2), lk = k.dim(1);
  if (k.shape() != v.shape() || k.dim(0) != B || k.dim(2) != d) {
    throw DimensionError("attention key/value shapes " + shape_str(k.shape()) + ", " + shape_str(v.shape()) +
                         " inconsistent with query " + shape_str(q.shape()));
  }
  if (kv_mask.shape != Shape{B, lk}) {
    throw DimensionError("attention key mask " + shape_str(kv_mask.shape) + " does not match keys " +
                         shape_str(k.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("hidden dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (options.causal && lq != lk) throw DimensionError("causal attention needs equal query and key lengths");

  const Tensor qh = split_heads(linear(q, w.wq, w.bq), heads);
  const Tensor kh = split_heads(linear(k, w.wk, w.bk), heads);
  const Tensor vh = split_heads(linear(v, w.wv, w.bv), heads);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(d / heads));
  const Tensor scores = scale(matmul(qh, transpose_last2(kh)), inv_scale);

  // [B, 1, lq, lk], broadcast over heads.
  std::vector<std::uint8_t> m(B * lq * lk);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < lq; ++i)
      for (std::size_t j = 0; j < lk; ++j)
        m[(b * lq + i) * lk + j] = kv_mask.values[b * lk + j] && (!options.causal || j <= i);
  const Mask mask({B, 1, lq, lk}, std::move(m));

  Tensor weights = softmax_lastdim(scores, &mask, options.empty_rows);
  weights = ctx.drop(weights);
  const Tensor context = merge_heads(matmul(weights, vh));
  return linear(context, w.wo, w.bo);
}

EncoderBlock::EncoderBlock(ParameterStore& store, const std::string& prefix, const AttentionConfig& cfg, Rng& rng)
    : heads_(cfg.heads) {
  cfg.validate();
  const std::size_t d = cfg.d;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  ln1_ = LayerNormWeights::create(store, prefix + ".ln1", d);
  attn_ = AttentionWeights::create(store, prefix + ".attn", d, rng);
  ln2_ = LayerNormWeights::create(store, prefix + ".ln2", d);
  const std::size_t f = cfg.ffn_width();
  w1_ = store.uniform(prefix + ".ffn.w1", {d, f}, bound, rng);
  b1_ = store.zeros(prefix + ".ffn.b1", {f});
  w2_ = store.uniform(prefix + ".ffn.w2", {f, d}, 1.0 / std::sqrt(static_cast<double>(f)), rng);
  b2_ = store.zeros(prefix + ".ffn.b2", {d});
}

Tensor EncoderBlock::forward(const Tensor& x, const Mask& mask, const ForwardContext& ctx) const {
  const Tensor normed = ln1_(x);
  AttentionOptions opt;
  opt.causal = true;
  opt.empty_rows = EmptyRowPolicy::kZero;
  const Tensor h = add(x, ctx.drop(multi_head_attention(attn_, heads_, normed, normed, normed, mask, opt, ctx)));
  const Tensor ffn = linear(relu(linear(ln2_(h), w1_, b1_)), w2_, b2_);
  return mask_rows(add(h, ctx.drop(ffn)), mask);
}

Tensor EncoderBlock::forward(const SequenceBatch& x, const ForwardContext& ctx) const {
  if (!x.hidden.defined()) throw ContractError("encoder block needs embedded hidden states");
  return forward(x.hidden, x.mask, ctx);
}

std::size_t EncoderBlock::parameter_count(std::size_t d, std::size_t f) {
  if (f == 0) f = d;
  const std::size_t ln = 2 * d;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t ffn = (d * f + f) + (f * d + d);
  return 2 * ln + attn + ffn;
}

Encoder::Encoder(ParameterStore& store, const std::string& prefix, const AttentionConfig& cfg, std::size_t layers,
                 Rng& rng) {
  for (std::size_t i = 0; i < layers; ++i) blocks_.emplace_back(store, prefix + "." + std::to_string(i), cfg, rng);
  final_ln_ = LayerNormWeights::create(store, prefix + ".ln_out", cfg.d);
}

Tensor Encoder::forward(const Tensor& x, const Mask& mask, const ForwardContext& ctx) const {
  Tensor h = x;
  for (const auto& block : blocks_) h = block.forward(h, mask, ctx);
  return mask_rows(final_ln_(h), mask);
}

std::size_t Encoder::parameter_count(std::size_t d, std::size_t layers, std::size_t f) {
  return layers * EncoderBlock::parameter_count(d, f) + 2 * d;
}

Tensor add_position_embedding(const Tensor& x, const Mask& mask, const Tensor& table) {
  if (x.rank() != 3) throw DimensionError("position embedding input must be [B,l,d], got " + shape_str(x.shape()));
  const std::size_t l = x.dim(1);
  if (table.rank() != 2 || table.dim(1) != x.dim(2)) {
    throw DimensionError("position table " + shape_str(table.shape()) + " does not match " + shape_str(x.shape()));
  }
  if (l > table.dim(0)) {
    throw DimensionError("sequence length " + std::to_string(l) + " exceeds position table of " +
                         std::to_string(table.dim(0)) + " rows");
  }
  const Tensor rows = reshape(slice_rows(table, 0, l), {1, l, x.dim(2)});
  std::vector<double> m(x.dim(0) * l);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask.values[i] ? 1.0 : 0.0;
  const Tensor mask_t = Tensor::from({x.dim(0), l, 1}, std::move(m));
  return add(x, mul(rows, mask_t));
}

Tensor add_position_embedding(const SequenceBatch& x, const Tensor& table) {
  if (!x.hidden.defined()) throw ContractError("position embedding needs embedded hidden states");
  return add_position_embedding(x.hidden, x.mask, table);
}

}  // namespace gcalab
