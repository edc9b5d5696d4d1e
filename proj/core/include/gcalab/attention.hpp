#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gcalab/ops.hpp"
#include "gcalab/parameter.hpp"
#include "gcalab/rng.hpp"
#include "gcalab/tensor.hpp"

namespace gcalab {

enum class Domain { kA, kB, kCombined };

const char* domain_name(Domain d);

/// Right-padded batch of item sequences from one domain (or the combined
/// timeline). Position j of row b is real iff ids[b, j] != 0.
struct SequenceBatch {
  IndexTensor ids;  // [B, l]
  Mask mask;        // [B, l]
  Domain domain = Domain::kA;
  Tensor hidden;    // [B, l, d] once embedded

  /// Builds the mask from the padding convention (id 0 <=> padding).
  static SequenceBatch from_ids(IndexTensor ids, Domain domain);
  /// Wraps hidden states with an all-true mask; ids are left empty.
  static SequenceBatch from_hidden(Tensor hidden, Domain domain);
  static SequenceBatch from_hidden(Tensor hidden, Mask mask, Domain domain);

  std::size_t batch() const { return mask.shape.at(0); }
  std::size_t length() const { return mask.shape.at(1); }

  /// Checks the padding/mask agreement and the length bound.
  void validate(std::size_t max_len) const;
};

struct AttentionConfig {
  std::size_t d = 32;
  std::size_t heads = 4;
  double dropout_p = 0.1;
  std::size_t max_len = 50;
  std::size_t ffn_hidden = 0;  // 0 means d

  std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : d; }
  void validate() const;
};

/// Per-call behaviour that is not a learned weight.
struct ForwardContext {
  bool training = false;
  double dropout_p = 0.0;
  Rng* rng = nullptr;  // required when training with dropout > 0

  Tensor drop(const Tensor& x) const;
};

/// x @ w + b with w of shape [in, out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

struct LayerNormWeights {
  Tensor gain;
  Tensor bias;

  static LayerNormWeights create(ParameterStore& store, const std::string& prefix, std::size_t d);
  Tensor operator()(const Tensor& x) const { return layernorm(x, gain, bias, 1e-5); }
};

struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;

  static AttentionWeights create(ParameterStore& store, const std::string& prefix, std::size_t d, Rng& rng);
};

struct AttentionOptions {
  bool causal = false;
  EmptyRowPolicy empty_rows = EmptyRowPolicy::kThrow;
};

/// Multi-head scaled dot-product attention with learned projections.
/// Keys where `kv_mask` is false are excluded; with `causal`, query i only
/// sees keys j <= i. Scale is 1/sqrt(d/heads).
Tensor multi_head_attention(const AttentionWeights& w, std::size_t heads, const Tensor& q, const Tensor& k,
                            const Tensor& v, const Mask& kv_mask, const AttentionOptions& options = {},
                            const ForwardContext& ctx = {});

/// Pre-LayerNorm transformer block with causal self-attention:
/// h = x + MHA(LN(x)); out = h + FFN(LN(h)); padding rows zeroed on exit.
class EncoderBlock {
 public:
  EncoderBlock(ParameterStore& store, const std::string& prefix, const AttentionConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& x, const Mask& mask, const ForwardContext& ctx) const;
  Tensor forward(const SequenceBatch& x, const ForwardContext& ctx) const;

  /// Parameters of one block for width d and FFN hidden width f (0 = d).
  static std::size_t parameter_count(std::size_t d, std::size_t f = 0);

 private:
  std::size_t heads_;
  LayerNormWeights ln1_, ln2_;
  AttentionWeights attn_;
  Tensor w1_, b1_, w2_, b2_;
};

/// Stack of encoder blocks followed by a final LayerNorm.
class Encoder {
 public:
  Encoder(ParameterStore& store, const std::string& prefix, const AttentionConfig& cfg, std::size_t layers, Rng& rng);

  Tensor forward(const Tensor& x, const Mask& mask, const ForwardContext& ctx) const;

  static std::size_t parameter_count(std::size_t d, std::size_t layers, std::size_t f = 0);

 private:
  std::vector<EncoderBlock> blocks_;
  LayerNormWeights final_ln_;
};

/// Adds table rows 0..l-1 to the real positions of x ([B, l, d]).
Tensor add_position_embedding(const Tensor& x, const Mask& mask, const Tensor& table);
Tensor add_position_embedding(const SequenceBatch& x, const Tensor& table);

}  // namespace gcalab
