#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gcalab/attention.hpp"
#include "gcalab/metrics.hpp"
#include "gcalab/parameter.hpp"

namespace gcalab {

enum class GateActivation { kSigmoid, kTanh };
enum class KvSource {
  kPairwise,  // GCA_A attends over X_B and GCA_B over X_A
  kCombined,  // both attend over the combined timeline X_{A+B}
};

const char* to_string(GateActivation a);
const char* to_string(KvSource k);
GateActivation parse_gate_activation(const std::string& s);
KvSource parse_kv_source(const std::string& s);

struct GcaConfig {
  GateActivation gate_activation = GateActivation::kTanh;
  bool use_layernorm = true;
  std::size_t heads = 4;
  std::size_t gate_hidden = 0;  // 0 means "same as the model width"
  std::vector<int> placements;  // stages n in 0..N, sorted and unique
  KvSource kv_source = KvSource::kPairwise;
  /// Start the gate's output layer at zero (with tanh: g = 0, so the block
  /// starts as LayerNorm(X_A)).
  bool zero_init_gate = true;

  std::size_t gate_hidden_for(std::size_t d) const { return gate_hidden ? gate_hidden : d; }
  /// Throws ConfigError unless placements are sorted, unique and <= max_stage.
  void validate(int max_stage) const;
};

/// Right-pads the shorter of two hidden sequences with zero rows so both
/// have length max(l_a, l_b).
std::pair<Tensor, Tensor> align_lengths(const SequenceBatch& x_a, const SequenceBatch& x_b);

/// Two-layer FFN over [x_a; x_b] producing a per-position, per-dimension gate.
struct GateFfn {
  Tensor w1, b1, w2, b2;  // [2d, h], [h], [h, d], [d]
  GateActivation activation = GateActivation::kTanh;

  static GateFfn create(ParameterStore& store, const std::string& prefix, std::size_t d, std::size_t hidden,
                        GateActivation activation, bool zero_init, Rng& rng);
  /// act(W2 relu(W1 [x_a; x_b] + b1) + b2); inputs must be length-aligned.
  Tensor operator()(const Tensor& x_a, const Tensor& x_b) const;
};

Tensor gate_ffn(const GateFfn& gate, const Tensor& x_a, const Tensor& x_b);

/// One gated cross-attention block:
///   X'  = CA(q = X_A, k = v = X_kv)
///   out = LayerNorm(X_A + FFN([X_A; X_kv]) * X')   (LayerNorm optional)
class GcaBlock {
 public:
  GcaBlock(ParameterStore& store, const std::string& prefix, std::size_t d, const GcaConfig& cfg, Rng& rng);

  /// Returns [B, l_a, d]. When `probe` is set, accumulates |cos(X_A, X')|
  /// and |cos(X_A, X_kv)| from detached values.
  Tensor forward(const SequenceBatch& x_a, const SequenceBatch& x_kv, const ForwardContext& ctx = {},
                 GcaProbe* probe = nullptr) const;

  static std::size_t parameter_count(std::size_t d, const GcaConfig& cfg);

  GateFfn& gate() { return gate_; }
  const GateFfn& gate() const { return gate_; }
  const AttentionWeights& attention() const { return attn_; }
  const std::optional<LayerNormWeights>& norm() const { return ln_; }
  /// Cross-attention output X' alone (no gate, no residual).
  Tensor cross_attend(const SequenceBatch& x_a, const SequenceBatch& x_kv, const ForwardContext& ctx = {}) const;

 private:
  std::size_t heads_;
  AttentionWeights attn_;
  GateFfn gate_;
  std::optional<LayerNormWeights> ln_;
};

Tensor gca_forward(const GcaBlock& block, const SequenceBatch& x_a, const SequenceBatch& x_kv,
                   const ForwardContext& ctx = {}, GcaProbe* probe = nullptr);

/// Probe accumulators keyed by (stage, domain), plus the order in which
/// stages fired during the last forward passes.
struct ProbeSet {
  std::map<std::pair<int, Domain>, GcaProbe> probes;
  std::vector<int> firing_order;

  GcaProbe& at(int stage, Domain d) { return probes[{stage, d}]; }
  /// Count-weighted mean over all stages for one domain; nullopt when empty.
  std::optional<double> mean_xxprime(Domain d) const;
  std::optional<double> mean_xy(Domain d) const;
};

/// The parallel GCA_A[n] / GCA_B[n] pairs installed at each placement.
class GcaStack {
 public:
  GcaStack() = default;

  bool has(int stage) const { return pairs_.count(stage) != 0; }
  const GcaBlock& block(int stage, Domain d) const;
  GcaBlock& block(int stage, Domain d);
  const std::vector<int>& placements() const noexcept { return placements_; }

  /// Applies the pair at `stage` to (x_a, x_b). Both blocks read the inputs
  /// as they were before either update. `kv_a` / `kv_b` are the key/value
  /// sequences for the A and B queries respectively.
  std::pair<Tensor, Tensor> apply(int stage, const SequenceBatch& x_a, const SequenceBatch& x_b,
                                  const SequenceBatch& kv_a, const SequenceBatch& kv_b, const ForwardContext& ctx,
                                  ProbeSet* probes) const;

 private:
  friend GcaStack apply_placements(ParameterStore&, std::size_t, const GcaConfig&, int, Rng&);
  std::vector<int> placements_;
  std::map<int, std::pair<GcaBlock, GcaBlock>> pairs_;
};

/// Installs a GCA pair at every configured placement. Throws ConfigError for
/// placements beyond `max_stage`.
GcaStack apply_placements(ParameterStore& store, std::size_t d, const GcaConfig& cfg, int max_stage, Rng& rng);

}  // namespace gcalab
