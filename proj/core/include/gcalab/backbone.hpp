#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcalab/attention.hpp"
#include "gcalab/gca.hpp"
#include "gcalab/parameter.hpp"

namespace gcalab {

enum class EncoderSharing { kShared, kIndependent };

/// How the combined-thread encoding enters the final per-domain
/// representation when no adapters are configured.
enum class CombinedFusion {
  kConcat,  // [Enc(X_i); Enc(X_{A+B})] projected back to d
  kAdd,     // Enc(X_i) + Enc(X_{A+B})
};

const char* to_string(EncoderSharing s);
const char* to_string(CombinedFusion f);

/// Full architectural description of a dual-domain recommender.
///
/// Three wiring families are expressible (see the presets):
///  * pairwise: independent encoders, GCA pairs attend across domains,
///    optional combined thread fused by concatenation;
///  * shared + adapters: one encoder for every thread, low-rank domain and
///    invariant adapters, GCA stages 0 (pre-dropout), 1 (post-dropout) and
///    2 (after the domain adapters);
///  * tri-thread: independent encoders, frozen combined item table that
///    seeds the domain tables, GCA over the combined timeline.
struct ModelConfig {
  std::size_t vocab_a = 200;
  std::size_t vocab_b = 200;
  std::size_t d = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 0;  // 0 means d
  EncoderSharing encoder_sharing = EncoderSharing::kIndependent;
  bool combined_thread = false;
  bool freeze_combined_embedding = false;
  std::optional<std::size_t> adapter_rank;
  CombinedFusion fusion = CombinedFusion::kConcat;
  GcaConfig gca;
  double dropout_p = 0.1;
  std::size_t max_len = 20;

  static ModelConfig pairwise_preset();
  static ModelConfig shared_adapter_preset();
  static ModelConfig tri_thread_preset();

  std::size_t ffn_width() const { return ffn_hidden ? ffn_hidden : d; }
  /// Deepest valid GCA stage N.
  int max_stage() const { return adapter_rank ? 2 : 1; }
  std::size_t combined_max_len() const { return 2 * max_len; }
  /// Throws ConfigError on any invalid combination.
  void validate() const;
};

nlohmann::json to_json(const GcaConfig& c);
GcaConfig gca_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Closed-form parameter count for a configuration (no allocation).
std::size_t parameter_count(const ModelConfig& cfg);

/// Model input for a batch of users. Row b of every sequence belongs to the
/// same user. `a_in_ab[b, i]` is the position of A item i inside the
/// combined sequence (or -1 for padding); likewise for B.
struct ModelBatch {
  SequenceBatch a;
  SequenceBatch b;
  SequenceBatch ab;
  IndexTensor a_in_ab;
  IndexTensor b_in_ab;

  std::size_t size() const { return a.batch(); }
};

struct ForwardOutput {
  Tensor repr_a;  // [B, l_a, d]
  Tensor repr_b;  // [B, l_b, d]
};

/// Candidate lists and labels for one domain. Column 0 holds the positive
/// for training batches; `valid` masks out rows without a training target.
struct DomainTargets {
  IndexTensor candidates;  // [B, 1 + k]
  std::vector<std::uint8_t> valid;
};

struct LowRankAdapter {
  enum class Kind { kDomain, kInvariant };
  Tensor down;  // [d, r]
  Tensor up;    // [r, d]
  Kind kind = Kind::kDomain;

  /// x + up(down(source)); for domain adapters source is x itself.
  Tensor operator()(const Tensor& x, const Tensor& source) const;
};

class Model {
 public:
  /// Deterministic construction: equal (cfg, seed) gives bitwise-equal weights.
  static Model build(const ModelConfig& cfg, std::uint64_t seed);

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Independent copy with identical parameter values.
  Model clone() const;

  ForwardOutput forward(const ModelBatch& batch, const ForwardContext& ctx = {}, ProbeSet* probes = nullptr) const;

  /// Dot product of the last real position's representation with candidate
  /// item embeddings (tied with the input table) -> [B, c]. Rows with no
  /// real position score 0.
  Tensor score_next_item(const Tensor& repr, const Mask& mask, const IndexTensor& candidates, Domain domain) const;

  /// Sampled binary cross-entropy at the final position, averaged over valid
  /// rows and summed over the two domains.
  Tensor training_loss(const ModelBatch& batch, const DomainTargets& targets_a, const DomainTargets& targets_b,
                       const ForwardContext& ctx) const;

  const ModelConfig& config() const noexcept { return cfg_; }
  std::uint64_t seed() const noexcept { return seed_; }
  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }
  std::size_t parameter_count() const { return store_.count(); }

  GcaStack& gca() noexcept { return gca_; }
  const GcaStack& gca() const noexcept { return gca_; }
  /// Adapters by name ("dlora.A", "ilora.B", ...); empty without adapters.
  std::vector<std::pair<std::string, LowRankAdapter*>> adapters();
  const Tensor& item_table(Domain d) const;

  /// Embedding + position lookup for one thread, masked.
  Tensor embed(const SequenceBatch& seq) const;
  /// Encoder used for a given thread.
  Tensor encode(const Tensor& x, const Mask& mask, Domain thread, const ForwardContext& ctx) const;

 private:
  Model() = default;

  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  ParameterStore store_;
  Tensor emb_a_, emb_b_, emb_ab_, tag_ab_;
  Tensor pos_a_, pos_b_, pos_ab_;
  std::vector<Encoder> encoders_;  // one when shared; A, B[, AB] otherwise
  GcaStack gca_;
  std::optional<LowRankAdapter> dlora_a_, dlora_b_, dlora_ab_, ilora_a_, ilora_b_;
  Tensor fuse_a_w_, fuse_a_b_, fuse_b_w_, fuse_b_b_;
};

// --- checkpoints ------------------------------------------------------------

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint32_t version = 1;
  std::string metadata;  // free-form, typically the resolved config as JSON
  std::vector<NamedArray> arrays;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Single-file binary layout (all integers little-endian):
///   "GCALABCK" | u32 version | u32 metadata length | metadata bytes |
///   u32 entry count | entries | float64 payload
/// where each entry is
///   u32 name length | name | u32 rank | u64 dims[rank] | u64 byte offset
/// and offsets are relative to the start of the payload.
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

Checkpoint make_checkpoint(const Model& model, std::string metadata = {});
/// Copies values into a model; names and shapes must match exactly.
void load_checkpoint_into(Model& model, const Checkpoint& ckpt);

}  // namespace gcalab
