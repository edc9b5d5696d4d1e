#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcalab/backbone.hpp"
#include "gcalab/rng.hpp"

namespace gcalab {

struct Interaction {
  std::int64_t user = 0;
  std::int64_t item = 0;  // >= 1, dense within its domain
  Domain domain = Domain::kA;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

struct InteractionLog {
  std::vector<Interaction> rows;
  std::size_t vocab_a = 0;
  std::size_t vocab_b = 0;

  /// Rows of each user in timestamp order, keyed by user id.
  std::map<std::int64_t, std::vector<Interaction>> by_user() const;
};

/// Parameters of the latent-factor generator.
///
/// Each user has interest vectors u_A, u_B with u_B = rho u_A + sqrt(1-rho^2) z,
/// so corr(u_A, u_B) = cross_corr. Items of both domains live in the same
/// latent space. The next item of a domain is drawn without replacement with
/// probability proportional to
///   exp(sharpness * (<u_dom, v> + recency * <v_prev, v>) / sqrt(latent_dim))
/// where v_prev is the user's previous item in either domain.
struct SynthSpec {
  std::size_t users = 2000;
  std::size_t items_per_domain = 200;
  double cross_corr = 0.7;
  std::size_t seq_min = 5;
  std::size_t seq_max = 15;
  std::uint64_t seed = 0;
  std::size_t latent_dim = 8;
  double sharpness = 3.0;
  double recency = 0.5;

  void validate() const;
};

nlohmann::json to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

/// Latent draws behind a synthetic log, row-major [users, latent_dim].
struct SynthLatents {
  std::size_t dim = 0;
  std::vector<double> user_a, user_b;
  std::vector<double> item_a, item_b;  // [items, latent_dim]
};

SynthLatents draw_latents(const SynthSpec& spec);
InteractionLog generate_synthetic(const SynthSpec& spec);

/// Raw-id -> dense-id tables produced by ingestion.
struct IdMapping {
  std::vector<std::pair<std::string, std::int64_t>> users;
  std::vector<std::pair<std::string, std::int64_t>> items_a;
  std::vector<std::pair<std::string, std::int64_t>> items_b;
};

struct LoadedLog {
  InteractionLog log;
  IdMapping mapping;
};

/// Reads a 4-column TSV (user, item, domain, timestamp). The header row is
/// optional. Domains are "A"/"B" (case-insensitive). Ids are remapped to
/// dense 1..V per domain in sorted raw-id order (numeric when every id is an
/// integer). Per user, rows are stably sorted by timestamp and ties are
/// bumped so timestamps strictly increase, keeping file order.
LoadedLog load_log(const std::string& path);
void write_log(const std::string& path, const InteractionLog& log);
/// Writes <prefix>users.tsv, <prefix>items_A.tsv and <prefix>items_B.tsv.
void write_id_mapping(const std::string& prefix, const IdMapping& mapping);

/// One user's full per-domain histories in time order.
struct UserHistory {
  std::int64_t user = 0;
  std::vector<std::int64_t> a_items, a_ts;
  std::vector<std::int64_t> b_items, b_ts;
};

enum class Split { kTrain, kVal, kTest };
const char* to_string(Split s);

/// Leave-one-out split: per domain the last item is the test target, the
/// penultimate the validation target, the rest the training prefix.
struct SplitDataset {
  std::size_t vocab_a = 0;
  std::size_t vocab_b = 0;
  std::vector<UserHistory> users;
  std::size_t dropped = 0;

  std::size_t size() const { return users.size(); }
  /// Number of leading items of each domain visible as input for `split`.
  static std::size_t visible(std::size_t n, Split s);
  std::int64_t target(std::size_t u, Domain d, Split s) const;
};

SplitDataset split_leave_one_out(const InteractionLog& log, std::size_t min_len = 3);

/// k distinct items drawn uniformly from {1..vocab} minus `history` (which
/// should contain the positive). Throws SamplingError when fewer than k
/// items remain.
std::vector<std::int64_t> sample_negatives(const std::vector<std::int64_t>& history, std::size_t vocab, std::size_t k,
                                           Rng& rng);

/// Input of one user: per-domain item prefixes with their timestamps.
struct UserInput {
  std::vector<std::int64_t> a_items, a_ts;
  std::vector<std::int64_t> b_items, b_ts;
};

/// Prefixes visible when predicting the `split` targets.
UserInput input_for(const UserHistory& h, Split split);

/// Pads a group of users into a model batch. Each domain keeps its last
/// `max_len` items; the combined timeline interleaves both by timestamp
/// (A first on ties) with B ids offset by `vocab_a`.
ModelBatch make_model_batch(const std::vector<const UserInput*>& users, std::size_t vocab_a, std::size_t max_len,
                            bool combined);

/// Candidate lists for evaluating one split. The positive sits at
/// `positive_index[u]` among 1 + negatives candidates.
struct EvalCandidates {
  std::vector<std::vector<std::int64_t>> a, b;
  std::vector<std::size_t> pos_a, pos_b;
};

EvalCandidates build_eval_candidates(const SplitDataset& ds, Split split, std::size_t negatives, const Rng& rng);

/// One epoch's training examples: each user's input is cut at a random
/// point of each domain's training prefix, and the following item becomes
/// the target. Domains whose prefix has a single item carry no target.
struct TrainingExample {
  UserInput input;
  std::int64_t target_a = 0;  // 0 = no target
  std::int64_t target_b = 0;
};

std::vector<TrainingExample> build_training_examples(const SplitDataset& ds, Rng& rng);

/// Candidate tensors [B, 1 + k] with the positive in column 0 and negatives
/// drawn outside the user's full domain history.
DomainTargets make_training_targets(const SplitDataset& ds, const std::vector<std::size_t>& user_idx,
                                    const std::vector<TrainingExample>& examples, Domain d, std::size_t negatives,
                                    Rng& rng);

}  // namespace gcalab
