#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "headlab/model.hpp"

namespace headlab {

enum class AblationKind { zero, mean, resample };

const char* ablation_kind_name(AblationKind k);

struct AblationSpec {
  std::vector<HeadKey> targets;
  AblationKind kind = AblationKind::zero;
  // Mean statistics batch (mean kind only): activations are averaged across
  // the batch per position, so the mean of a single sequence is that
  // sequence's own activations.
  std::optional<DataSource> stats_data;
  std::size_t stats_size = 25;
  std::uint64_t stats_batch_index = 0;
  int roll_offset = 1;  // resample kind: roll over the batch dimension
};

// Per-position mean output (K x d_model) of each target head over the
// statistics batch.
std::map<HeadKey, Tensor> head_output_means(const ModelConfig& cfg,
                                            const ParameterStore& params,
                                            const std::vector<HeadKey>& heads,
                                            const DataSource& data, std::size_t n,
                                            std::uint64_t batch_index);

// loss(ablated) - loss(clean) on the same batch.
double ablation_score(const Checkpoint& ckpt, const AblationSpec& spec,
                      const DataSource& eval_data, std::size_t n,
                      std::uint64_t batch_index = 0);

struct TokenInContext {
  std::size_t seq = 0;
  std::size_t pos = 0;  // position of the predicted token (1-based within seq)
  TokenId token = 0;
  double loss_delta = 0.0;
  std::vector<double> attention_row;  // clean attention at query pos-1
};

// Mean-ablate one head over a pooled sample, rank positions by per-token loss
// increase, keep the strongest top_k. Ties break on (seq, pos).
std::vector<TokenInContext> tokens_in_context(const Checkpoint& ckpt, HeadKey head,
                                              const DataSource& corpus,
                                              std::size_t pool_positions,
                                              std::size_t top_k,
                                              std::uint64_t batch_index = 0);

// Three-pass path patch: mean-ablate layer-0 sources, capture the receiver's
// output, patch it into an otherwise clean run. Returns loss(C) - loss(A).
double path_patch(const Checkpoint& ckpt, const std::vector<HeadKey>& sources,
                  HeadKey receiver, const DataSource& eval_data, std::size_t n,
                  std::uint64_t batch_index = 0);
// Same, restricted to a chosen set of predicted positions per sequence.
double path_patch_at(const Checkpoint& ckpt, const std::vector<HeadKey>& sources,
                     HeadKey receiver, const TokenBatch& batch,
                     const std::vector<std::vector<std::size_t>>* positions);

// Mean per-token loss at position `late` minus at `early` (1-based predicted
// positions). Negative values indicate in-context learning.
double icl_score(const Checkpoint& ckpt, const DataSource& eval_data, std::size_t n,
                 std::size_t early, std::size_t late, std::uint64_t batch_index = 0,
                 const AblationSpec* ablate = nullptr);

}  // namespace headlab
