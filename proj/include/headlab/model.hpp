#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "headlab/datagen.hpp"
#include "headlab/tape.hpp"
#include "json.hpp"

namespace headlab {

// Two-layer attention-only transformer. Learned position embeddings are
// added to the query/key inputs only (Shortformer style); values and the
// residual stream never see them.
struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t context_length = 64;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;  // per layer
  bool layer_norm = true;
  static constexpr std::size_t n_layers = 2;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct Region {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::vector<std::size_t> shape;
};

std::string head_region_name(int layer, int head, char block);  // block in QKVO
// Pattern match for region selectors: a trailing '*' matches any suffix.
bool region_matches(const std::string& name, const std::string& pattern);

// Flat weight vector plus a named-region index. Regions partition
// [0, size()) contiguously in a fixed layout derived from the config.
class ParameterStore {
 public:
  ParameterStore() = default;
  explicit ParameterStore(const ModelConfig& cfg);

  std::size_t size() const { return flat_.size(); }
  std::vector<double>& flat() { return flat_; }
  const std::vector<double>& flat() const { return flat_; }

  const std::vector<Region>& regions() const { return regions_; }
  bool has_region(const std::string& name) const;
  const Region& region(const std::string& name) const;
  std::span<double> view(const std::string& name);
  std::span<const double> view(const std::string& name) const;

 private:
  std::vector<double> flat_;
  std::vector<Region> regions_;
  std::map<std::string, std::size_t> index_;
};

// -- taped forward ----------------------------------------------------------

// Model parameters bound onto a tape as one leaf per region.
struct TapedModel {
  const ModelConfig* cfg = nullptr;
  Tape* tape = nullptr;
  std::map<std::string, Var> vars;

  Var var(const std::string& region) const { return vars.at(region); }
};

TapedModel bind_model(Tape& tape, const ModelConfig& cfg, const ParameterStore& params);

// Logits for every position of one sequence (len x vocab).
Var model_logits(TapedModel& m, std::span<const TokenId> tokens);
// Eq.-style per-sequence loss: mean over positions 1..len-1 of next-token
// cross entropy.
Var model_sequence_loss(TapedModel& m, std::span<const TokenId> tokens);
// Reference-model loss: negated mean KL(ref_rows || softmax(logits)) over
// positions, keeping the printed sign of the source formulation.
Var model_sequence_kl_loss(TapedModel& m, std::span<const TokenId> tokens,
                           const Tensor& ref_rows);

// Gradient of a taped scalar with respect to every parameter; regions not on
// the tape yield exact zeros.
std::vector<double> collect_gradient(const TapedModel& m, const ParameterStore& params);

struct BatchGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

// Empirical loss (mean over sequences) and its gradient.
BatchGrad empirical_loss_and_grad(const ModelConfig& cfg, const ParameterStore& params,
                                  const TokenBatch& batch);

// -- evaluation forward (no tape) -------------------------------------------

struct HeadKey {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadKey&) const = default;
};

struct EvalHooks {
  bool capture_attention = false;
  bool capture_head_out = false;
  bool keep_probs = false;
  // Replace a head's output (post O-projection, before the residual add).
  // A 1 x d_model tensor broadcasts over positions; len x d_model replaces
  // rows directly.
  const std::map<HeadKey, Tensor>* replace = nullptr;
};

struct SeqEval {
  std::vector<double> token_losses;  // loss predicting tokens 1..len-1
  double mean_loss = 0.0;
  Tensor probs;  // len x vocab next-token distributions (if keep_probs)
  std::map<HeadKey, Tensor> attention;  // len x len, causal rows
  std::map<HeadKey, Tensor> head_out;   // len x d_model
};

SeqEval eval_sequence(const ModelConfig& cfg, const ParameterStore& params,
                      std::span<const TokenId> tokens, const EvalHooks& hooks = {});

double empirical_loss(const ModelConfig& cfg, const ParameterStore& params,
                      const TokenBatch& batch);
// Eq.-9-style batch loss against a reference model sharing the tokenizer.
double kl_loss_vs_reference(const ModelConfig& cfg, const ParameterStore& params,
                            const ModelConfig& ref_cfg, const ParameterStore& ref_params,
                            const TokenBatch& batch);

// -- checkpoints -------------------------------------------------------------

struct Checkpoint {
  std::uint64_t step = 0;
  ModelConfig config;
  ParameterStore params;
  std::uint64_t train_seed = 0;
  std::uint64_t rng_state = 0;
  double loss_at_save = 0.0;
  std::string tokenizer_hash = "identity";
  std::map<std::string, std::string> metadata;
};

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// -- training ----------------------------------------------------------------

struct TrainConfig {
  std::uint64_t steps = 10000;
  std::size_t batch_size = 8;
  std::string optimizer = "sgd";  // sgd | adam
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // 0 disables
  double init_std = 0.02;
  std::uint64_t seed = 0;
  int checkpoints_per_decade = 20;
  // Regions zeroed at init and never updated; "head_1_*" freezes a prefix.
  std::vector<std::string> freeze_regions;
  std::string tokenizer_hash = "identity";

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
  std::vector<std::uint64_t> checkpoint_steps;
  std::vector<std::pair<std::uint64_t, double>> loss_curve;
  bool aborted = false;
  std::string abort_reason;
};

ParameterStore init_params(const ModelConfig& cfg, const TrainConfig& tc);
std::vector<std::uint64_t> checkpoint_schedule(std::uint64_t steps, int per_decade);

TrainResult train(const ModelConfig& cfg, const TrainConfig& tc, const DataSource& data,
                  const std::filesystem::path& out_dir);

// Autoregressive sampler over a reference checkpoint at temperature 1.
DataSource model_generator_source(const Checkpoint& reference, std::uint64_t seed);

}  // namespace headlab
