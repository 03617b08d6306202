#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "headlab/model.hpp"
#include "json.hpp"

namespace headlab {

struct SgldConfig {
  double step_size = 1e-3;
  double nbeta = 30.0;   // inverse temperature times sample size, one product
  double gamma = 200.0;  // localization strength
  int chains = 4;
  int draws = 200;
  int burn_in = 0;
  int minibatch = 32;         // sequences per SGLD gradient step
  std::size_t eval_tokens = 16384;  // fixed evaluation batch, in tokens
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SgldConfig from_json(const nlohmann::json& j);
};

// The refinement set V: indices SGLD is allowed to move. The complement is
// frozen exactly at w*.
struct WeightMask {
  std::vector<std::size_t> included;  // sorted, unique

  static WeightMask all(std::size_t dim);
  static WeightMask from_regions(const ParameterStore& params,
                                 const std::vector<std::string>& region_patterns);
  bool empty() const { return included.empty(); }
};

// Loss surface SGLD samples from: a fresh-minibatch gradient per draw and a
// fixed evaluation batch for the recorded traces.
struct SgldObjective {
  std::size_t dim = 0;
  // Returns minibatch loss at w and fills grad (size dim).
  std::function<double(std::span<const double> w, std::uint64_t draw_index,
                       std::vector<double>& grad)>
      minibatch;
  std::function<double(std::span<const double> w)> eval_loss;
};

struct ChainTrace {
  std::vector<double> losses;  // evaluation-batch loss at every draw
  bool ok = true;
  std::string error;
};

ChainTrace sgld_chain(std::span<const double> w_star, const WeightMask& mask,
                      const SgldObjective& objective, const SgldConfig& cfg,
                      int chain_index);

struct LlcEstimate {
  double lambda_hat = 0.0;
  double init_loss = 0.0;
  std::vector<double> per_chain;  // lambda per surviving chain
  std::vector<ChainTrace> traces;
  int failed_chains = 0;
  SgldConfig cfg;

  nlohmann::json to_json(bool include_traces) const;
};

LlcEstimate estimate_llc(std::span<const double> w_star, const WeightMask& mask,
                         const SgldObjective& objective, const SgldConfig& cfg);

// Transformer adapter: SGLD over a checkpoint's weights with minibatches and
// the fixed evaluation batch drawn from `source`. `cell_salt` decorrelates
// minibatch streams between grid cells.
SgldObjective transformer_objective(const ModelConfig& cfg, const ParameterStore& at,
                                    const DataSource& source, const SgldConfig& sgld,
                                    std::uint64_t cell_salt);

// Same surface but with the reference-model loss (mean KL rows against the
// reference's next-token distributions, printed sign).
SgldObjective transformer_kl_objective(const ModelConfig& cfg, const ParameterStore& at,
                                       const Checkpoint& reference,
                                       const DataSource& source, const SgldConfig& sgld,
                                       std::uint64_t cell_salt);

}  // namespace headlab
