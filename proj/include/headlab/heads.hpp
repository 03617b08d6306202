#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "headlab/ablation.hpp"
#include "headlab/datagen.hpp"
#include "headlab/model.hpp"
#include "json.hpp"

namespace headlab {

enum class PatternLabel { induction, dyck, skip_ngram, ngram, unexplained };
const char* pattern_label_name(PatternLabel l);

struct PatternVerdict {
  std::size_t seq = 0;
  std::size_t pos = 0;
  PatternLabel label = PatternLabel::unexplained;
  std::vector<TokenId> evidence;  // matched template or span
  std::size_t evidence_pos = 0;
};

struct ClassifierConfig {
  int dyck_kinds = 3;  // bracket alphabet shared with the generator
  std::vector<SkipTemplate> skip_templates;
  double prev_threshold = 0.5;
  double current_threshold = 0.5;
  double induction_threshold = 0.3;
  std::size_t max_ngram_span = 8;

  static ClassifierConfig from_pattern(const PatternSpec& spec);
};

// Span-frequency index over the pooled items, for the n-gram rule (a span
// must occur in at least two items).
class SpanIndex {
 public:
  void add(std::span<const TokenId> span);
  std::size_t count(std::span<const TokenId> span) const;

 private:
  std::map<std::vector<TokenId>, std::size_t> counts_;
};

// Serial matcher: induction, then Dyck, then skip n-gram, then n-gram.
PatternVerdict classify_position(const TokenInContext& item,
                                 std::span<const TokenId> context,
                                 const ClassifierConfig& cfg, const SpanIndex& pool);

std::vector<PatternVerdict> classify_items(const std::vector<TokenInContext>& items,
                                           const TokenBatch& batch,
                                           const ClassifierConfig& cfg);

// Stack matcher used by the Dyck rule: true when the token at `pos` closes an
// earlier opener with valid nesting in between; fills opener position.
bool dyck_match(std::span<const TokenId> context, std::size_t pos,
                const ClassifierConfig& cfg, std::size_t* opener_pos);

struct AttentionScores {
  double previous_token = 0.0;
  double current_token = 0.0;
  double induction = 0.0;
};

// Previous/current-token scores from attention mass at offsets -1/0 over
// natural data; induction score from repeated random probe sequences.
AttentionScores attention_scores(const Checkpoint& ckpt, HeadKey head,
                                 const DataSource& natural, std::size_t n_natural,
                                 int n_probes, std::uint64_t seed);

// Scores computed on explicit attention matrices (row q attends keys <= q).
double previous_token_score_from_attention(const Tensor& attn);
double current_token_score_from_attention(const Tensor& attn);

struct HeadReport {
  HeadKey head;
  std::map<std::string, double> attribution_pct;  // per label, 0..100
  std::string type_label;  // previous_token | current_token | induction | multigram
  std::string subtype;     // dyck | skip_ngram | ngram for multigram heads
  std::size_t multigram_count = 0;
  double previous_token_score = 0.0;
  double current_token_score = 0.0;
  double induction_score = 0.0;
  double explained_fraction = 0.0;

  nlohmann::json to_json() const;
};

HeadReport classify_head(const Checkpoint& ckpt, HeadKey head,
                         const std::vector<TokenInContext>& items,
                         const TokenBatch& batch, const ClassifierConfig& cfg,
                         const AttentionScores& scores);

struct CompositionScores {
  double q = 0.0;
  double k = 0.0;
  double v = 0.0;
  bool degenerate = false;
};

// Frobenius-ratio composition between a layer-0 writer and layer-1 reader:
// |M Wov1|_F / (|M|_F |Wov1|_F) with M = Wqk2^T, Wqk2, Wov2 for Q/K/V.
CompositionScores composition_scores_raw(const Tensor& wqk2, const Tensor& wov2,
                                         const Tensor& wov1);
CompositionScores composition_scores(const ModelConfig& cfg, const ParameterStore& params,
                                     HeadKey h1, HeadKey h2);

// d_model x d_model combined matrices for one head.
Tensor head_wqk(const ModelConfig& cfg, const ParameterStore& params, HeadKey h);
Tensor head_wov(const ModelConfig& cfg, const ParameterStore& params, HeadKey h);

}  // namespace headlab
