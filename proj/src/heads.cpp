#include "headlab/heads.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>

namespace headlab {

using nlohmann::json;

const char* pattern_label_name(PatternLabel l) {
  switch (l) {
    case PatternLabel::induction: return "induction";
    case PatternLabel::dyck: return "dyck";
    case PatternLabel::skip_ngram: return "skip_ngram";
    case PatternLabel::ngram: return "ngram";
    case PatternLabel::unexplained: return "unexplained";
  }
  return "?";
}

ClassifierConfig ClassifierConfig::from_pattern(const PatternSpec& spec) {
  ClassifierConfig cfg;
  cfg.dyck_kinds = spec.dyck_kinds;
  cfg.skip_templates = spec.skips;
  return cfg;
}

void SpanIndex::add(std::span<const TokenId> span) {
  ++counts_[std::vector<TokenId>(span.begin(), span.end())];
}

std::size_t SpanIndex::count(std::span<const TokenId> span) const {
  auto it = counts_.find(std::vector<TokenId>(span.begin(), span.end()));
  return it == counts_.end() ? 0 : it->second;
}

namespace {

std::optional<std::pair<int, bool>> bracket_of(TokenId t, int kinds) {
  if (t < 1 || t > static_cast<TokenId>(2 * kinds)) return std::nullopt;
  return std::make_pair((t - 1) / 2, ((t - 1) % 2) == 1);
}

std::size_t argmax_key(const std::vector<double>& attention_row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < attention_row.size(); ++j)
    if (attention_row[j] > attention_row[best]) best = j;
  return best;
}

}  // namespace

bool dyck_match(std::span<const TokenId> context, std::size_t pos,
                const ClassifierConfig& cfg, std::size_t* opener_pos) {
  auto br = bracket_of(context[pos], cfg.dyck_kinds);
  if (!br || !br->second) return false;  // next token must be a closer
  // Scan the prefix with a stack; an unmatched closer poisons its level so
  // nothing can match across broken nesting.
  constexpr std::size_t kPoison = static_cast<std::size_t>(-1);
  std::vector<std::pair<int, std::size_t>> stack;  // (kind or -1 poison, position)
  for (std::size_t i = 0; i < pos; ++i) {
    auto b = bracket_of(context[i], cfg.dyck_kinds);
    if (!b) continue;
    if (!b->second) {
      stack.emplace_back(b->first, i);
    } else if (!stack.empty() && stack.back().first == b->first) {
      stack.pop_back();
    } else {
      stack.emplace_back(-1, kPoison);  // poison
    }
  }
  if (stack.empty() || stack.back().first != br->first) return false;
  if (opener_pos) *opener_pos = stack.back().second;
  return true;
}

PatternVerdict classify_position(const TokenInContext& item,
                                 std::span<const TokenId> context,
                                 const ClassifierConfig& cfg, const SpanIndex& pool) {
  PatternVerdict v;
  v.seq = item.seq;
  v.pos = item.pos;
  const std::size_t pos = item.pos;  // predicted token index
  const std::size_t qpos = pos - 1;
  const std::size_t maxkey =
      item.attention_row.empty() ? qpos : argmax_key(item.attention_row);

  // 1. induction: the next token continues an earlier occurrence of the
  // current bigram; max attention sits on the current token (previous-token
  // head view) or on the earlier continuation (induction head view).
  for (std::size_t j = 0; j < qpos; ++j) {
    if (context[j] == context[qpos] && context[j + 1] == context[pos]) {
      if (maxkey == qpos || maxkey == j + 1) {
        v.label = PatternLabel::induction;
        v.evidence = {context[qpos], context[pos]};
        v.evidence_pos = j;
        return v;
      }
    }
  }
  // 2. Dyck
  std::size_t opener = 0;
  if (dyck_match(context, pos, cfg, &opener)) {
    v.label = PatternLabel::dyck;
    v.evidence = {context[opener], context[pos]};
    v.evidence_pos = opener;
    return v;
  }
  // 3. skip n-gram template table
  for (const SkipTemplate& t : cfg.skip_templates) {
    for (std::size_t r = 0; r < t.tail.size(); ++r) {
      if (t.tail[r] != context[pos]) continue;
      // preceding tail tokens must already be in place
      if (r > pos) continue;
      bool tail_ok = true;
      for (std::size_t q = 0; q < r; ++q)
        if (context[pos - r + q] != t.tail[q]) {
          tail_ok = false;
          break;
        }
      if (!tail_ok) continue;
      const std::size_t tail_start = pos - r;
      for (int g = t.gap_min; g <= t.gap_max; ++g) {
        if (tail_start < static_cast<std::size_t>(g) + 1) break;
        std::size_t head_pos = tail_start - g - 1;
        if (context[head_pos] == t.head) {
          v.label = PatternLabel::skip_ngram;
          v.evidence.push_back(t.head);
          for (TokenId tt : t.tail) v.evidence.push_back(tt);
          v.evidence_pos = head_pos;
          return v;
        }
      }
    }
  }
  // 4. n-gram: the span from the max-attention token through the predicted
  // token recurs in the pool.
  if (!item.attention_row.empty() && pos - maxkey + 1 >= 2 &&
      pos - maxkey + 1 <= cfg.max_ngram_span) {
    std::span<const TokenId> span{context.data() + maxkey, pos - maxkey + 1};
    if (pool.count(span) >= 2) {
      v.label = PatternLabel::ngram;
      v.evidence.assign(span.begin(), span.end());
      v.evidence_pos = maxkey;
      return v;
    }
  }
  v.label = PatternLabel::unexplained;
  return v;
}

std::vector<PatternVerdict> classify_items(const std::vector<TokenInContext>& items,
                                           const TokenBatch& batch,
                                           const ClassifierConfig& cfg) {
  SpanIndex pool;
  for (const TokenInContext& item : items) {
    if (item.attention_row.empty()) continue;
    const std::size_t maxkey = argmax_key(item.attention_row);
    const std::size_t len = item.pos - maxkey + 1;
    if (len >= 2 && len <= cfg.max_ngram_span)
      pool.add({batch.seq(item.seq) + maxkey, len});
  }
  std::vector<PatternVerdict> out;
  out.reserve(items.size());
  for (const TokenInContext& item : items)
    out.push_back(classify_position(item, {batch.seq(item.seq), batch.length}, cfg, pool));
  return out;
}

double previous_token_score_from_attention(const Tensor& attn) {
  // Mean attention mass on the key one before the query, over queries >= 1.
  const std::size_t n = attn.rows();
  if (n < 2) return 0.0;
  double acc = 0.0;
  for (std::size_t q = 1; q < n; ++q) acc += attn(q, q - 1);
  return acc / static_cast<double>(n - 1);
}

double current_token_score_from_attention(const Tensor& attn) {
  const std::size_t n = attn.rows();
  double acc = 0.0;
  for (std::size_t q = 0; q < n; ++q) acc += attn(q, q);
  return acc / static_cast<double>(n);
}

AttentionScores attention_scores(const Checkpoint& ckpt, HeadKey head,
                                 const DataSource& natural, std::size_t n_natural,
                                 int n_probes, std::uint64_t seed) {
  const ModelConfig& cfg = ckpt.config;
  AttentionScores s;
  EvalHooks hooks;
  hooks.capture_attention = true;
  TokenBatch batch = natural.sample_batch(n_natural, mix_seed(seed, 0xa77));
  double prev = 0.0, cur = 0.0;
  for (std::size_t i = 0; i < batch.n; ++i) {
    SeqEval e = eval_sequence(cfg, ckpt.params, {batch.seq(i), batch.length}, hooks);
    const Tensor& attn = e.attention.at(head);
    prev += previous_token_score_from_attention(attn);
    cur += current_token_score_from_attention(attn);
  }
  s.previous_token = prev / static_cast<double>(batch.n);
  s.current_token = cur / static_cast<double>(batch.n);

  // Induction probe: a random sequence repeated twice; score is the mean
  // attention from second-half queries onto (first occurrence + 1).
  const std::size_t half = cfg.context_length / 2;
  std::mt19937_64 rng(mix_seed(seed, 0x1d));
  double ind = 0.0;
  std::size_t counted = 0;
  for (int p = 0; p < n_probes; ++p) {
    std::vector<TokenId> toks(2 * half);
    for (std::size_t i = 0; i < half; ++i) {
      toks[i] = static_cast<TokenId>(rng() % cfg.vocab_size);
      toks[half + i] = toks[i];
    }
    SeqEval e = eval_sequence(cfg, ckpt.params, toks, hooks);
    const Tensor& attn = e.attention.at(head);
    for (std::size_t q = half; q < 2 * half; ++q) {
      ind += attn(q, q - half + 1);
      ++counted;
    }
  }
  s.induction = counted ? ind / static_cast<double>(counted) : 0.0;
  return s;
}

json HeadReport::to_json() const {
  json j;
  j["layer"] = head.layer;
  j["head"] = head.head;
  j["attribution_pct"] = attribution_pct;
  j["type"] = type_label;
  j["subtype"] = subtype;
  j["multigram_count"] = multigram_count;
  j["previous_token_score"] = previous_token_score;
  j["current_token_score"] = current_token_score;
  j["induction_score"] = induction_score;
  j["explained_fraction"] = explained_fraction;
  return j;
}

HeadReport classify_head(const Checkpoint& ckpt, HeadKey head,
                         const std::vector<TokenInContext>& items,
                         const TokenBatch& batch, const ClassifierConfig& cfg,
                         const AttentionScores& scores) {
  (void)ckpt;
  if (items.empty()) throw std::invalid_argument("classify_head: no items");
  HeadReport r;
  r.head = head;
  r.previous_token_score = scores.previous_token;
  r.current_token_score = scores.current_token;
  r.induction_score = scores.induction;

  std::vector<PatternVerdict> verdicts = classify_items(items, batch, cfg);
  std::map<PatternLabel, std::size_t> counts;
  for (const auto& v : verdicts) ++counts[v.label];
  const double total = static_cast<double>(verdicts.size());
  for (auto label : {PatternLabel::induction, PatternLabel::dyck,
                     PatternLabel::skip_ngram, PatternLabel::ngram,
                     PatternLabel::unexplained})
    r.attribution_pct[pattern_label_name(label)] =
        100.0 * static_cast<double>(counts[label]) / total;
  r.explained_fraction = 1.0 - counts[PatternLabel::unexplained] / total;

  // Unique multigram identity sets over the explained items.
  std::set<std::vector<TokenId>> dyck_pairs, skip_tuples, ngram_strings;
  for (const auto& v : verdicts) {
    if (v.label == PatternLabel::dyck) dyck_pairs.insert(v.evidence);
    if (v.label == PatternLabel::skip_ngram) skip_tuples.insert(v.evidence);
    if (v.label == PatternLabel::ngram) ngram_strings.insert(v.evidence);
  }
  r.multigram_count = dyck_pairs.size() + skip_tuples.size() + ngram_strings.size();

  if (scores.previous_token >= cfg.prev_threshold) {
    r.type_label = "previous_token";
  } else if (scores.current_token >= cfg.current_threshold) {
    r.type_label = "current_token";
  } else if (scores.induction >= cfg.induction_threshold) {
    r.type_label = "induction";
  } else {
    r.type_label = "multigram";
    PatternLabel best = PatternLabel::ngram;
    std::size_t best_count = 0;
    for (auto label :
         {PatternLabel::dyck, PatternLabel::skip_ngram, PatternLabel::ngram}) {
      if (counts[label] > best_count) {
        best_count = counts[label];
        best = label;
      }
    }
    r.subtype = pattern_label_name(best);
  }
  return r;
}

Tensor head_wqk(const ModelConfig& cfg, const ParameterStore& params, HeadKey h) {
  const std::size_t d = cfg.d_model, dh = cfg.head_dim();
  auto wq = params.view(head_region_name(h.layer, h.head, 'Q'));
  auto wk = params.view(head_region_name(h.layer, h.head, 'K'));
  Tensor out = Tensor::zeros({d, d});
  // Wq (d x dh) Wk^T (dh x d)
  mm_nt(wq.data(), wk.data(), out.data.data(), d, dh, d);
  return out;
}

Tensor head_wov(const ModelConfig& cfg, const ParameterStore& params, HeadKey h) {
  const std::size_t d = cfg.d_model, dh = cfg.head_dim();
  auto wv = params.view(head_region_name(h.layer, h.head, 'V'));
  auto wo = params.view(head_region_name(h.layer, h.head, 'O'));
  Tensor out = Tensor::zeros({d, d});
  // Wv (d x dh) Wo (dh x d): reads the residual, writes the residual.
  mm(wv.data(), wo.data(), out.data.data(), d, dh, d);
  return out;
}

namespace {

double frob(const Tensor& t) { return norm2(t.data.data(), t.size()); }

double composition_ratio(const Tensor& m, const Tensor& wov1) {
  const std::size_t d = m.rows();
  Tensor prod = Tensor::zeros({d, d});
  mm(m.data.data(), wov1.data.data(), prod.data.data(), d, d, d);
  double denom = frob(m) * frob(wov1);
  if (denom == 0.0) return 0.0;
  return frob(prod) / denom;
}

}  // namespace

CompositionScores composition_scores_raw(const Tensor& wqk2, const Tensor& wov2,
                                         const Tensor& wov1) {
  CompositionScores s;
  const std::size_t d = wqk2.rows();
  if (frob(wov1) == 0.0 || frob(wqk2) == 0.0 || frob(wov2) == 0.0) s.degenerate = true;
  Tensor wqk2_t = Tensor::zeros({d, d});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) wqk2_t(i, j) = wqk2(j, i);
  s.q = composition_ratio(wqk2_t, wov1);
  s.k = composition_ratio(wqk2, wov1);
  s.v = composition_ratio(wov2, wov1);
  return s;
}

CompositionScores composition_scores(const ModelConfig& cfg, const ParameterStore& params,
                                     HeadKey h1, HeadKey h2) {
  if (h1.layer != 0 || h2.layer != 1)
    throw std::invalid_argument("composition_scores: h1 must be layer 0, h2 layer 1");
  Tensor wov1 = head_wov(cfg, params, h1);
  Tensor wqk2 = head_wqk(cfg, params, h2);
  Tensor wov2 = head_wov(cfg, params, h2);
  return composition_scores_raw(wqk2, wov2, wov1);
}

}  // namespace headlab
