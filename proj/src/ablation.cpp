#include "headlab/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace headlab {

const char* ablation_kind_name(AblationKind k) {
  switch (k) {
    case AblationKind::zero: return "zero";
    case AblationKind::mean: return "mean";
    case AblationKind::resample: return "resample";
  }
  return "?";
}

namespace {

void check_heads(const ModelConfig& cfg, const std::vector<HeadKey>& heads) {
  for (const HeadKey& h : heads)
    if (h.layer < 0 || h.layer >= static_cast<int>(ModelConfig::n_layers) ||
        h.head < 0 || h.head >= static_cast<int>(cfg.n_heads))
      throw std::invalid_argument("ablation: head (" + std::to_string(h.layer) + "," +
                                  std::to_string(h.head) + ") not in config");
}

double batch_loss(const ModelConfig& cfg, const ParameterStore& params,
                  const TokenBatch& batch,
                  const std::vector<std::map<HeadKey, Tensor>>* replace_per_seq) {
  double total = 0.0;
  for (std::size_t i = 0; i < batch.n; ++i) {
    EvalHooks hooks;
    if (replace_per_seq) hooks.replace = &(*replace_per_seq)[i];
    total += eval_sequence(cfg, params, {batch.seq(i), batch.length}, hooks).mean_loss;
  }
  return total / static_cast<double>(batch.n);
}

}  // namespace

std::map<HeadKey, Tensor> head_output_means(const ModelConfig& cfg,
                                            const ParameterStore& params,
                                            const std::vector<HeadKey>& heads,
                                            const DataSource& data, std::size_t n,
                                            std::uint64_t batch_index) {
  check_heads(cfg, heads);
  TokenBatch batch = data.sample_batch(n, batch_index);
  std::map<HeadKey, Tensor> sums;
  for (const HeadKey& h : heads)
    sums[h] = Tensor::zeros({batch.length, cfg.d_model});
  EvalHooks hooks;
  hooks.capture_head_out = true;
  for (std::size_t i = 0; i < batch.n; ++i) {
    SeqEval e = eval_sequence(cfg, params, {batch.seq(i), batch.length}, hooks);
    for (const HeadKey& h : heads) {
      const Tensor& out = e.head_out.at(h);
      Tensor& s = sums[h];
      for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < cfg.d_model; ++c) s(r, c) += out(r, c);
    }
  }
  // Per-position mean across the batch; mean of a single sequence is the
  // sequence's own activations.
  const double inv = 1.0 / static_cast<double>(batch.n);
  for (auto& [h, t] : sums)
    for (double& x : t.data) x *= inv;
  return sums;
}

namespace {

// Per-sequence replacement maps realizing one AblationSpec on one batch.
std::vector<std::map<HeadKey, Tensor>> build_replacements(const Checkpoint& ckpt,
                                                          const AblationSpec& spec,
                                                          const TokenBatch& batch) {
  const ModelConfig& cfg = ckpt.config;
  check_heads(cfg, spec.targets);
  std::vector<std::map<HeadKey, Tensor>> reps(batch.n);
  if (spec.targets.empty()) return reps;

  switch (spec.kind) {
    case AblationKind::zero: {
      Tensor zero = Tensor::zeros({1, cfg.d_model});
      for (auto& m : reps)
        for (const HeadKey& h : spec.targets) m[h] = zero;
      break;
    }
    case AblationKind::mean: {
      if (!spec.stats_data)
        throw std::invalid_argument("ablation: mean kind requires a statistics batch");
      auto means = head_output_means(cfg, ckpt.params, spec.targets, *spec.stats_data,
                                     spec.stats_size, spec.stats_batch_index);
      for (auto& m : reps)
        for (const HeadKey& h : spec.targets) m[h] = means.at(h);
      break;
    }
    case AblationKind::resample: {
      if (batch.n < 2)
        throw std::invalid_argument(
            "ablation: resample needs batch size >= 2 to roll activations");
      EvalHooks cap;
      cap.capture_head_out = true;
      std::vector<std::map<HeadKey, Tensor>> clean(batch.n);
      for (std::size_t i = 0; i < batch.n; ++i) {
        SeqEval e = eval_sequence(cfg, ckpt.params, {batch.seq(i), batch.length}, cap);
        for (const HeadKey& h : spec.targets) clean[i][h] = std::move(e.head_out.at(h));
      }
      const std::size_t off =
          static_cast<std::size_t>(((spec.roll_offset % static_cast<int>(batch.n)) +
                                    static_cast<int>(batch.n)) %
                                   static_cast<int>(batch.n));
      for (std::size_t i = 0; i < batch.n; ++i) {
        std::size_t from = (i + batch.n - off) % batch.n;
        for (const HeadKey& h : spec.targets) reps[i][h] = clean[from].at(h);
      }
      break;
    }
  }
  return reps;
}

}  // namespace

double ablation_score(const Checkpoint& ckpt, const AblationSpec& spec,
                      const DataSource& eval_data, std::size_t n,
                      std::uint64_t batch_index) {
  TokenBatch batch = eval_data.sample_batch(n, batch_index);
  double clean = batch_loss(ckpt.config, ckpt.params, batch, nullptr);
  auto reps = build_replacements(ckpt, spec, batch);
  double ablated = batch_loss(ckpt.config, ckpt.params, batch, &reps);
  return ablated - clean;
}

std::vector<TokenInContext> tokens_in_context(const Checkpoint& ckpt, HeadKey head,
                                              const DataSource& corpus,
                                              std::size_t pool_positions,
                                              std::size_t top_k,
                                              std::uint64_t batch_index) {
  const ModelConfig& cfg = ckpt.config;
  check_heads(cfg, {head});
  const std::size_t per_seq = corpus.context_length() - 1;
  if (pool_positions < top_k)
    throw std::invalid_argument("tokens_in_context: pool must be >= top_k");
  const std::size_t n = (pool_positions + per_seq - 1) / per_seq;
  TokenBatch batch = corpus.sample_batch(n, batch_index);

  auto means = head_output_means(cfg, ckpt.params, {head}, corpus, std::max<std::size_t>(n, 8),
                                 batch_index);
  std::vector<TokenInContext> items;
  items.reserve(pool_positions);
  EvalHooks clean_hooks;
  clean_hooks.capture_attention = true;
  std::map<HeadKey, Tensor> rep{{head, means.at(head)}};
  EvalHooks abl_hooks;
  abl_hooks.replace = &rep;
  std::size_t produced = 0;
  for (std::size_t i = 0; i < batch.n && produced < pool_positions; ++i) {
    std::span<const TokenId> toks{batch.seq(i), batch.length};
    SeqEval clean = eval_sequence(cfg, ckpt.params, toks, clean_hooks);
    SeqEval abl = eval_sequence(cfg, ckpt.params, toks, abl_hooks);
    const Tensor& attn = clean.attention.at(head);
    for (std::size_t p = 1; p < batch.length && produced < pool_positions; ++p) {
      TokenInContext item;
      item.seq = i;
      item.pos = p;
      item.token = toks[p];
      item.loss_delta = abl.token_losses[p - 1] - clean.token_losses[p - 1];
      if (!std::isfinite(item.loss_delta))
        throw std::runtime_error("tokens_in_context: non-finite loss delta");
      const std::size_t qpos = p - 1;
      const double* arow = attn.data.data() + qpos * attn.cols();
      item.attention_row.assign(arow, arow + qpos + 1);
      items.push_back(std::move(item));
      ++produced;
    }
  }
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.loss_delta != b.loss_delta) return a.loss_delta > b.loss_delta;
    if (a.seq != b.seq) return a.seq < b.seq;
    return a.pos < b.pos;
  });
  if (items.size() > top_k) items.resize(top_k);
  return items;
}

double path_patch_at(const Checkpoint& ckpt, const std::vector<HeadKey>& sources,
                     HeadKey receiver, const TokenBatch& batch,
                     const std::vector<std::vector<std::size_t>>* positions) {
  const ModelConfig& cfg = ckpt.config;
  check_heads(cfg, sources);
  check_heads(cfg, {receiver});
  for (const HeadKey& s : sources)
    if (s.layer != 0)
      throw std::invalid_argument("path_patch: source heads must be in layer 0");
  if (receiver.layer != 1)
    throw std::invalid_argument("path_patch: receiver must be in layer 1");

  // Per-position mean stats for the sources over the evaluation batch itself.
  std::map<HeadKey, Tensor> source_means;
  if (!sources.empty()) {
    EvalHooks cap;
    cap.capture_head_out = true;
    for (const HeadKey& h : sources)
      source_means[h] = Tensor::zeros({batch.length, cfg.d_model});
    for (std::size_t i = 0; i < batch.n; ++i) {
      SeqEval e = eval_sequence(cfg, ckpt.params, {batch.seq(i), batch.length}, cap);
      for (const HeadKey& h : sources) {
        const Tensor& out = e.head_out.at(h);
        for (std::size_t r = 0; r < out.rows(); ++r)
          for (std::size_t c = 0; c < cfg.d_model; ++c) source_means[h](r, c) += out(r, c);
      }
    }
    const double inv = 1.0 / static_cast<double>(batch.n);
    for (auto& [h, t] : source_means)
      for (double& x : t.data) x *= inv;
  }

  auto mean_at = [&](const std::vector<double>& token_losses, std::size_t i) {
    if (!positions) {
      double s = 0.0;
      for (double l : token_losses) s += l;
      return s / static_cast<double>(token_losses.size());
    }
    const auto& ps = (*positions)[i];
    if (ps.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t p : ps) s += token_losses[p - 1];
    return s / static_cast<double>(ps.size());
  };

  double loss_a = 0.0, loss_c = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < batch.n; ++i) {
    std::span<const TokenId> toks{batch.seq(i), batch.length};
    if (positions && (*positions)[i].empty()) continue;
    ++counted;
    // A: clean
    SeqEval a = eval_sequence(cfg, ckpt.params, toks);
    loss_a += mean_at(a.token_losses, i);
    // B: sources mean-ablated, capture receiver output
    EvalHooks bh;
    bh.capture_head_out = true;
    std::map<HeadKey, Tensor> brep;
    for (const HeadKey& h : sources) brep[h] = source_means.at(h);
    bh.replace = &brep;
    SeqEval b = eval_sequence(cfg, ckpt.params, toks, bh);
    // C: clean run, receiver output patched from B
    std::map<HeadKey, Tensor> crep{{receiver, std::move(b.head_out.at(receiver))}};
    EvalHooks ch;
    ch.replace = &crep;
    SeqEval c = eval_sequence(cfg, ckpt.params, toks, ch);
    loss_c += mean_at(c.token_losses, i);
  }
  if (counted == 0) return 0.0;
  return (loss_c - loss_a) / static_cast<double>(counted);
}

double path_patch(const Checkpoint& ckpt, const std::vector<HeadKey>& sources,
                  HeadKey receiver, const DataSource& eval_data, std::size_t n,
                  std::uint64_t batch_index) {
  TokenBatch batch = eval_data.sample_batch(n, batch_index);
  return path_patch_at(ckpt, sources, receiver, batch, nullptr);
}

double icl_score(const Checkpoint& ckpt, const DataSource& eval_data, std::size_t n,
                 std::size_t early, std::size_t late, std::uint64_t batch_index,
                 const AblationSpec* ablate) {
  const std::size_t k = eval_data.context_length();
  if (late > k)
    throw std::invalid_argument("icl_score: late position " + std::to_string(late) +
                                " exceeds context length " + std::to_string(k));
  if (early < 2 || early > late)
    throw std::invalid_argument("icl_score: need 2 <= early <= late");
  TokenBatch batch = eval_data.sample_batch(n, batch_index);
  std::vector<std::map<HeadKey, Tensor>> reps;
  if (ablate) reps = build_replacements(ckpt, *ablate, batch);
  double acc = 0.0;
  for (std::size_t i = 0; i < batch.n; ++i) {
    EvalHooks hooks;
    if (ablate) hooks.replace = &reps[i];
    SeqEval e = eval_sequence(ckpt.config, ckpt.params, {batch.seq(i), batch.length}, hooks);
    acc += e.token_losses[late - 2] - e.token_losses[early - 2];
  }
  return acc / static_cast<double>(batch.n);
}

}  // namespace headlab
