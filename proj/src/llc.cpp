#include "headlab/llc.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace headlab {

using nlohmann::json;

json SgldConfig::to_json() const {
  return {{"step_size", step_size}, {"nbeta", nbeta},       {"gamma", gamma},
          {"chains", chains},       {"draws", draws},       {"burn_in", burn_in},
          {"minibatch", minibatch}, {"eval_tokens", eval_tokens}, {"seed", seed}};
}

SgldConfig SgldConfig::from_json(const json& j) {
  SgldConfig c;
  c.step_size = j.value("step_size", c.step_size);
  c.nbeta = j.value("nbeta", c.nbeta);
  c.gamma = j.value("gamma", c.gamma);
  c.chains = j.value("chains", c.chains);
  c.draws = j.value("draws", c.draws);
  c.burn_in = j.value("burn_in", c.burn_in);
  c.minibatch = j.value("minibatch", c.minibatch);
  c.eval_tokens = j.value("eval_tokens", c.eval_tokens);
  c.seed = j.value("seed", c.seed);
  if (c.step_size <= 0 || c.nbeta <= 0 || c.gamma < 0)
    throw std::invalid_argument("sgld: step_size/nbeta must be positive, gamma >= 0");
  if (c.chains < 1 || c.draws < 1 || c.burn_in < 0 || c.burn_in >= c.draws)
    throw std::invalid_argument("sgld: bad chains/draws/burn_in");
  return c;
}

WeightMask WeightMask::all(std::size_t dim) {
  WeightMask m;
  m.included.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) m.included[i] = i;
  return m;
}

WeightMask WeightMask::from_regions(const ParameterStore& params,
                                    const std::vector<std::string>& region_patterns) {
  WeightMask m;
  for (const Region& r : params.regions())
    for (const auto& p : region_patterns)
      if (region_matches(r.name, p)) {
        for (std::size_t i = r.offset; i < r.offset + r.size; ++i)
          m.included.push_back(i);
        break;
      }
  std::sort(m.included.begin(), m.included.end());
  m.included.erase(std::unique(m.included.begin(), m.included.end()), m.included.end());
  return m;
}

ChainTrace sgld_chain(std::span<const double> w_star, const WeightMask& mask,
                      const SgldObjective& objective, const SgldConfig& cfg,
                      int chain_index) {
  if (mask.empty()) throw std::invalid_argument("sgld: empty weight mask");
  if (objective.dim != w_star.size())
    throw std::invalid_argument("sgld: objective dim mismatch");
  for (double x : w_star)
    if (!std::isfinite(x)) throw std::invalid_argument("sgld: w* not finite");

  ChainTrace trace;
  trace.losses.reserve(cfg.draws);
  std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(chain_index)));
  std::normal_distribution<double> noise(0.0, std::sqrt(cfg.step_size));

  std::vector<double> w(w_star.begin(), w_star.end());
  std::vector<double> grad(objective.dim, 0.0);
  const double half_eps = cfg.step_size / 2.0;

  for (int draw = 0; draw < cfg.draws; ++draw) {
    const std::uint64_t draw_index =
        static_cast<std::uint64_t>(chain_index) * static_cast<std::uint64_t>(cfg.draws) +
        static_cast<std::uint64_t>(draw);
    double mb_loss = objective.minibatch(w, draw_index, grad);
    if (!std::isfinite(mb_loss)) {
      trace.ok = false;
      trace.error = "non-finite minibatch loss at draw " + std::to_string(draw);
      return trace;
    }
    for (std::size_t i : mask.included) {
      double drift = cfg.nbeta * grad[i] + cfg.gamma * (w[i] - w_star[i]);
      w[i] += -half_eps * drift + noise(rng);
    }
    double l = objective.eval_loss(w);
    if (!std::isfinite(l)) {
      trace.ok = false;
      trace.error = "non-finite evaluation loss at draw " + std::to_string(draw);
      return trace;
    }
    trace.losses.push_back(l);
  }
  return trace;
}

LlcEstimate estimate_llc(std::span<const double> w_star, const WeightMask& mask,
                         const SgldObjective& objective, const SgldConfig& cfg) {
  LlcEstimate est;
  est.cfg = cfg;
  est.init_loss = objective.eval_loss(w_star);
  if (!std::isfinite(est.init_loss))
    throw std::runtime_error("estimate_llc: non-finite loss at w*");
  for (int c = 0; c < cfg.chains; ++c) {
    ChainTrace t = sgld_chain(w_star, mask, objective, cfg, c);
    if (t.ok) {
      double mean = 0.0;
      for (int d = cfg.burn_in; d < cfg.draws; ++d) mean += t.losses[d];
      mean /= static_cast<double>(cfg.draws - cfg.burn_in);
      est.per_chain.push_back(cfg.nbeta * (mean - est.init_loss));
    } else {
      ++est.failed_chains;
    }
    est.traces.push_back(std::move(t));
  }
  if (est.per_chain.empty())
    throw std::runtime_error("estimate_llc: all " + std::to_string(cfg.chains) +
                             " chains failed: " + est.traces.front().error);
  double sum = 0.0;
  for (double l : est.per_chain) sum += l;
  est.lambda_hat = sum / static_cast<double>(est.per_chain.size());
  return est;
}

json LlcEstimate::to_json(bool include_traces) const {
  json j;
  j["lambda_hat"] = lambda_hat;
  j["init_loss"] = init_loss;
  j["per_chain"] = per_chain;
  j["failed_chains"] = failed_chains;
  j["chains_ok"] = static_cast<int>(per_chain.size());
  j["sgld"] = cfg.to_json();
  if (include_traces) {
    json traces_json = json::array();
    for (const ChainTrace& t : traces) {
      traces_json.push_back(
          {{"ok", t.ok}, {"error", t.error}, {"losses", t.losses}});
    }
    j["traces"] = traces_json;
  }
  return j;
}

namespace {

// Reference next-token rows (positions 0..len-2) for one sequence.
Tensor reference_rows(const Checkpoint& ref, std::span<const TokenId> toks) {
  EvalHooks keep;
  keep.keep_probs = true;
  SeqEval e = eval_sequence(ref.config, ref.params, toks, keep);
  const std::size_t len = toks.size(), v = ref.config.vocab_size;
  Tensor rows = Tensor::zeros({len - 1, v});
  std::copy(e.probs.data.begin(), e.probs.data.begin() + (len - 1) * v,
            rows.data.begin());
  return rows;
}

}  // namespace

SgldObjective transformer_objective(const ModelConfig& cfg, const ParameterStore& at,
                                    const DataSource& source, const SgldConfig& sgld,
                                    std::uint64_t cell_salt) {
  SgldObjective obj;
  obj.dim = at.size();
  const std::size_t k = source.context_length();
  const std::size_t n_eval = std::max<std::size_t>(1, sgld.eval_tokens / k);
  const std::uint64_t base_index = cell_salt << 20;
  auto eval_batch = std::make_shared<TokenBatch>(source.sample_batch(n_eval, base_index));
  auto tmpl = std::make_shared<ParameterStore>(at);
  const std::size_t m = std::max<std::size_t>(1, sgld.minibatch);
  const ModelConfig mc = cfg;
  const DataSource src = source;

  obj.minibatch = [tmpl, mc, src, m, base_index](std::span<const double> w,
                                                 std::uint64_t draw,
                                                 std::vector<double>& grad) {
    ParameterStore p = *tmpl;
    std::copy(w.begin(), w.end(), p.flat().begin());
    TokenBatch batch = src.sample_batch(m, base_index + 1 + draw);
    BatchGrad bg = empirical_loss_and_grad(mc, p, batch);
    grad = std::move(bg.grad);
    return bg.loss;
  };
  obj.eval_loss = [tmpl, mc, eval_batch](std::span<const double> w) {
    ParameterStore p = *tmpl;
    std::copy(w.begin(), w.end(), p.flat().begin());
    return empirical_loss(mc, p, *eval_batch);
  };
  return obj;
}

SgldObjective transformer_kl_objective(const ModelConfig& cfg, const ParameterStore& at,
                                       const Checkpoint& reference,
                                       const DataSource& source, const SgldConfig& sgld,
                                       std::uint64_t cell_salt) {
  if (reference.config.vocab_size != cfg.vocab_size)
    throw std::invalid_argument("kl objective: vocab mismatch");
  SgldObjective obj;
  obj.dim = at.size();
  const std::size_t k = source.context_length();
  const std::size_t n_eval = std::max<std::size_t>(1, sgld.eval_tokens / k);
  const std::uint64_t base_index = cell_salt << 20;
  auto eval_batch = std::make_shared<TokenBatch>(source.sample_batch(n_eval, base_index));
  auto tmpl = std::make_shared<ParameterStore>(at);
  auto ref = std::make_shared<Checkpoint>(reference);
  const std::size_t m = std::max<std::size_t>(1, sgld.minibatch);
  const ModelConfig mc = cfg;
  const DataSource src = source;

  auto batch_kl_grad = [tmpl, mc, ref](std::span<const double> wp,
                                       const TokenBatch& batch,
                                       std::vector<double>* grad_out) {
    ParameterStore p = *tmpl;
    std::copy(wp.begin(), wp.end(), p.flat().begin());
    double loss = 0.0;
    if (grad_out) grad_out->assign(p.size(), 0.0);
    for (std::size_t i = 0; i < batch.n; ++i) {
      std::span<const TokenId> toks{batch.seq(i), batch.length};
      Tensor rows = reference_rows(*ref, toks);
      Tape tape;
      TapedModel m2 = bind_model(tape, mc, p);
      Var l = model_sequence_kl_loss(m2, toks, rows);
      loss += tape.value(l)[0];
      if (grad_out) {
        tape.backward(l);
        std::vector<double> g = collect_gradient(m2, p);
        axpy(1.0, g.data(), grad_out->data(), g.size());
      }
    }
    const double inv = 1.0 / static_cast<double>(batch.n);
    if (grad_out)
      for (double& g : *grad_out) g *= inv;
    return loss * inv;
  };

  obj.minibatch = [batch_kl_grad, src, m, base_index](std::span<const double> w,
                                                      std::uint64_t draw,
                                                      std::vector<double>& grad) {
    TokenBatch batch = src.sample_batch(m, base_index + 1 + draw);
    return batch_kl_grad(w, batch, &grad);
  };
  obj.eval_loss = [batch_kl_grad, eval_batch](std::span<const double> w) {
    return batch_kl_grad(w, *eval_batch, nullptr);
  };
  return obj;
}

}  // namespace headlab
