#include "headlab/hessian.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace headlab {

namespace {

std::vector<double> rademacher_on_mask(std::size_t dim, const WeightMask& mask,
                                       std::mt19937_64& rng) {
  std::vector<double> v(dim, 0.0);
  for (std::size_t i : mask.included) v[i] = (rng() & 1) ? 1.0 : -1.0;
  return v;
}

}  // namespace

TraceEstimate hessian_trace(const GradFn& grad, std::span<const double> w,
                            const WeightMask& mask, int probes, std::uint64_t seed) {
  if (probes < 2) throw std::invalid_argument("hessian_trace: need >= 2 probes");
  if (mask.empty()) throw std::invalid_argument("hessian_trace: empty mask");
  std::mt19937_64 rng(mix_seed(seed, 0xace));
  double sum = 0.0, sumsq = 0.0;
  for (int p = 0; p < probes; ++p) {
    std::vector<double> v = rademacher_on_mask(w.size(), mask, rng);
    std::vector<double> hv = hvp(grad, w, v);
    double q = 0.0;
    for (std::size_t i : mask.included) q += v[i] * hv[i];
    sum += q;
    sumsq += q * q;
  }
  TraceEstimate est;
  est.probes = probes;
  est.value = sum / probes;
  double var = (sumsq - sum * sum / probes) / (probes - 1);
  est.std_error = std::sqrt(std::max(0.0, var) / probes);
  return est;
}

double max_abs_eigenvalue(const GradFn& grad, std::span<const double> w,
                          const WeightMask& mask, int iterations, std::uint64_t seed) {
  if (iterations < 1) throw std::invalid_argument("max_abs_eigenvalue: iterations >= 1");
  if (mask.empty()) throw std::invalid_argument("max_abs_eigenvalue: empty mask");
  std::mt19937_64 rng(mix_seed(seed, 0xe16));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(w.size(), 0.0);
  for (std::size_t i : mask.included) v[i] = normal(rng);
  double vn = norm2(v.data(), v.size());
  if (vn == 0.0) return 0.0;
  for (auto& x : v) x /= vn;

  double rayleigh = 0.0;
  for (int it = 0; it < iterations; ++it) {
    std::vector<double> hv = hvp(grad, w, v);
    std::vector<double> phv(hv.size(), 0.0);
    for (std::size_t i : mask.included) phv[i] = hv[i];
    double num = 0.0;
    for (std::size_t i : mask.included) num += v[i] * phv[i];
    rayleigh = num;  // v is unit
    double n = norm2(phv.data(), phv.size());
    if (n == 0.0) return 0.0;
    for (std::size_t i = 0; i < phv.size(); ++i) v[i] = phv[i] / n;
  }
  return std::abs(rayleigh);
}

namespace {

struct ChebCoeffs {
  std::vector<double> c;  // Jackson-damped coefficients, c[0..degree]
};

ChebCoeffs step_coeffs(double a, double b, double threshold, int degree) {
  if (!(a < threshold && threshold < b))
    throw std::invalid_argument("hessian_rank: need range_min < threshold < range_max");
  if (degree < 2) throw std::invalid_argument("hessian_rank: degree >= 2");
  const double t0 = (2.0 * threshold - (a + b)) / (b - a);
  const double theta0 = std::acos(std::clamp(t0, -1.0, 1.0));
  ChebCoeffs out;
  out.c.resize(degree + 1);
  out.c[0] = theta0 / std::numbers::pi;
  for (int k = 1; k <= degree; ++k)
    out.c[k] = 2.0 / (k * std::numbers::pi) * std::sin(k * theta0);
  // Jackson damping suppresses the Gibbs overshoot near the step.
  const int np = degree + 1;
  const double alpha = std::numbers::pi / np;
  for (int k = 0; k <= degree; ++k) {
    double g = ((np - k) * std::cos(k * alpha) + std::sin(k * alpha) / std::tan(alpha)) / np;
    out.c[k] *= g;
  }
  return out;
}

}  // namespace

double chebyshev_step_value(double x, double a, double b, double threshold, int degree) {
  ChebCoeffs cc = step_coeffs(a, b, threshold, degree);
  const double xt = (2.0 * x - (a + b)) / (b - a);
  double tkm1 = 1.0, tk = xt, acc = cc.c[0] * 1.0;
  if (degree >= 1) acc += cc.c[1] * xt;
  for (int k = 2; k <= degree; ++k) {
    double tkp1 = 2.0 * xt * tk - tkm1;
    acc += cc.c[k] * tkp1;
    tkm1 = tk;
    tk = tkp1;
  }
  return acc;
}

RankEstimate hessian_rank(const GradFn& grad, std::span<const double> w,
                          const WeightMask& mask, const RankConfig& cfg) {
  RankEstimate est;
  double a = cfg.range_min, b = cfg.range_max, thr = cfg.threshold;
  if (cfg.adaptive) {
    double lmax = max_abs_eigenvalue(grad, w, mask, cfg.power_iterations,
                                     mix_seed(cfg.seed, 0x9a9));
    est.lambda_max = lmax;
    if (lmax <= 0.0) {
      est.range_min = est.range_max = est.threshold = 0.0;
      return est;  // zero spectrum
    }
    a = -1.2 * lmax;
    b = 1.2 * lmax;
    thr = 0.07 * lmax;
  }
  est.range_min = a;
  est.range_max = b;
  est.threshold = thr;
  ChebCoeffs cc = step_coeffs(a, b, thr, cfg.degree);
  const double scale = 2.0 / (b - a);
  const double shift = (a + b) / (b - a);

  std::mt19937_64 rng(mix_seed(cfg.seed, 0xc4e));
  const int probes = std::max(1, cfg.probes);
  double sum = 0.0, sumsq = 0.0;
  const auto range_error = [&] {
    return std::runtime_error(
        "hessian_rank: Chebyshev recurrence exploded; spectrum likely outside [" +
        std::to_string(a) + ", " + std::to_string(b) +
        "], expand the approximation range");
  };
  for (int p = 0; p < probes; ++p) {
    std::vector<double> v = rademacher_on_mask(w.size(), mask, rng);
    // Clenshaw recurrence: b_k = c_k v + 2 Ht b_{k+1} - b_{k+2}
    std::vector<double> bk1(w.size(), 0.0), bk2(w.size(), 0.0);
    auto apply_ht = [&](const std::vector<double>& x) {
      std::vector<double> hx = hvp(grad, w, x);
      for (std::size_t i = 0; i < hx.size(); ++i) hx[i] = scale * hx[i] - shift * x[i];
      // Project back onto the mask so the operator stays restricted.
      std::vector<double> px(x.size(), 0.0);
      for (std::size_t i : mask.included) px[i] = hx[i];
      return px;
    };
    std::vector<double> pv;
    try {
      for (int k = cfg.degree; k >= 1; --k) {
        std::vector<double> bk = apply_ht(bk1);
        double nb = 0.0;
        for (std::size_t i = 0; i < bk.size(); ++i) {
          bk[i] = cc.c[k] * v[i] + 2.0 * bk[i] - bk2[i];
          nb = std::max(nb, std::abs(bk[i]));
        }
        if (!std::isfinite(nb) || nb > 1e100) throw range_error();
        bk2 = std::move(bk1);
        bk1 = std::move(bk);
      }
      // p(Ht) v = c_0 v + Ht b_1 - b_2
      pv = apply_ht(bk1);
      for (std::size_t i = 0; i < pv.size(); ++i)
        pv[i] = cc.c[0] * v[i] + pv[i] - bk2[i];
    } catch (const std::runtime_error&) {
      throw range_error();
    }
    double q = 0.0;
    for (std::size_t i : mask.included) q += v[i] * pv[i];
    sum += q;
    sumsq += q * q;
  }
  est.raw = sum / probes;
  if (probes > 1) {
    double var = (sumsq - sum * sum / probes) / (probes - 1);
    est.std_error = std::sqrt(std::max(0.0, var) / probes);
  }
  const double dim = static_cast<double>(mask.included.size());
  if (!std::isfinite(est.raw) || std::abs(est.raw) > 1.5 * dim + 10.0)
    throw std::runtime_error(
        "hessian_rank: estimate " + std::to_string(est.raw) +
        " exceeds the dimension bound; spectrum likely outside [range_min, range_max], "
        "expand the approximation range");
  est.clamped = std::clamp(est.raw, 0.0, dim);
  return est;
}

// -- model adapters -------------------------------------------------------------

GradFn batch_grad_fn(const ModelConfig& cfg, const ParameterStore& tmpl,
                     const TokenBatch& batch) {
  auto tp = std::make_shared<ParameterStore>(tmpl);
  auto bp = std::make_shared<TokenBatch>(batch);
  ModelConfig mc = cfg;
  return [tp, bp, mc](std::span<const double> w) {
    ParameterStore p = *tp;
    std::copy(w.begin(), w.end(), p.flat().begin());
    return empirical_loss_and_grad(mc, p, *bp).grad;
  };
}

TraceEstimate hessian_trace(const Checkpoint& ckpt, const WeightMask& mask,
                            const DataSource& data, const TraceConfig& cfg) {
  TokenBatch batch = data.sample_batch(static_cast<std::size_t>(cfg.samples),
                                       mix_seed(cfg.seed, 0x7ace));
  GradFn g = batch_grad_fn(ckpt.config, ckpt.params, batch);
  return hessian_trace(g, ckpt.params.flat(), mask, cfg.probes, cfg.seed);
}

TraceEstimate fim_trace(const Checkpoint& ckpt, const TraceConfig& cfg,
                        std::uint64_t seed) {
  DataSource self = model_generator_source(ckpt, seed);
  TokenBatch batch =
      self.sample_batch(static_cast<std::size_t>(cfg.samples), 0);
  GradFn g = batch_grad_fn(ckpt.config, ckpt.params, batch);
  WeightMask mask = WeightMask::all(ckpt.params.size());
  return hessian_trace(g, ckpt.params.flat(), mask, cfg.probes, mix_seed(seed, 1));
}

}  // namespace headlab
