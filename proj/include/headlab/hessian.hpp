#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "headlab/hvp.hpp"
#include "headlab/llc.hpp"
#include "headlab/model.hpp"

namespace headlab {

struct TraceConfig {
  int samples = 100;  // dataset sequences behind the loss
  int probes = 50;    // Rademacher probe vectors
  std::uint64_t seed = 0;
};

struct RankConfig {
  int degree = 100;
  double range_min = -1000.0;
  double range_max = 6000.0;
  double threshold = 500.0;
  bool adaptive = false;  // range +-1.2|lmax|, threshold 0.07|lmax|
  int probes = 1;
  int power_iterations = 50;
  std::uint64_t seed = 0;
};

struct TraceEstimate {
  double value = 0.0;
  double std_error = 0.0;
  int probes = 0;
};

// Hutchinson estimate of Tr(H) restricted to the mask: probes are Rademacher
// on masked coordinates, zero elsewhere, and H v runs through hvp.
TraceEstimate hessian_trace(const GradFn& grad, std::span<const double> w,
                            const WeightMask& mask, int probes, std::uint64_t seed);

// Power iteration on H via hvp; returns |Rayleigh quotient| at the end.
double max_abs_eigenvalue(const GradFn& grad, std::span<const double> w,
                          const WeightMask& mask, int iterations, std::uint64_t seed);

struct RankEstimate {
  double raw = 0.0;
  double clamped = 0.0;
  double std_error = 0.0;
  double lambda_max = 0.0;  // nonzero when adaptive
  double range_min = 0.0, range_max = 0.0, threshold = 0.0;
};

// Chebyshev step-function filtering of the spectrum (Jackson-damped),
// counting eigenvalues above the threshold with Hutchinson probes.
RankEstimate hessian_rank(const GradFn& grad, std::span<const double> w,
                          const WeightMask& mask, const RankConfig& cfg);

// Jackson-damped Chebyshev approximation of the unit step at `threshold` on
// [a, b], evaluated at x. Exposed for the polynomial sanity checks.
double chebyshev_step_value(double x, double a, double b, double threshold, int degree);

// -- model adapters -----------------------------------------------------------

// Gradient of the empirical loss on a fixed batch, as a function of the flat
// weight vector.
GradFn batch_grad_fn(const ModelConfig& cfg, const ParameterStore& tmpl,
                     const TokenBatch& batch);

TraceEstimate hessian_trace(const Checkpoint& ckpt, const WeightMask& mask,
                            const DataSource& data, const TraceConfig& cfg);

// Appendix-style FIM trace: Hessian trace of the empirical loss on a batch
// the model generated itself (30 sequences, 5 probes by default).
TraceEstimate fim_trace(const Checkpoint& ckpt, const TraceConfig& cfg,
                        std::uint64_t seed);

}  // namespace headlab
