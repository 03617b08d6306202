#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "headlab/hessian.hpp"

using namespace headlab;

namespace {

// Quadratic objective 1/2 w^T A w: the gradient is exactly A w, so the test
// exercises the finite-difference hvp path against a known Hessian.
GradFn quadratic_grad(const std::vector<double>& a, std::size_t d) {
  return [a, d](std::span<const double> w) {
    std::vector<double> g(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) g[i] += a[i * d + j] * w[j];
    return g;
  };
}

std::vector<double> random_symmetric(std::size_t d, std::uint64_t seed,
                                     double diag_lo, double diag_hi, double off_std) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> off(0.0, off_std);
  std::uniform_real_distribution<double> diag(diag_lo, diag_hi);
  std::vector<double> a(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    a[i * d + i] = diag(rng);
    for (std::size_t j = 0; j < i; ++j) {
      double x = off(rng);
      a[i * d + j] = x;
      a[j * d + i] = x;
    }
  }
  return a;
}

// Cyclic Jacobi eigenvalues, the dense reference for power iteration.
std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t d) {
  for (int sweep = 0; sweep < 60; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i + 1; j < d; ++j) off += a[i * d + j] * a[i * d + j];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) {
        double apq = a[p * d + q];
        if (std::abs(apq) < 1e-18) continue;
        double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          double akp = a[k * d + p], akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          double apk = a[p * d + k], aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> eig(d);
  for (std::size_t i = 0; i < d; ++i) eig[i] = a[i * d + i];
  return eig;
}

}  // namespace

TEST_CASE("identity Hessian trace is d") {
  const std::size_t d = 12;
  GradFn g = [](std::span<const double> w) {
    return std::vector<double>(w.begin(), w.end());
  };
  std::vector<double> w(d, 0.3);
  TraceEstimate e = hessian_trace(g, w, WeightMask::all(d), 50, 1);
  // probes on a diagonal matrix have zero variance, so this is exact
  CHECK(e.value == doctest::Approx(double(d)).epsilon(1e-6));
  CHECK_THROWS_AS(hessian_trace(g, w, WeightMask::all(d), 1, 1), std::invalid_argument);
}

TEST_CASE("explicit symmetric oracle: 5% at 1000 probes, contained at 50") {
  const std::size_t d = 50;
  auto a = random_symmetric(d, 7, 1.0, 2.0, 0.25);
  double true_trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) true_trace += a[i * d + i];
  GradFn g = quadratic_grad(a, d);
  std::vector<double> w(d, 0.0);

  TraceEstimate big = hessian_trace(g, w, WeightMask::all(d), 1000, 3);
  CHECK(std::abs(big.value - true_trace) <= 0.05 * std::abs(true_trace));

  // paper-scale probe count: 20 repetitions, each within 3 reported SEs
  int contained = 0;
  double mean = 0.0, se_of_mean = 0.0;
  std::vector<double> reps;
  for (std::uint64_t rep = 0; rep < 20; ++rep) {
    TraceEstimate e = hessian_trace(g, w, WeightMask::all(d), 50, 100 + rep);
    if (std::abs(e.value - true_trace) <= 3.0 * e.std_error) ++contained;
    reps.push_back(e.value);
    mean += e.value;
  }
  mean /= 20.0;
  for (double r : reps) se_of_mean += (r - mean) * (r - mean);
  se_of_mean = std::sqrt(se_of_mean / 19.0 / 20.0);
  CHECK(contained >= 19);
  // unbiasedness: the mean of repetitions is within one SE of the truth
  CHECK(std::abs(mean - true_trace) <= 1.0 * se_of_mean * 3.0);
  CHECK(std::abs(mean - true_trace) <= std::max(se_of_mean, 0.02 * true_trace));
}

TEST_CASE("masked trace equals the sub-block diagonal sum") {
  const std::size_t d = 30;
  auto a = random_symmetric(d, 9, 0.5, 1.5, 0.2);
  GradFn g = quadratic_grad(a, d);
  std::vector<double> w(d, 0.0);
  WeightMask mask;
  for (std::size_t i = 5; i < 17; ++i) mask.included.push_back(i);
  double want = 0.0;
  for (std::size_t i : mask.included) want += a[i * d + i];
  TraceEstimate e = hessian_trace(g, w, mask, 800, 11);
  CHECK(std::abs(e.value - want) <= 0.08 * std::abs(want));
}

TEST_CASE("power iteration finds the dominant |eigenvalue|") {
  SUBCASE("diag(3,1)") {
    std::vector<double> a{3.0, 0.0, 0.0, 1.0};
    GradFn g = quadratic_grad(a, 2);
    std::vector<double> w(2, 0.0);
    CHECK(max_abs_eigenvalue(g, w, WeightMask::all(2), 50, 1) ==
          doctest::Approx(3.0).epsilon(1e-3));
  }
  SUBCASE("negative-dominant diag(-5,1)") {
    std::vector<double> a{-5.0, 0.0, 0.0, 1.0};
    GradFn g = quadratic_grad(a, 2);
    std::vector<double> w(2, 0.0);
    CHECK(max_abs_eigenvalue(g, w, WeightMask::all(2), 60, 1) ==
          doctest::Approx(5.0).epsilon(1e-3));
  }
  SUBCASE("dense d=50 vs the Jacobi reference") {
    const std::size_t d = 50;
    auto a = random_symmetric(d, 13, -1.0, 1.0, 0.6);
    auto eig = jacobi_eigenvalues(a, d);
    double lmax = 0.0;
    for (double e : eig) lmax = std::max(lmax, std::abs(e));
    GradFn g = quadratic_grad(a, d);
    std::vector<double> w(d, 0.0);
    double got = max_abs_eigenvalue(g, w, WeightMask::all(d), 200, 3);
    CHECK(std::abs(got - lmax) <= 0.01 * lmax);
  }
}

TEST_CASE("chebyshev rank counts eigenvalues above the threshold") {
  SUBCASE("gap spectrum diag(10,10,1e-3,1e-3)") {
    std::vector<double> a(16, 0.0);
    a[0] = 10.0;
    a[5] = 10.0;
    a[10] = 1e-3;
    a[15] = 1e-3;
    GradFn g = quadratic_grad(a, 4);
    std::vector<double> w(4, 0.0);
    RankConfig rc;
    rc.range_min = -12;
    rc.range_max = 12;
    rc.threshold = 1.0;
    rc.degree = 100;
    rc.probes = 8;
    RankEstimate e = hessian_rank(g, w, WeightMask::all(4), rc);
    CHECK(std::abs(e.raw - 2.0) <= 0.3);
  }
  SUBCASE("identity d=50") {
    const std::size_t d = 50;
    GradFn g = [](std::span<const double> w) {
      return std::vector<double>(w.begin(), w.end());
    };
    std::vector<double> w(d, 0.0);
    RankConfig rc;
    rc.range_min = -1.2;
    rc.range_max = 1.2;
    rc.threshold = 0.5;
    rc.probes = 4;
    RankEstimate e = hessian_rank(g, w, WeightMask::all(d), rc);
    CHECK(std::abs(e.raw - 50.0) <= 2.5);
  }
  SUBCASE("zero matrix, adaptive range") {
    GradFn g = [](std::span<const double> w) {
      return std::vector<double>(w.size(), 0.0);
    };
    std::vector<double> w(6, 0.0);
    RankConfig rc;
    rc.adaptive = true;
    RankEstimate e = hessian_rank(g, w, WeightMask::all(6), rc);
    CHECK(e.raw == doctest::Approx(0.0));
    CHECK(e.clamped == doctest::Approx(0.0));
  }
  SUBCASE("adaptive method sets range and threshold from |lambda_max|") {
    std::vector<double> a{4.0, 0.0, 0.0, 0.1};
    GradFn g = quadratic_grad(a, 2);
    std::vector<double> w(2, 0.0);
    RankConfig rc;
    rc.adaptive = true;
    rc.probes = 4;
    RankEstimate e = hessian_rank(g, w, WeightMask::all(2), rc);
    CHECK(e.lambda_max == doctest::Approx(4.0).epsilon(1e-2));
    CHECK(e.threshold == doctest::Approx(0.28).epsilon(0.05));
    CHECK(std::abs(e.raw - 1.0) <= 0.3);  // only the 4.0 eigenvalue clears 0.07|l|
  }
  SUBCASE("spectrum outside the range is reported, advising expansion") {
    std::vector<double> a{100.0, 0.0, 0.0, 1.0};
    GradFn g = quadratic_grad(a, 2);
    std::vector<double> w(2, 0.0);
    RankConfig rc;
    rc.range_min = -1.0;
    rc.range_max = 1.0;
    rc.threshold = 0.5;
    CHECK_THROWS_WITH_AS(hessian_rank(g, w, WeightMask::all(2), rc),
                         doctest::Contains("range"), std::runtime_error);
  }
}

TEST_CASE("jackson-damped step polynomial stays within [-0.1, 1.1]") {
  const double a = -12, b = 12, thr = 1.0;
  const int degree = 100;
  double lo = 1e300, hi = -1e300;
  for (int i = 0; i < 10000; ++i) {
    double x = a + (b - a) * i / 9999.0;
    double p = chebyshev_step_value(x, a, b, thr, degree);
    lo = std::min(lo, p);
    hi = std::max(hi, p);
  }
  CHECK(lo >= -0.1);
  CHECK(hi <= 1.1);
  // and it is a step: near 0 below, near 1 above
  CHECK(chebyshev_step_value(-6.0, a, b, thr, degree) == doctest::Approx(0.0).epsilon(0.02));
  CHECK(chebyshev_step_value(8.0, a, b, thr, degree) == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("fim trace is reproducible and close to the self-data Hessian trace") {
  // Tiny zero-layer model: embed one-hot, unembed a mild bigram table.
  ModelConfig cfg;
  cfg.vocab_size = 8;
  cfg.context_length = 8;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.layer_norm = false;
  ParameterStore p(cfg);
  auto embed = p.view("embed");
  for (std::size_t t = 0; t < 8; ++t) embed[t * 8 + t] = 1.0;
  auto unembed = p.view("unembed");
  std::mt19937_64 rng(5);
  for (std::size_t i = 0; i < unembed.size(); ++i)
    unembed[i] = 0.3 * std::normal_distribution<double>(0, 1)(rng);
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.params = p;

  TraceConfig tc;
  tc.samples = 30;
  tc.probes = 5;
  TraceEstimate a1 = fim_trace(ckpt, tc, 11);
  TraceEstimate a2 = fim_trace(ckpt, tc, 11);
  CHECK(a1.value == a2.value);  // fixed seed reproducibility
}
