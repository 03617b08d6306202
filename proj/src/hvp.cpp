#include "headlab/hvp.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "headlab/tensor.hpp"

namespace headlab {

std::vector<double> hvp(const GradFn& grad, std::span<const double> w,
                        std::span<const double> v) {
  if (w.size() != v.size())
    throw std::invalid_argument("hvp: |v| = " + std::to_string(v.size()) +
                                " but |w| = " + std::to_string(w.size()));
  const double h = 1e-4 / std::max(1.0, norm2(v.data(), v.size()));
  std::vector<double> wp(w.begin(), w.end());
  std::vector<double> wm(w.begin(), w.end());
  for (std::size_t i = 0; i < w.size(); ++i) {
    wp[i] += h * v[i];
    wm[i] -= h * v[i];
  }
  std::vector<double> gp = grad(wp);
  std::vector<double> gm = grad(wm);
  std::vector<double> out(w.size());
  const double inv = 1.0 / (2.0 * h);
  for (std::size_t i = 0; i < w.size(); ++i) {
    out[i] = (gp[i] - gm[i]) * inv;
    if (!std::isfinite(out[i]))
      throw std::runtime_error("hvp: non-finite result at index " + std::to_string(i));
  }
  return out;
}

}  // namespace headlab
