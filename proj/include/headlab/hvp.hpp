#pragma once

#include <functional>
#include <span>
#include <vector>

namespace headlab {

// Gradient of a scalar objective at a flat parameter vector.
using GradFn = std::function<std::vector<double>(std::span<const double>)>;
using LossFn = std::function<double(std::span<const double>)>;

// Hessian-vector product by central differencing of gradients:
// (g(w + h v) - g(w - h v)) / (2 h) with h = 1e-4 / max(1, ||v||).
std::vector<double> hvp(const GradFn& grad, std::span<const double> w,
                        std::span<const double> v);

}  // namespace headlab
