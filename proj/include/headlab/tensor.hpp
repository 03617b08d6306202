#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

namespace headlab {

// Dense row-major tensor of doubles. Rank 1 and 2 cover everything the
// model needs; higher ranks are not supported.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vec(std::vector<double> d) {
    std::size_t n = d.size();
    return Tensor({n}, std::move(d));
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape[1] : size(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;
};

// c = a (m x k) * b (k x n). Accumulating ikj kernel, c may hold garbage.
void mm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
        std::size_t n);
// c = a (m x k) * b^T where b is (n x k).
void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n);
// c = a^T (k x m stored) * b (k x n), result (m x n).
void mm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n);
// c += a * b etc. for gradient accumulation.
void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n);
void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n);
void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n);

double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);  // y += alpha*x
double norm2(const double* x, std::size_t n);

}  // namespace headlab
