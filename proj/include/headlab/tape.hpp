#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "headlab/tensor.hpp"

namespace headlab {

// Handle to a value recorded on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Single-use record of one forward pass. Ops append nodes in topological
// order; backward() runs one reverse sweep over that order. A tape is
// confined to one thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable leaf (a parameter block).
  Var leaf(Tensor value);
  // Non-differentiable input (data, masks).
  Var constant(Tensor value);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }

  // -- primitives ----------------------------------------------------------
  Var matmul(Var a, Var b);     // (m x k)(k x n)
  Var matmul_nt(Var a, Var b);  // a * b^T, b stored (n x k)
  Var add(Var a, Var b);        // elementwise, same shape
  Var scale(Var a, double c);
  Var softmax_rows(Var a);                       // stabilized, last axis
  Var layer_norm_rows(Var a, Var gain, Var bias); // per row; eps 1e-5
  Var embedding_gather(Var table, const std::vector<std::uint16_t>& ids);
  Var prefix_rows(Var a, std::size_t n_rows);    // first n rows view-copy
  Var slice_rows(Var a, std::size_t r0, std::size_t r1);  // rows [r0, r1)
  // Per-row -log softmax(logits)[target]; returns vector of losses.
  Var cross_entropy_rows(Var logits, const std::vector<std::uint16_t>& targets);
  // Per-row KL(p || softmax(logits)); p is a constant distribution matrix.
  Var kl_rows(const Tensor& p, Var logits);
  Var mean(Var a);  // scalar mean of all entries

  // Reverse sweep from a scalar. Gradients of all differentiable nodes are
  // populated; leaves not reachable from `loss` keep zero gradients.
  void backward(Var loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&, int)> backward_fn;  // pull from grad[self]
  };

  int push(Tensor value, bool requires_grad, std::function<void(Tape&, int)> fn);
  Tensor& grad_mut(int id) { return nodes_[id].grad; }
  bool needs_grad(Var v) const { return nodes_[v.id].requires_grad; }

  std::vector<Node> nodes_;
};

// Layer-norm epsilon; divide by sqrt(var + kLnEps) so constant rows map to
// zero before the affine gain/bias.
inline constexpr double kLnEps = 1e-5;

}  // namespace headlab
