#include "headlab/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace headlab {

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                              " vs " + b.shape_str());
}

}  // namespace

int Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&, int)> fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.backward_fn = std::move(fn);
  if (requires_grad) n.grad = Tensor::zeros(n.value.shape);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(Tensor value) { return {push(std::move(value), true, nullptr)}; }

Var Tape::constant(Tensor value) { return {push(std::move(value), false, nullptr)}; }

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.cols() != tb.rows()) shape_error("matmul", ta, tb);
  const std::size_t m = ta.rows(), k = ta.cols(), n = tb.cols();
  Tensor out = Tensor::zeros({m, n});
  mm(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
  bool rg = needs_grad(a) || needs_grad(b);
  int id = push(std::move(out), rg, [a, b, m, k, n](Tape& t, int self) {
    const Tensor& g = t.nodes_[self].grad;
    if (t.needs_grad(a))  // dA = dC * B^T
      mm_nt_acc(g.data.data(), t.value(b).data.data(), t.grad_mut(a.id).data.data(), m,
                n, k);
    if (t.needs_grad(b))  // dB = A^T * dC
      mm_tn_acc(t.value(a).data.data(), g.data.data(), t.grad_mut(b.id).data.data(), k,
                m, n);
  });
  return {id};
}

Var Tape::matmul_nt(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (ta.cols() != tb.cols()) shape_error("matmul_nt", ta, tb);
  const std::size_t m = ta.rows(), k = ta.cols(), n = tb.rows();
  Tensor out = Tensor::zeros({m, n});
  mm_nt(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
  bool rg = needs_grad(a) || needs_grad(b);
  int id = push(std::move(out), rg, [a, b, m, k, n](Tape& t, int self) {
    const Tensor& g = t.nodes_[self].grad;
    if (t.needs_grad(a))  // dA = dC * B
      mm_acc(g.data.data(), t.value(b).data.data(), t.grad_mut(a.id).data.data(), m, n,
             k);
    if (t.needs_grad(b))  // dB = dC^T * A
      mm_tn_acc(g.data.data(), t.value(a).data.data(), t.grad_mut(b.id).data.data(), n,
                m, k);
  });
  return {id};
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  if (!ta.same_shape(tb)) shape_error("add", ta, tb);
  Tensor out = ta;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
  bool rg = needs_grad(a) || needs_grad(b);
  int id = push(std::move(out), rg, [a, b](Tape& t, int self) {
    const Tensor& g = t.nodes_[self].grad;
    if (t.needs_grad(a)) axpy(1.0, g.data.data(), t.grad_mut(a.id).data.data(), g.size());
    if (t.needs_grad(b)) axpy(1.0, g.data.data(), t.grad_mut(b.id).data.data(), g.size());
  });
  return {id};
}

Var Tape::scale(Var a, double c) {
  Tensor out = value(a);
  for (auto& x : out.data) x *= c;
  int id = push(std::move(out), needs_grad(a), [a, c](Tape& t, int self) {
    const Tensor& g = t.nodes_[self].grad;
    if (t.needs_grad(a)) axpy(c, g.data.data(), t.grad_mut(a.id).data.data(), g.size());
  });
  return {id};
}

Var Tape::softmax_rows(Var a) {
  const Tensor& ta = value(a);
  const std::size_t r = ta.rows(), c = ta.cols();
  Tensor out = ta;
  for (std::size_t i = 0; i < r; ++i) {
    double* row = out.data.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) row[j] /= z;
  }
  int id = push(std::move(out), needs_grad(a), [a, r, c](Tape& t, int self) {
    if (!t.needs_grad(a)) return;
    const Tensor& g = t.nodes_[self].grad;
    const Tensor& y = t.nodes_[self].value;
    Tensor& da = t.grad_mut(a.id);
    for (std::size_t i = 0; i < r; ++i) {
      const double* grow = g.data.data() + i * c;
      const double* yrow = y.data.data() + i * c;
      double s = dot(grow, yrow, c);
      double* drow = da.data.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) drow[j] += yrow[j] * (grow[j] - s);
    }
  });
  return {id};
}

Var Tape::layer_norm_rows(Var a, Var gain, Var bias) {
  const Tensor& ta = value(a);
  const Tensor& tg = value(gain);
  const Tensor& tb = value(bias);
  const std::size_t r = ta.rows(), c = ta.cols();
  if (tg.size() != c || tb.size() != c) shape_error("layer_norm", ta, tg);
  Tensor out = Tensor::zeros(ta.shape);
  // Cache the normalized rows and inverse std for backward.
  auto xhat = std::make_shared<Tensor>(Tensor::zeros(ta.shape));
  auto istd = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = ta.data.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + kLnEps);
    (*istd)[i] = is;
    double* xh = xhat->data.data() + i * c;
    double* orow = out.data.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      xh[j] = (row[j] - mean) * is;
      orow[j] = xh[j] * tg[j] + tb[j];
    }
  }
  bool rg = needs_grad(a) || needs_grad(gain) || needs_grad(bias);
  int id = push(std::move(out), rg, [a, gain, bias, xhat, istd, r, c](Tape& t, int self) {
    const Tensor& g = t.nodes_[self].grad;
    const Tensor& tg = t.value(gain);
    for (std::size_t i = 0; i < r; ++i) {
      const double* grow = g.data.data() + i * c;
      const double* xh = xhat->data.data() + i * c;
      if (t.needs_grad(gain)) {
        double* dg = t.grad_mut(gain.id).data.data();
        for (std::size_t j = 0; j < c; ++j) dg[j] += grow[j] * xh[j];
      }
      if (t.needs_grad(bias)) {
        double* db = t.grad_mut(bias.id).data.data();
        for (std::size_t j = 0; j < c; ++j) db[j] += grow[j];
      }
      if (t.needs_grad(a)) {
        // dx = istd/c * (c*gy - sum(gy) - xhat * sum(gy*xhat)), gy = g*gain
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          double gy = grow[j] * tg[j];
          s1 += gy;
          s2 += gy * xh[j];
        }
        double* da = t.grad_mut(a.id).data.data() + i * c;
        const double cn = static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
          double gy = grow[j] * tg[j];
          da[j] += (*istd)[i] * (gy - s1 / cn - xh[j] * s2 / cn);
        }
      }
    }
  });
  return {id};
}

Var Tape::embedding_gather(Var table, const std::vector<std::uint16_t>& ids) {
  const Tensor& tt = value(table);
  const std::size_t v = tt.rows(), d = tt.cols(), n = ids.size();
  for (std::size_t i = 0; i < n; ++i)
    if (ids[i] >= v)
      throw std::out_of_range("embedding_gather: token id " + std::to_string(ids[i]) +
                              " at position " + std::to_string(i) + " >= vocab " +
                              std::to_string(v));
  Tensor out = Tensor::zeros({n, d});
  for (std::size_t i = 0; i < n; ++i)
    std::memcpy(out.data.data() + i * d, tt.data.data() + ids[i] * d, d * sizeof(double));
  int id = push(std::move(out), needs_grad(table), [table, ids, d](Tape& t, int self) {
    if (!t.needs_grad(table)) return;
    const Tensor& g = t.nodes_[self].grad;
    Tensor& dt = t.grad_mut(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i)
      axpy(1.0, g.data.data() + i * d, dt.data.data() + ids[i] * d, d);
  });
  return {id};
}

Var Tape::prefix_rows(Var a, std::size_t n_rows) { return slice_rows(a, 0, n_rows); }

Var Tape::slice_rows(Var a, std::size_t r0, std::size_t r1) {
  const Tensor& ta = value(a);
  const std::size_t c = ta.cols();
  if (r1 > ta.rows() || r0 > r1)
    throw std::invalid_argument("slice_rows: [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ") of " + ta.shape_str());
  const std::size_t n_rows = r1 - r0;
  Tensor out({n_rows, c}, std::vector<double>(ta.data.begin() + r0 * c,
                                              ta.data.begin() + r1 * c));
  int id = push(std::move(out), needs_grad(a), [a, r0, n_rows, c](Tape& t, int self) {
    if (!t.needs_grad(a)) return;
    const Tensor& g = t.nodes_[self].grad;
    axpy(1.0, g.data.data(), t.grad_mut(a.id).data.data() + r0 * c, n_rows * c);
  });
  return {id};
}

Var Tape::cross_entropy_rows(Var logits, const std::vector<std::uint16_t>& targets) {
  const Tensor& tl = value(logits);
  const std::size_t r = tl.rows(), c = tl.cols();
  if (targets.size() != r)
    throw std::invalid_argument("cross_entropy_rows: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(r) + " rows");
  Tensor out = Tensor::zeros({r});
  auto probs = std::make_shared<Tensor>(Tensor::zeros({r, c}));
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = tl.data.data() + i * c;
    if (targets[i] >= c)
      throw std::out_of_range("cross_entropy_rows: target " + std::to_string(targets[i]) +
                              " at row " + std::to_string(i));
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    double* prow = probs->data.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      prow[j] = std::exp(row[j] - mx);
      z += prow[j];
    }
    for (std::size_t j = 0; j < c; ++j) prow[j] /= z;
    out[i] = std::log(z) - (row[targets[i]] - mx);
  }
  int id = push(std::move(out), needs_grad(logits),
                [logits, targets, probs, r, c](Tape& t, int self) {
                  if (!t.needs_grad(logits)) return;
                  const Tensor& g = t.nodes_[self].grad;
                  Tensor& dl = t.grad_mut(logits.id);
                  for (std::size_t i = 0; i < r; ++i) {
                    const double gi = g[i];
                    const double* prow = probs->data.data() + i * c;
                    double* drow = dl.data.data() + i * c;
                    for (std::size_t j = 0; j < c; ++j) drow[j] += gi * prow[j];
                    drow[targets[i]] -= gi;
                  }
                });
  return {id};
}

Var Tape::kl_rows(const Tensor& p, Var logits) {
  const Tensor& tl = value(logits);
  const std::size_t r = tl.rows(), c = tl.cols();
  if (!p.same_shape(tl)) shape_error("kl_rows", p, tl);
  Tensor out = Tensor::zeros({r});
  auto probs = std::make_shared<Tensor>(Tensor::zeros({r, c}));
  auto pref = std::make_shared<Tensor>(p);
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = tl.data.data() + i * c;
    const double* prow = p.data.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    double* qrow = probs->data.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      qrow[j] = std::exp(row[j] - mx);
      z += qrow[j];
    }
    double logz = std::log(z);
    double kl = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      qrow[j] /= z;
      if (prow[j] > 0.0) kl += prow[j] * (std::log(prow[j]) - (row[j] - mx - logz));
    }
    out[i] = kl;
  }
  int id = push(std::move(out), needs_grad(logits),
                [logits, probs, pref, r, c](Tape& t, int self) {
                  if (!t.needs_grad(logits)) return;
                  const Tensor& g = t.nodes_[self].grad;
                  Tensor& dl = t.grad_mut(logits.id);
                  for (std::size_t i = 0; i < r; ++i) {
                    const double gi = g[i];
                    const double* qrow = probs->data.data() + i * c;
                    const double* prow = pref->data.data() + i * c;
                    double* drow = dl.data.data() + i * c;
                    // d/dlogits KL(p || softmax) = softmax - p
                    for (std::size_t j = 0; j < c; ++j)
                      drow[j] += gi * (qrow[j] - prow[j]);
                  }
                });
  return {id};
}

Var Tape::mean(Var a) {
  const Tensor& ta = value(a);
  const std::size_t n = ta.size();
  double s = 0.0;
  for (double x : ta.data) s += x;
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  int id = push(std::move(out), needs_grad(a), [a, n](Tape& t, int self) {
    if (!t.needs_grad(a)) return;
    const double g = t.nodes_[self].grad[0] / static_cast<double>(n);
    Tensor& da = t.grad_mut(a.id);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += g;
  });
  return {id};
}

void Tape::backward(Var loss) {
  if (value(loss).size() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                value(loss).shape_str());
  if (!nodes_[loss.id].requires_grad) return;  // constant loss: all grads stay zero
  grad_mut(loss.id)[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.backward_fn && n.requires_grad) n.backward_fn(*this, i);
  }
}

}  // namespace headlab
