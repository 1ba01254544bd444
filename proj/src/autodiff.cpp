#include "dso/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dso/errors.hpp"

namespace dso::ad {

const Tensor& Var::value() const { return graph->value(*this); }
const Tensor& Var::grad() const { return graph->grad(*this); }
double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(v.shape()));
  return v[0];
}

// ---- Graph ----------------------------------------------------------------

Var Graph::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, {}});
  return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}, {}});
  return Var{this, nodes_.size() - 1};
}

Var Graph::emplace(Tensor value, std::vector<Var> parents, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  for (const Var& p : parents) {
    if (p.graph != this) throw std::logic_error("operands belong to different graphs");
    node.parents.push_back(p.id);
    node.requires_grad = node.requires_grad || nodes_[p.id].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

std::span<double> Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return {};
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad.data();
}

const Tensor& Graph::grad(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Graph::zero_grad() {
  for (Node& n : nodes_) n.grad = Tensor();
}

void Graph::backward(Var root) {
  if (root.graph != this) throw std::logic_error("backward root from another graph");
  if (nodes_.at(root.id).value.size() != 1) {
    throw ShapeError("backward root must be a single element, got " +
                     shape_string(nodes_[root.id].value.shape()));
  }
  // Intermediate gradients are per-pass; leaves accumulate across passes.
  for (Node& n : nodes_) {
    if (!n.parents.empty()) n.grad = Tensor();
  }
  auto seed = grad_buffer(root.id);
  if (seed.empty()) return;
  seed[0] += 1.0;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.size() != n.value.size()) continue;
    n.backward(*this, id);
  }
}

// ---- helpers --------------------------------------------------------------

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.same_shape(b), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                               " vs " + shape_string(b.shape()));
}

void require_matrix(const Tensor& a, const char* op) {
  require(a.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
}

// out[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out[m x k] += g[m x n] * b[k x n]^T
void gemm_nt(const double* g, const double* b, double* out, std::size_t m, std::size_t n,
             std::size_t k) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(g, bt.data(), out, m, n, k);
}

// out[k x n] += a[m x k]^T * g[m x n]
void gemm_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Var unary(Var x, Fwd fwd, Deriv deriv) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t xid = x.id;
  return x.graph->emplace(std::move(out), {x}, [xid, deriv](Graph& g, std::size_t self) {
    auto gx = g.grad_buffer(xid);
    if (gx.empty()) return;
    const Tensor& xv = g.node_value(xid);
    const Tensor& yv = g.node_value(self);
    const Tensor& gy = g.node_grad(self);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace

// ---- linear algebra -------------------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  require(bv.rows() == k, "matmul: inner dimensions differ, " + shape_string(av.shape()) + " x " +
                              shape_string(bv.shape()));
  Tensor out({m, n}, 0.0);
  gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  const std::size_t aid = a.id, bid = b.id;
  return a.graph->emplace(std::move(out), {a, b}, [aid, bid, m, k, n](Graph& g, std::size_t self) {
    const Tensor& gy = g.node_grad(self);
    if (auto ga = g.grad_buffer(aid); !ga.empty()) {
      gemm_nt(gy.data().data(), g.node_value(bid).data().data(), ga.data(), m, n, k);
    }
    if (auto gb = g.grad_buffer(bid); !gb.empty()) {
      gemm_tn(g.node_value(aid).data().data(), gy.data().data(), gb.data(), m, k, n);
    }
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_matrix(av, "transpose");
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  const std::size_t aid = a.id;
  return a.graph->emplace(std::move(out), {a}, [aid, m, n](Graph& g, std::size_t self) {
    auto ga = g.grad_buffer(aid);
    if (ga.empty()) return;
    const Tensor& gy = g.node_grad(self);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy.at(j, i);
  });
}

// ---- element-wise ---------------------------------------------------------

Var add(Var a, Var b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.graph->emplace(std::move(out), {a, b}, [aid, bid](Graph& g, std::size_t self) {
    const Tensor& gy = g.node_grad(self);
    for (std::size_t pid : {aid, bid}) {
      auto gp = g.grad_buffer(pid);
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += gy[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.graph->emplace(std::move(out), {a, b}, [aid, bid](Graph& g, std::size_t self) {
    const Tensor& gy = g.node_grad(self);
    auto ga = g.grad_buffer(aid);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
    auto gb = g.grad_buffer(bid);
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
  });
}

Var mul(Var a, Var b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.graph->emplace(std::move(out), {a, b}, [aid, bid](Graph& g, std::size_t self) {
    const Tensor& gy = g.node_grad(self);
    if (auto ga = g.grad_buffer(aid); !ga.empty()) {
      const Tensor& bv = g.node_value(bid);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (auto gb = g.grad_buffer(bid); !gb.empty()) {
      const Tensor& av = g.node_value(aid);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

Var add_row(Var x, Var row) {
  const Tensor& xv = x.value();
  const Tensor& rv = row.value();
  require(rv.size() == xv.cols(), "add_row: row of width " + std::to_string(rv.size()) +
                                      " for matrix " + shape_string(xv.shape()));
  Tensor out = xv;
  const std::size_t m = xv.rows(), n = xv.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += rv[j];
  const std::size_t xid = x.id, rid = row.id;
  return x.graph->emplace(std::move(out), {x, row}, [xid, rid, m, n](Graph& g, std::size_t self) {
    const Tensor& gy = g.node_grad(self);
    auto gx = g.grad_buffer(xid);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    if (auto gr = g.grad_buffer(rid); !gr.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gr[j] += gy[i * n + j];
    }
  });
}

Var scale(Var x, double factor) {
  return unary(x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Var add_scalar(Var x, double c) {
  return unary(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var abs(Var x) {
  return unary(x, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var gelu(Var x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(k * (v + c * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * c * v * v);
      });
}

Var clamp(Var x, double lo, double hi) {
  return unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var minimum(Var a, Var b) {
  require_same(a.value(), b.value(), "minimum");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::min(av[i], bv[i]);
  const std::size_t aid = a.id, bid = b.id;
  return a.graph->emplace(std::move(out), {a, b}, [aid, bid](Graph& g, std::size_t self) {
    const Tensor& gy = g.node_grad(self);
    const Tensor& av = g.node_value(aid);
    const Tensor& bv = g.node_value(bid);
    auto ga = g.grad_buffer(aid);
    auto gb = g.grad_buffer(bid);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (av[i] <= bv[i]) {
        if (!ga.empty()) ga[i] += gy[i];
      } else if (!gb.empty()) {
        gb[i] += gy[i];
      }
    }
  });
}

// ---- reductions -----------------------------------------------------------

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t xid = x.id;
  return x.graph->emplace(Tensor::scalar(s), {x}, [xid](Graph& g, std::size_t self) {
    const double gy = g.node_grad(self)[0];
    for (double& gx : g.grad_buffer(xid)) gx += gy;
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  require(m > 0, "mean_rows: empty input");
  Tensor out({1, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += xv[i * n + j];
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out.data()) v *= inv;
  const std::size_t xid = x.id;
  return x.graph->emplace(std::move(out), {x}, [xid, m, n, inv](Graph& g, std::size_t self) {
    auto gx = g.grad_buffer(xid);
    const Tensor& gy = g.node_grad(self);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += gy[j] * inv;
  });
}

Var pick(Var x, std::size_t index) {
  const Tensor& xv = x.value();
  if (index >= xv.size()) {
    throw IndexError("pick: index " + std::to_string(index) + " out of range for " +
                     shape_string(xv.shape()));
  }
  const std::size_t xid = x.id;
  return x.graph->emplace(Tensor::scalar(xv[index]), {x}, [xid, index](Graph& g, std::size_t self) {
    auto gx = g.grad_buffer(xid);
    gx[index] += g.node_grad(self)[0];
  });
}

Var stack(std::span<const Var> scalars) {
  require(!scalars.empty(), "stack: no inputs");
  Graph* graph = scalars.front().graph;
  std::vector<double> vals;
  std::vector<Var> parents;
  std::vector<std::size_t> ids;
  for (const Var& s : scalars) {
    vals.push_back(s.item());
    parents.push_back(s);
    ids.push_back(s.id);
  }
  return graph->emplace(Tensor::vector(std::move(vals)), std::move(parents),
                        [ids](Graph& g, std::size_t self) {
                          const Tensor& gy = g.node_grad(self);
                          for (std::size_t i = 0; i < ids.size(); ++i) {
                            auto gp = g.grad_buffer(ids[i]);
                            if (!gp.empty()) gp[0] += gy[i];
                          }
                        });
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
  const Tensor& tv = table.value();
  require_matrix(tv, "gather_rows");
  const std::size_t vocab = tv.rows(), d = tv.cols();
  Tensor out({indices.size(), d});
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= vocab) {
      throw IndexError("gather_rows: index " + std::to_string(idx[r]) + " >= " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data().data() + idx[r] * d, d, out.data().data() + r * d);
  }
  const std::size_t tid = table.id;
  return table.graph->emplace(std::move(out), {table}, [tid, idx, d](Graph& g, std::size_t self) {
    auto gt = g.grad_buffer(tid);
    const Tensor& gy = g.node_grad(self);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < d; ++j) gt[idx[r] * d + j] += gy[r * d + j];
  });
}

// ---- softmax family -------------------------------------------------------

Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  const std::size_t xid = x.id;
  return x.graph->emplace(std::move(out), {x}, [xid, m, n](Graph& g, std::size_t self) {
    auto gx = g.grad_buffer(xid);
    const Tensor& y = g.node_value(self);
    const Tensor& gy = g.node_grad(self);
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (gy[i * n + j] - dot);
    }
  });
}

Var log_softmax_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = row[j] - lse;
  }
  const std::size_t xid = x.id;
  return x.graph->emplace(std::move(out), {x}, [xid, m, n](Graph& g, std::size_t self) {
    auto gx = g.grad_buffer(xid);
    const Tensor& y = g.node_value(self);
    const Tensor& gy = g.node_grad(self);
    for (std::size_t i = 0; i < m; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) total += gy[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += gy[i * n + j] - std::exp(y[i * n + j]) * total;
    }
  });
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  const Tensor& lv = logits.value();
  require_matrix(lv, "softmax_cross_entropy");
  const std::size_t m = lv.rows(), k = lv.cols();
  require(labels.size() == m, "softmax_cross_entropy: " + std::to_string(labels.size()) +
                                  " labels for " + std::to_string(m) + " rows");
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  Tensor probs({m, k});
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (lab[i] >= k) {
      throw IndexError("softmax_cross_entropy: label " + std::to_string(lab[i]) +
                       " out of range [0, " + std::to_string(k) + ")");
    }
    const double* row = lv.data().data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (probs[i * k + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] /= z;
    loss += (mx + std::log(z)) - row[lab[i]];
  }
  loss /= static_cast<double>(m);
  const std::size_t lid = logits.id;
  return logits.graph->emplace(
      Tensor::scalar(loss), {logits},
      [lid, lab, probs = std::move(probs), m, k](Graph& g, std::size_t self) {
        auto gl = g.grad_buffer(lid);
        const double gy = g.node_grad(self)[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < k; ++j) {
            const double onehot = (j == lab[i]) ? 1.0 : 0.0;
            gl[i * k + j] += gy * (probs[i * k + j] - onehot);
          }
        }
      });
}

// ---- layer norm -----------------------------------------------------------

Var layer_norm(Var x, Var gain, Var shift, double eps) {
  if (!(eps > 0.0)) throw PreconditionError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  require(gain.value().size() == n && shift.value().size() == n,
          "layer_norm: gain/shift width must equal last dimension " + std::to_string(n));
  const Tensor& gv = gain.value();
  const Tensor& sv = shift.value();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      out[i * n + j] = gv[j] * xhat[i * n + j] + sv[j];
    }
  }
  const std::size_t xid = x.id, gid = gain.id, sid = shift.id;
  return x.graph->emplace(
      std::move(out), {x, gain, shift},
      [xid, gid, sid, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Graph& g, std::size_t self) {
        const Tensor& gy = g.node_grad(self);
        const Tensor& gv = g.node_value(gid);
        if (auto gg = g.grad_buffer(gid); !gg.empty()) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += gy[i * n + j] * xhat[i * n + j];
        }
        if (auto gs = g.grad_buffer(sid); !gs.empty()) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gs[j] += gy[i * n + j];
        }
        if (auto gx = g.grad_buffer(xid); !gx.empty()) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            // dxhat = gy * gain; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = gy[i * n + j] * gv[j];
              mean_d += d;
              mean_dx += d * xhat[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = gy[i * n + j] * gv[j];
              gx[i * n + j] += inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
            }
          }
        }
      });
}

// ---- composite ops --------------------------------------------------------

Var attention(Var q, Var k, Var v) {
  const Tensor& qv = q.value();
  require_matrix(qv, "attention");
  require(qv.same_shape(k.value()) && qv.same_shape(v.value()),
          "attention: q " + shape_string(qv.shape()) + ", k " + shape_string(k.value().shape()) +
              ", v " + shape_string(v.value().shape()) + " must match");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(qv.cols()));
  Var scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
  return matmul(softmax_rows(scores), v);
}

Var steer(Var h, Var a, Var b, Var lambda) {
  const Tensor& hv = h.value();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = hv.rows(), n = hv.cols();
  require(av.size() == n && bv.size() == n,
          "steer: intervention widths (" + std::to_string(av.size()) + ", " +
              std::to_string(bv.size()) + ") do not match activation width " + std::to_string(n));
  require(lambda.value().size() == 1, "steer: lambda must be a scalar");
  const double lam = lambda.value()[0];
  Tensor out(hv.shape());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double x = hv[i * n + j];
      out[i * n + j] = x + lam * (av[j] * x + bv[j]);
    }
  }
  const std::size_t hid = h.id, aid = a.id, bid = b.id, lid = lambda.id;
  return h.graph->emplace(
      std::move(out), {h, a, b, lambda}, [hid, aid, bid, lid, m, n](Graph& g, std::size_t self) {
        const Tensor& gy = g.node_grad(self);
        const Tensor& hv = g.node_value(hid);
        const Tensor& av = g.node_value(aid);
        const Tensor& bv = g.node_value(bid);
        const double lam = g.node_value(lid)[0];
        auto gh = g.grad_buffer(hid);
        auto ga = g.grad_buffer(aid);
        auto gb = g.grad_buffer(bid);
        auto gl = g.grad_buffer(lid);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double gij = gy[i * n + j];
            const double x = hv[i * n + j];
            if (!gh.empty()) gh[i * n + j] += gij * (1.0 + lam * av[j]);
            if (!ga.empty()) ga[j] += gij * lam * x;
            if (!gb.empty()) gb[j] += gij * lam;
            if (!gl.empty()) gl[0] += gij * (av[j] * x + bv[j]);
          }
        }
      });
}

}  // namespace dso::ad
