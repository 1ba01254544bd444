#pragma once

// Tape-based reverse-mode differentiation over dense double tensors.
//
// A Graph is built fresh for every forward pass. Nodes are appended in
// evaluation order, so insertion order is a topological order and backward()
// simply walks the tape in reverse. Gradients accumulate (+=) into parents, so
// a value consumed by several ops receives the sum over all consumers.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "dso/tensor.hpp"

namespace dso::ad {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  double item() const;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is tracked.
  Var parameter(Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of the last backward() root w.r.t. `v`; zeros when `v` did not
  /// influence the root.
  const Tensor& grad(Var v);
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(root)/d(root) = 1 and propagates. `root` must hold one element.
  void backward(Var root);
  void zero_grad();

  // Op-construction interface. `fn` receives the graph and the new node id
  // and must add its contribution into the parents' gradient buffers.
  using BackwardFn = std::function<void(Graph&, std::size_t)>;
  Var emplace(Tensor value, std::vector<Var> parents, BackwardFn fn);

  const Tensor& node_value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& node_grad(std::size_t id) const { return nodes_[id].grad; }
  /// Gradient buffer of `id`, zero-initialised on first access. Returns an
  /// empty span when the node does not require a gradient.
  std::span<double> grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- operations -----------------------------------------------------------

/// [m x k] * [k x n] -> [m x n].
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Element-wise product of equal shapes.
Var mul(Var a, Var b);
/// Adds a length-n vector to every row of an [m x n] matrix.
Var add_row(Var x, Var row);
Var scale(Var x, double factor);
Var add_scalar(Var x, double c);
Var exp(Var x);
Var abs(Var x);
/// Tanh-approximated GELU.
Var gelu(Var x);
/// Element-wise min; on ties the gradient goes to `a`.
Var minimum(Var a, Var b);
/// Element-wise clamp to [lo, hi]; zero gradient outside the interval.
Var clamp(Var x, double lo, double hi);
/// Sum of all elements, shape [1].
Var sum(Var x);
Var mean(Var x);
/// Mean over rows, [m x n] -> [1 x n].
Var mean_rows(Var x);
/// Single element as a [1] tensor.
Var pick(Var x, std::size_t index);
/// Concatenates [1]-shaped scalars into a vector.
Var stack(std::span<const Var> scalars);
/// Rows of `table` selected by `indices`: [V x d] -> [t x d].
Var gather_rows(Var table, std::span<const std::size_t> indices);
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);

/// Row-wise normalization to zero mean and unit variance followed by the
/// affine map `gain * xhat + shift`.
Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-5);

/// Single-head scaled dot-product attention softmax(q k^T / sqrt(d)) v.
Var attention(Var q, Var k, Var v);

/// Linear intervention h + lambda * (a .* h + b) on every row of h.
/// `a` and `b` have the width of h; `lambda` is a [1] tensor.
Var steer(Var h, Var a, Var b, Var lambda);

/// Mean negative log-likelihood of `labels` under row-wise softmax(logits).
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);

}  // namespace dso::ad
