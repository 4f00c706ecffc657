#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "dynprompt/tensor.hpp"

namespace dynprompt {

// Handle to a node of a Graph.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

// Gradients keyed by the identity (address) of the parameter tensor.
template <typename T>
class Gradients {
 public:
  bool contains(const BasicTensor<T>& param) const { return grads_.count(&param) != 0; }
  const BasicTensor<T>& at(const BasicTensor<T>& param) const;
  std::size_t size() const { return grads_.size(); }
  void accumulate(const BasicTensor<T>* key, const BasicTensor<T>& grad);

  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::unordered_map<const BasicTensor<T>*, BasicTensor<T>> grads_;
};

// GradientTrace: ordered record of executed operations. Node ids are assigned
// in creation order, which is a topological order; backward() walks them in
// reverse. A Graph is owned by one training step and consumed by backward().
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const BasicTensor<T>& out_grad)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(BasicTensor<T> value);
  // Leaf referring to caller-owned storage (no copy). The source must outlive the graph.
  Var parameter(const BasicTensor<T>& source, bool trainable);
  // Appends an op node. The backward closure is dropped when no input needs a gradient.
  Var record(BasicTensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(BasicTensor<T> value, std::span<const Var> inputs, BackwardFn backward);

  const BasicTensor<T>& value(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  // Adds into v's gradient buffer; ignored when v does not require a gradient.
  void accumulate_grad(Var v, const BasicTensor<T>& grad);
  // Zero-initialised gradient buffer of v, for in-place accumulation by ops.
  BasicTensor<T>& grad_buffer(Var v);

  // Reverse-mode sweep from a scalar loss. Returns gradients of trainable parameters.
  Gradients<T> backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    BasicTensor<T> owned;
    const BasicTensor<T>* external = nullptr;
    BasicTensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool trainable_leaf = false;
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Differentiable operations. All extents are checked; errors are TensorError.
namespace ag {

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b);
template <typename T>
Var matmul_nt(Graph<T>& g, Var a, Var b);
template <typename T>
Var add(Graph<T>& g, Var a, Var b);
template <typename T>
Var mul(Graph<T>& g, Var a, Var b);
template <typename T>
Var scale(Graph<T>& g, Var a, T factor);
template <typename T>
Var sum(Graph<T>& g, Var a);
template <typename T>
Var rms_norm(Graph<T>& g, Var x, Var gain, double eps);
template <typename T>
Var gelu(Graph<T>& g, Var x);
template <typename T>
Var embed(Graph<T>& g, Var table, std::span<const int> tokens);

// Rotary position signal applied per head to rows with position >= 0.
// Rows with a negative position pass through unchanged.
inline constexpr int kNoPosition = -1;
template <typename T>
Var rope(Graph<T>& g, Var x, std::span<const int> positions, std::size_t n_heads, double base);

template <typename T>
Var concat_rows(Graph<T>& g, std::span<const Var> parts);
template <typename T>
Var slice_rows(Graph<T>& g, Var x, std::size_t begin, std::size_t count);
template <typename T>
Var gather_rows(Graph<T>& g, Var x, std::span<const std::size_t> rows);
// Mean NLL over rows whose target is not kernels::kIgnoreTarget. Result is [1].
template <typename T>
Var cross_entropy(Graph<T>& g, Var logits, std::span<const int> targets);

}  // namespace ag

// Central-difference gradient check. build_loss must register every tensor in
// params with Graph::parameter(..., true) and return a scalar loss.
struct FiniteDiffReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries_checked = 0;
};

// Relative errors use max(|analytic|, |numeric|, kGradCheckFloor) as denominator.
inline constexpr double kGradCheckFloor = 1e-6;

FiniteDiffReport finite_diff_check(const std::function<Var(Graph<double>&)>& build_loss,
                                   std::span<Tensor64* const> params, double step,
                                   std::size_t max_entries_per_param = 0);

}  // namespace dynprompt
