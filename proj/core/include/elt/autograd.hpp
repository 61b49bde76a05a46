#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "elt/tensor.hpp"

// Reverse-mode automatic differentiation over dense float64 tensors.
//
// Graphs are built eagerly: every op evaluates its value immediately and
// records a closure that maps the output gradient onto its parents. Values are
// never mutated after construction, so independent graphs can live on
// different threads.
namespace elt::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";
  bool requires_grad = false;
  bool stop_grad = false;
  std::uint64_t mark = 0;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var leaf(Tensor value, bool requires_grad = true);
  static Var constant(Tensor value) { return leaf(std::move(value), false); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  // Gradient accumulated by backward(); a zero tensor if nothing reached it.
  Tensor grad() const;
  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }
  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

  void zero_grad() { node_->grad = Tensor(); }

 private:
  std::shared_ptr<Node> node_;
};

struct BackwardStats {
  std::size_t nodes_visited = 0;
};

// Backpropagates from a single-element root. Leaf gradients accumulate across
// calls; interior gradients are reset at the start of every call.
BackwardStats backward(const Var& root);

// When enabled, every op checks its output for NaN/Inf and throws
// NumericalError naming the op. Enabled by default in debug builds.
void set_finite_trap(bool enabled);
bool finite_trap_enabled();

Var stop_gradient(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var square(const Var& x);
// x[m x n] + bias[n] broadcast over rows.
Var add_bias(const Var& x, const Var& bias);
Var matmul(const Var& a, const Var& b);
// Tanh approximation of GELU.
Var gelu(const Var& x);
// Row-wise (x - mean) / sqrt(var + eps) * gain + bias.
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6);
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
// out[i] = table[index[i]]; used for embeddings and row broadcasting.
Var gather_rows(const Var& table, std::span<const std::size_t> index);
Var slice_cols(const Var& x, std::size_t start, std::size_t count);
// Bidirectional multi-head attention over `batch` independent sequences of
// `seq` rows each. q, k, v are [batch*seq x d_model]; d_model % heads == 0.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t batch,
              std::size_t seq, std::size_t heads);
Var sum(const Var& x);
// [m x n] -> [m x 1]
Var row_sum(const Var& x);
// Row i multiplied by the constant weights[i].
Var scale_rows(const Var& x, std::span<const double> weights);
// [m x n] -> [m x 1], out[i] = x[i, index[i]]
Var pick(const Var& x, std::span<const std::size_t> index);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

}  // namespace elt::ad
