#include "elt/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

#include "elt/error.hpp"

namespace elt::ad {
namespace {

#ifdef NDEBUG
std::atomic<bool> g_finite_trap{false};
#else
std::atomic<bool> g_finite_trap{true};
#endif

std::atomic<std::uint64_t> g_mark{0};

using NodePtr = std::shared_ptr<Node>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " and " + shape_str(b));
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

Var make(const char* op, Tensor value, std::vector<NodePtr> parents,
         std::function<void(Node&)> backward) {
  if (g_finite_trap.load(std::memory_order_relaxed) && !value.all_finite()) {
    throw NumericalError(std::string(op) + ": non-finite value in output " +
                         shape_str(value.shape()));
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  node->requires_grad = std::any_of(parents.begin(), parents.end(),
                                    [](const NodePtr& p) { return p->requires_grad; });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

void accumulate(Node& target, const Tensor& g) {
  if (!target.requires_grad) return;
  Tensor& buf = target.grad_buffer();
  double* dst = buf.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < buf.numel(); ++i) dst[i] += src[i];
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor(node_->value.shape(), 0.0);
  return node_->grad;
}

void set_finite_trap(bool enabled) { g_finite_trap.store(enabled); }
bool finite_trap_enabled() { return g_finite_trap.load(); }

BackwardStats backward(const Var& root) {
  if (!root.defined() || root.value().numel() != 1) {
    throw ShapeError("backward: root must be a scalar, got " +
                     (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  BackwardStats stats;
  if (!root.requires_grad()) return stats;

  // Iterative post-order DFS gives a topological order (parents first).
  const std::uint64_t mark = ++g_mark;
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  root.node()->mark = mark;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && parent->mark != mark) {
        parent->mark = mark;
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad = Tensor();
  }
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    ++stats.nodes_visited;
    if (n->backward && !n->grad.empty() && !n->stop_grad) n->backward(*n);
  }
  return stats;
}

Var stop_gradient(const Var& x) {
  auto node = std::make_shared<Node>();
  node->value = x.value();
  node->op = "stop_gradient";
  node->stop_grad = true;
  node->requires_grad = false;
  return Var(std::move(node));
}

Var add(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  return make("add", std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return make("sub", std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor neg = self.grad;
      for (std::size_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
      accumulate(*self.parents[1], neg);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return make("mul", std::move(out), {a.node_ptr(), b.node_ptr()}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= pb.value[i];
      accumulate(pa, g);
    }
    if (pb.requires_grad) {
      Tensor g = self.grad;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= pa.value[i];
      accumulate(pb, g);
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return make("scale", std::move(out), {x.node_ptr()}, [s](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= s;
    accumulate(*self.parents[0], g);
  });
}

Var square(const Var& x) {
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
  return make("square", std::move(out), {x.node_ptr()}, [](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= 2.0 * xv[i];
    accumulate(*self.parents[0], g);
  });
}

Var add_bias(const Var& x, const Var& bias) {
  require_rank2("add_bias", x.value());
  const std::size_t m = x.value().rows(), n = x.value().cols();
  if (bias.value().numel() != n) shape_fail("add_bias", x.shape(), bias.shape());
  Tensor out = x.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.value()[j];
  return make("add_bias", std::move(out), {x.node_ptr(), bias.node_ptr()},
              [m, n](Node& self) {
                accumulate(*self.parents[0], self.grad);
                Node& pb = *self.parents[1];
                if (pb.requires_grad) {
                  Tensor& g = pb.grad_buffer();
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
                }
              });
}

Var matmul(const Var& a, const Var& b) {
  require_rank2("matmul", a.value());
  require_rank2("matmul", b.value());
  const std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  if (b.value().rows() != k) shape_fail("matmul", a.shape(), b.shape());
  Tensor out({m, n}, 0.0);
  gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  return make("matmul", std::move(out), {a.node_ptr(), b.node_ptr()},
              [m, k, n](Node& self) {
                Node& pa = *self.parents[0];
                Node& pb = *self.parents[1];
                if (pa.requires_grad)
                  gemm_nt(self.grad.data(), pb.value.data(), pa.grad_buffer().data(), m, n, k);
                if (pb.requires_grad)
                  gemm_tn(pa.value.data(), self.grad.data(), pb.grad_buffer().data(), m, k, n);
              });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double v = out[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return make("gelu", std::move(out), {x.node_ptr()}, [](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double v = xv[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      g[i] *= 0.5 * (1.0 + t) + 0.5 * v * dt;
    }
    accumulate(*self.parents[0], g);
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  require_rank2("layer_norm", x.value());
  const std::size_t m = x.value().rows(), n = x.value().cols();
  if (gain.value().numel() != n) shape_fail("layer_norm", x.shape(), gain.shape());
  if (bias.value().numel() != n) shape_fail("layer_norm", x.shape(), bias.shape());
  auto xhat = std::make_shared<Tensor>(Shape{m, n}, 0.0);
  auto rstd = std::make_shared<std::vector<double>>(m);
  Tensor out({m, n}, 0.0);
  const double* xv = x.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xv[i * n + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = xv[i * n + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xv[i * n + j] - mean) * r;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = h * gain.value()[j] + bias.value()[j];
    }
  }
  return make("layer_norm", std::move(out),
              {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
              [m, n, xhat, rstd](Node& self) {
                Node& px = *self.parents[0];
                Node& pg = *self.parents[1];
                Node& pb = *self.parents[2];
                const double* dy = self.grad.data();
                if (pg.requires_grad || pb.requires_grad) {
                  Tensor& gg = pg.grad_buffer();
                  Tensor& gb = pb.grad_buffer();
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                      gg[j] += dy[i * n + j] * (*xhat)[i * n + j];
                      gb[j] += dy[i * n + j];
                    }
                }
                if (px.requires_grad) {
                  Tensor& gx = px.grad_buffer();
                  const double inv_n = 1.0 / static_cast<double>(n);
                  for (std::size_t i = 0; i < m; ++i) {
                    double mean_d = 0.0, mean_dh = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                      const double d = dy[i * n + j] * pg.value[j];
                      mean_d += d;
                      mean_dh += d * (*xhat)[i * n + j];
                    }
                    mean_d *= inv_n;
                    mean_dh *= inv_n;
                    for (std::size_t j = 0; j < n; ++j) {
                      const double d = dy[i * n + j] * pg.value[j];
                      gx[i * n + j] +=
                          (*rstd)[i] * (d - mean_d - (*xhat)[i * n + j] * mean_dh);
                    }
                  }
                }
              });
}

namespace {
void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    z += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= z;
}
}  // namespace

Var softmax_rows(const Var& x) {
  require_rank2("softmax_rows", x.value());
  const std::size_t m = x.value().rows(), n = x.value().cols();
  Tensor out({m, n}, 0.0);
  for (std::size_t i = 0; i < m; ++i) softmax_row(x.value().data() + i * n, out.data() + i * n, n);
  return make("softmax_rows", std::move(out), {x.node_ptr()}, [m, n](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& gx = px.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[i * n + j] * self.value[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx[i * n + j] += self.value[i * n + j] * (self.grad[i * n + j] - dot);
    }
  });
}

Var log_softmax_rows(const Var& x) {
  require_rank2("log_softmax_rows", x.value());
  const std::size_t m = x.value().rows(), n = x.value().cols();
  Tensor out({m, n}, 0.0);
  const double* xv = x.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = xv[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[i * n + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(xv[i * n + j] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] - lz;
  }
  return make("log_softmax_rows", std::move(out), {x.node_ptr()}, [m, n](Node& self) {
    Node& px = *self.parents[0];
    if (!px.requires_grad) return;
    Tensor& gx = px.grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += self.grad[i * n + j];
      for (std::size_t j = 0; j < n; ++j)
        gx[i * n + j] += self.grad[i * n + j] - std::exp(self.value[i * n + j]) * gsum;
    }
  });
}

Var gather_rows(const Var& table, std::span<const std::size_t> index) {
  require_rank2("gather_rows", table.value());
  const std::size_t r = table.value().rows(), n = table.value().cols();
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  Tensor out({index.size(), n}, 0.0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) {
      throw ShapeError("gather_rows: index " + std::to_string(index[i]) +
                       " out of range for table " + shape_str(table.shape()));
    }
    std::copy_n(table.value().data() + index[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make("gather_rows", std::move(out), {table.node_ptr()},
              [n, idx = std::move(idx)](Node& self) {
                Tensor& g = self.parents[0]->grad_buffer();
                for (std::size_t i = 0; i < idx.size(); ++i)
                  for (std::size_t j = 0; j < n; ++j) g[idx[i] * n + j] += self.grad[i * n + j];
              });
}

Var slice_cols(const Var& x, std::size_t start, std::size_t count) {
  require_rank2("slice_cols", x.value());
  const std::size_t m = x.value().rows(), n = x.value().cols();
  if (count == 0 || start + count > n) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " +
                     shape_str(x.shape()));
  }
  Tensor out({m, count}, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.value().data() + i * n + start, count, out.data() + i * count);
  return make("slice_cols", std::move(out), {x.node_ptr()},
              [m, n, start, count](Node& self) {
                Tensor& g = self.parents[0]->grad_buffer();
                for (std::size_t i = 0; i < m; ++i)
                  for (std::size_t j = 0; j < count; ++j)
                    g[i * n + start + j] += self.grad[i * count + j];
              });
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t batch,
              std::size_t seq, std::size_t heads) {
  require_rank2("attention", q.value());
  if (q.shape() != k.shape()) shape_fail("attention", q.shape(), k.shape());
  if (q.shape() != v.shape()) shape_fail("attention", q.shape(), v.shape());
  const std::size_t rows = q.value().rows(), d = q.value().cols();
  if (rows != batch * seq || heads == 0 || d % heads != 0) {
    throw ShapeError("attention: " + shape_str(q.shape()) + " is not batch=" +
                     std::to_string(batch) + " x seq=" + std::to_string(seq) +
                     " with d divisible by heads=" + std::to_string(heads));
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  // Attention probabilities, laid out [batch][head][seq][seq].
  auto probs = std::make_shared<std::vector<double>>(batch * heads * seq * seq);
  Tensor out({rows, d}, 0.0);
  const double* qv = q.value().data();
  const double* kv = k.value().data();
  const double* vv = v.value().data();
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* pbh = probs->data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qv + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < seq; ++j) {
          const double* kj = kv + (b * seq + j) * d + h * dh;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          scores[j] = acc * sc;
        }
        softmax_row(scores.data(), pbh + i * seq, seq);
        double* oi = out.data() + (b * seq + i) * d + h * dh;
        for (std::size_t j = 0; j < seq; ++j) {
          const double p = pbh[i * seq + j];
          const double* vj = vv + (b * seq + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }
  return make(
      "attention", std::move(out), {q.node_ptr(), k.node_ptr(), v.node_ptr()},
      [batch, seq, heads, d, dh, sc, probs](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        const double* qv = pq.value.data();
        const double* kv = pk.value.data();
        const double* vv = pv.value.data();
        const double* dout = self.grad.data();
        double* gq = pq.requires_grad ? pq.grad_buffer().data() : nullptr;
        double* gk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
        double* gv = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
        std::vector<double> dp(seq), ds(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* pbh = probs->data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* doi = dout + (b * seq + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < seq; ++j) {
                const double* vj = vv + (b * seq + j) * d + h * dh;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                dp[j] = acc;
                dot += acc * pbh[i * seq + j];
              }
              for (std::size_t j = 0; j < seq; ++j) {
                const double p = pbh[i * seq + j];
                ds[j] = p * (dp[j] - dot) * sc;
                if (gv) {
                  double* gvj = gv + (b * seq + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p * doi[c];
                }
              }
              const double* qi = qv + (b * seq + i) * d + h * dh;
              for (std::size_t j = 0; j < seq; ++j) {
                const double* kj = kv + (b * seq + j) * d + h * dh;
                if (gq) {
                  double* gqi = gq + (b * seq + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds[j] * kj[c];
                }
                if (gk) {
                  double* gkj = gk + (b * seq + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds[j] * qi[c];
                }
              }
            }
          }
        }
      });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make("sum", Tensor::scalar(s), {x.node_ptr()}, [](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const double gs = self.grad[0];
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += gs;
  });
}

Var row_sum(const Var& x) {
  require_rank2("row_sum", x.value());
  const std::size_t m = x.value().rows(), n = x.value().cols();
  Tensor out({m, 1}, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += x.value()[i * n + j];
  return make("row_sum", std::move(out), {x.node_ptr()}, [m, n](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i];
  });
}

Var scale_rows(const Var& x, std::span<const double> weights) {
  require_rank2("scale_rows", x.value());
  const std::size_t m = x.value().rows(), n = x.value().cols();
  if (weights.size() != m) {
    throw ShapeError("scale_rows: " + std::to_string(weights.size()) +
                     " weights for " + shape_str(x.shape()));
  }
  Tensor out = x.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= weights[i];
  std::vector<double> w(weights.begin(), weights.end());
  return make("scale_rows", std::move(out), {x.node_ptr()}, [m, n, w = std::move(w)](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[i * n + j] * w[i];
  });
}

Var pick(const Var& x, std::span<const std::size_t> index) {
  require_rank2("pick", x.value());
  const std::size_t m = x.value().rows(), n = x.value().cols();
  if (index.size() != m) {
    throw ShapeError("pick: " + std::to_string(index.size()) + " indices for " +
                     shape_str(x.shape()));
  }
  Tensor out({m, 1}, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] >= n) throw ShapeError("pick: index out of range");
    out[i] = x.value()[i * n + index[i]];
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make("pick", std::move(out), {x.node_ptr()}, [n, idx = std::move(idx)](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * n + idx[i]] += self.grad[i];
  });
}

}  // namespace elt::ad
