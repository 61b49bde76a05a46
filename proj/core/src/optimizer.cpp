#include "elt/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "elt/error.hpp"

namespace elt {

AdamW::AdamW(const BlockParams& params, OptimizerConfig cfg) : cfg_(cfg) {
  for (const auto& t : params.tensors()) {
    m_.emplace_back(t.value.shape(), 0.0);
    v_.emplace_back(t.value.shape(), 0.0);
  }
}

double AdamW::current_lr() const noexcept {
  if (cfg_.warmup_steps <= 0) return cfg_.lr;
  const double frac = static_cast<double>(steps_ + 1) / static_cast<double>(cfg_.warmup_steps);
  return cfg_.lr * std::min(1.0, frac);
}

void AdamW::step(BlockParams& params, const std::vector<Tensor>& grads) {
  auto& tensors = params.tensors();
  if (grads.size() != tensors.size() || m_.size() != tensors.size()) {
    throw ShapeError("AdamW: gradient list does not match parameter set");
  }
  const double lr = current_lr();
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor& p = tensors[i].value;
    const Tensor& g = grads[i];
    if (g.shape() != p.shape()) {
      throw ShapeError("AdamW: gradient " + shape_str(g.shape()) + " for parameter " +
                       tensors[i].name + shape_str(p.shape()));
    }
    const double decay = p.rank() >= 2 ? cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < p.numel(); ++j) {
      m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
      v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mhat = m_[i][j] / bc1;
      const double vhat = v_[i][j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + decay * p[j]);
    }
  }
}

double global_norm(const std::vector<Tensor>& grads) {
  double acc = 0.0;
  for (const auto& g : grads)
    for (double v : g.values()) acc += v * v;
  return std::sqrt(acc);
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g.values()) v *= s;
  }
  return norm;
}

}  // namespace elt
