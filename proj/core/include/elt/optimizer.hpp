#pragma once

#include <cstdint>
#include <vector>

#include "elt/model.hpp"
#include "elt/tensor.hpp"

namespace elt {

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.96;
  double eps = 1e-8;
  double weight_decay = 4.5e-2;
  int warmup_steps = 200;  // linear warmup, then constant
  double grad_clip = 1.0;  // global-norm clip; <= 0 disables

  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

// Adam with decoupled weight decay. Decay applies to matrices only (biases,
// gains and 1-d tensors are not decayed).
class AdamW {
 public:
  AdamW(const BlockParams& params, OptimizerConfig cfg);

  const OptimizerConfig& config() const noexcept { return cfg_; }
  std::int64_t steps() const noexcept { return steps_; }
  // Learning rate the next step() will use.
  double current_lr() const noexcept;
  const std::vector<Tensor>& first_moment() const noexcept { return m_; }
  const std::vector<Tensor>& second_moment() const noexcept { return v_; }

  void step(BlockParams& params, const std::vector<Tensor>& grads);

 private:
  OptimizerConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::int64_t steps_ = 0;
};

double global_norm(const std::vector<Tensor>& grads);
// Scales grads in place so their global norm is at most max_norm. Returns the
// norm before clipping.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

}  // namespace elt
