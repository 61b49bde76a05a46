#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "elt/autograd.hpp"
#include "elt/config.hpp"
#include "elt/rng.hpp"
#include "elt/tensor.hpp"

namespace elt {

inline constexpr int kNullClass = -1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

// The single shared parameter set: N unique layers, embeddings, conditioning
// tables and one prediction head. Nothing in here depends on the loop count.
class BlockParams {
 public:
  // Truncated-normal(weight_std) weights, zero biases, unit layer-norm gains,
  // zero head projection and zero modulation projection.
  static BlockParams init(const LoopConfig& cfg, Rng& rng, double weight_std = 0.02);
  static BlockParams zeros(const LoopConfig& cfg);
  static BlockParams from_tensors(const LoopConfig& cfg, std::vector<NamedTensor> tensors);

  const LoopConfig& config() const noexcept { return cfg_; }
  const std::vector<NamedTensor>& tensors() const noexcept { return tensors_; }
  std::vector<NamedTensor>& tensors() noexcept { return tensors_; }

  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);
  std::size_t index_of(std::string_view name) const;

  std::size_t numel() const;
  // Parameters inside the N shared layers only.
  std::size_t block_numel() const;

 private:
  BlockParams(LoopConfig cfg, std::vector<NamedTensor> tensors);

  LoopConfig cfg_;
  std::vector<NamedTensor> tensors_;
};

// Name and shape of every parameter tensor, in canonical order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const LoopConfig& cfg);

// One batch of model inputs. Rows of the hidden state are laid out
// example-major: row b*seq_len + s.
struct ModelInput {
  std::size_t batch = 0;
  std::vector<std::size_t> tokens;  // masked mode: batch*seq_len ids in [0, vocab_size]
  Tensor latents;                   // diffusion mode: [batch*seq_len x latent_dim]
  std::vector<int> classes;         // one per example; kNullClass drops the label
  std::vector<double> times;        // diffusion mode: t/T in (0, 1], one per example
};

// Sinusoidal embedding of t/T scaled to [0, 1000], width `dim`.
Tensor time_embedding(std::span<const double> times, std::size_t dim);

// Conditioning derived once per model invocation and reused by every loop.
struct ConditioningContext {
  std::size_t batch = 0;
  ad::Var per_example;              // [batch x d_model]
  ad::Var rows;                     // [batch*seq_len x d_model]
  // Modulated mode only; per layer: shift1, scale1, shift2, scale2, each
  // [batch*seq_len x d_model].
  std::vector<std::array<ad::Var, 4>> modulation;
};

struct LoopCapture {
  ad::Var intermediate;  // state after exactly loop_int loops
  ad::Var final;         // state after loop_max loops
};

struct LayerWeights {
  ad::Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Var ln2_g, ln2_b, w1, b1, w2, b2;
  ad::Var mod_w, mod_b;  // modulated conditioning only
};

struct HeadWeights {
  ad::Var ln_g, ln_b, w, b;
};

// Binds a BlockParams instance into the autodiff graph and runs the looped
// forward computation. The block-application counter counts calls of
// apply_block() on this instance.
class LoopedModel {
 public:
  enum class Binding { kTrainable, kFrozen };

  LoopedModel(const BlockParams& params, Binding binding);

  const LoopConfig& config() const noexcept { return cfg_; }

  ad::Var embed(const ModelInput& input) const;
  ConditioningContext condition(const ModelInput& input) const;

  // g(x): one pass through the N unique layers.
  ad::Var apply_block(const ad::Var& x, const ConditioningContext& ctx);
  // g^L(x). The input is not re-injected between loops.
  ad::Var loop_forward(ad::Var x, const ConditioningContext& ctx, int loops);
  // Single pass of loop_max loops that also returns the state after loop_int.
  LoopCapture loop_forward_capture(ad::Var x, const ConditioningContext& ctx, int loop_max,
                                   int loop_int);
  // Shared prediction head: logits [rows x vocab] or x0 prediction [rows x latent].
  ad::Var predict_head(const ad::Var& features) const;

  // embed -> condition -> loop_forward(loops) -> head.
  ad::Var forward(const ModelInput& input, int loops);

  std::size_t block_applications() const noexcept { return block_applications_; }
  void reset_block_applications() noexcept { block_applications_ = 0; }

  const HeadWeights& head() const noexcept { return head_; }
  const std::vector<ad::Var>& vars() const noexcept { return vars_; }
  // Accumulated gradients in BlockParams tensor order.
  std::vector<Tensor> gradients() const;

  // Called at the start of every loop iteration with the conditioning that
  // iteration sees.
  using LoopObserver = std::function<void(int loop, const ConditioningContext& ctx)>;
  void set_loop_observer(LoopObserver observer) { observer_ = std::move(observer); }

 private:
  ad::Var apply_layer(std::size_t layer, const ad::Var& x, const ConditioningContext& ctx) const;

  LoopConfig cfg_;
  std::vector<ad::Var> vars_;
  std::vector<LayerWeights> layers_;
  HeadWeights head_;
  ad::Var tok_embed_, in_w_, in_b_, pos_, class_table_, time_w_, time_b_;
  std::size_t block_applications_ = 0;
  LoopObserver observer_;
};

}  // namespace elt
