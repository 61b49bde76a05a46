#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "elt/model.hpp"
#include "elt/rng.hpp"
#include "elt/tensor.hpp"

namespace elt {

// Discrete token field over an arbitrary spatial shape, stored flattened in
// row-major order. MASK is the sentinel id vocab_size.
class TokenGrid {
 public:
  TokenGrid(std::vector<std::size_t> shape, std::vector<int> tokens, int vocab_size);
  static TokenGrid fully_masked(std::vector<std::size_t> shape, int vocab_size);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  const std::vector<int>& tokens() const noexcept { return tokens_; }
  int vocab_size() const noexcept { return vocab_size_; }
  int mask_id() const noexcept { return vocab_size_; }
  std::size_t size() const noexcept { return tokens_.size(); }

  int at(std::size_t flat) const { return tokens_.at(flat); }
  void set(std::size_t flat, int token);
  bool is_masked(std::size_t flat) const { return tokens_.at(flat) == mask_id(); }
  std::size_t masked_count() const;
  std::vector<std::size_t> masked_positions() const;

  std::size_t flatten(const std::vector<std::size_t>& index) const;
  std::vector<std::size_t> unflatten(std::size_t flat) const;

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<int> tokens_;
  int vocab_size_;
};

// Tokens still masked after step k of K: floor(cos(pi/2 * (k+1)/K) * n).
int cosine_mask_count(int k, int total_steps, int n_tokens);

// bias + scale * (1 - (k+1)/K)
double sampling_temperature(int k, int total_steps, double bias, double scale);

// uncond + s * (cond - uncond)
Tensor cfg_logits(const Tensor& cond, const Tensor& uncond, double guidance_scale);

// Which sampled tokens are kept at each step.
//  kConfidence: highest post-temperature probability of the sampled token.
//  kUniform:    a uniformly random subset of the masked positions. With a
//               model that emits exact conditionals and temperature 1 this
//               is an exact ancestral sampler.
enum class RevealOrder { kConfidence, kUniform };

struct DecodeOptions {
  int steps = 24;
  double temp_bias = 0.5;
  double temp_scale = 0.8;
  double cfg_scale = 1.0;
  RevealOrder order = RevealOrder::kConfidence;
};

// One Sample-then-Mask step. `logits` is [n_tokens x vocab]; rows of
// revealed positions are ignored.
TokenGrid sample_and_mask(const Tensor& logits, const TokenGrid& grid, int k,
                          const DecodeOptions& opts, Rng& rng);

// Anything that maps a partially masked grid to per-position logits.
class MaskedPredictor {
 public:
  virtual ~MaskedPredictor() = default;
  // class_id may be kNullClass.
  virtual Tensor logits(const TokenGrid& grid, int class_id, int loops) = 0;
  virtual std::size_t block_applications() const { return 0; }
};

// Looped transformer behind the predictor interface.
class LoopedMaskedPredictor : public MaskedPredictor {
 public:
  explicit LoopedMaskedPredictor(const BlockParams& params);
  Tensor logits(const TokenGrid& grid, int class_id, int loops) override;
  std::size_t block_applications() const override { return model_.block_applications(); }

 private:
  LoopedModel model_;
};

struct GenerateResult {
  TokenGrid grid;
  std::size_t block_applications = 0;
  std::size_t model_calls = 0;
};

// Full K-step decode from an all-MASK grid with loop budget `loops` per model
// call. With cfg_scale != 1 each step makes a conditional and a null-class
// call. Throws ConfigError when K is too large for the grid (some step
// before the last would start with nothing masked).
GenerateResult generate(MaskedPredictor& model, const std::vector<std::size_t>& shape,
                        int vocab_size, int class_id, int loops, const DecodeOptions& opts,
                        Rng& rng);

struct CorruptedGrid {
  TokenGrid grid;                 // clean tokens with the masked subset replaced by MASK
  std::vector<std::size_t> targets;  // clean token per position
  std::vector<std::uint8_t> mask;    // 1 where masked
  double ratio = 0.0;                // drawn mask ratio cos(pi/2 * u)
};

// Mask ratio r = cos(pi/2 * u), u ~ U(0,1); ceil(r*n) positions (at least
// one) chosen uniformly at random are masked.
CorruptedGrid corrupt_for_training(const TokenGrid& clean, Rng& rng);
// Deterministic core of corrupt_for_training for a given u.
std::size_t masked_positions_for(double u, std::size_t n_tokens);

}  // namespace elt
