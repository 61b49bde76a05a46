#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "elt/config.hpp"
#include "elt/diffusion.hpp"
#include "elt/ilsd.hpp"
#include "elt/masked.hpp"
#include "elt/rng.hpp"

namespace elt {

// First-order Markov chain over the flattened (row-major) positions of a
// token grid. Class c has its own transition table; kNullClass is the
// uniform mixture over classes.
class MarkovGridSource {
 public:
  // initial[c][v], transition[c][a][b] = P(next = b | prev = a) for class c.
  MarkovGridSource(std::vector<std::size_t> shape, int vocab_size,
                   std::vector<std::vector<double>> initial,
                   std::vector<std::vector<std::vector<double>>> transition);

  // Class c starts at token c mod V with probability `start_peak` and moves
  // a -> (a + 1 + c) mod V with probability `peak`; the remaining mass is
  // spread evenly. start_peak = 1/V gives a uniform start.
  static MarkovGridSource cyclic(std::vector<std::size_t> shape, int vocab_size, int n_classes,
                                 double peak, double start_peak);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  int vocab_size() const noexcept { return vocab_; }
  int n_classes() const noexcept { return static_cast<int>(initial_.size()); }
  std::size_t n_positions() const noexcept { return n_; }
  // V^n; enumeration helpers require this to be at most 1e6.
  std::size_t support_size() const noexcept { return support_; }

  double probability(std::span<const int> tokens, int class_id) const;
  // Exact distribution indexed by outcome_index.
  std::vector<double> distribution(int class_id) const;
  // Base-V number with position 0 as the most significant digit.
  std::size_t outcome_index(std::span<const int> tokens) const;
  std::vector<int> outcome_tokens(std::size_t index) const;

  std::vector<int> sample(int class_id, Rng& rng) const;

  // Per-position log marginals given the revealed tokens of `grid`, by exact
  // enumeration. Revealed rows are a point mass on their token. Log zeros
  // are clamped to a large finite negative value.
  Tensor conditional_logits(const TokenGrid& grid, int class_id) const;

 private:
  void require_enumerable() const;
  double class_probability(std::span<const int> tokens, std::size_t c) const;

  std::vector<std::size_t> shape_;
  int vocab_;
  std::size_t n_ = 0, support_ = 0;
  std::vector<std::vector<double>> initial_;
  std::vector<std::vector<std::vector<double>>> transition_;
};

// Bayes-optimal masked predictor for a Markov grid source.
class EnumerationOracle : public MaskedPredictor {
 public:
  explicit EnumerationOracle(const MarkovGridSource& source) : source_(source) {}
  Tensor logits(const TokenGrid& grid, int class_id, int loops) override;

 private:
  const MarkovGridSource& source_;
};

// Gaussian-mixture latents: one example is one draw of the mixture reshaped
// to [seq_len x latent_dim]. Class c draws from component c.
class GaussianMixtureSource {
 public:
  GaussianMixtureSource(GaussianMixture mixture, std::size_t seq_len, std::size_t latent_dim);

  const GaussianMixture& mixture() const noexcept { return mixture_; }
  std::size_t seq_len() const noexcept { return seq_len_; }
  std::size_t latent_dim() const noexcept { return latent_dim_; }

  Tensor sample(int class_id, Rng& rng) const;
  // Component with the highest posterior responsibility for a clean draw.
  std::size_t assign_component(std::span<const double> x) const;
  GaussianMixtureOracle oracle() const;

 private:
  GaussianMixture mixture_;
  std::size_t seq_len_, latent_dim_;
};

// Data-source description carried by experiment configs and checkpoints so
// that any checkpoint can rebuild its own held-out set.
struct DataSpec {
  std::string kind = "markov-grid";  // markov-grid | gaussian-mixture
  std::vector<std::size_t> grid{2, 2};
  double peak = 0.85;
  double start_peak = 0.25;
  GaussianMixture mixture{{0.5, 0.5}, {{-1.5, -1.5}, {1.5, 1.5}}, {{0.25, 0.25}, {0.25, 0.25}}};
  double label_drop = 0.1;
  std::size_t eval_examples = 1024;

  friend bool operator==(const DataSpec&, const DataSpec&) = default;
};

// Diffusion schedule hyperparameters.
struct DiffusionSpec {
  int steps = 256;
  double shift = 1.0;
  double weight_offset = 0.0;

  NoiseSchedule schedule() const { return NoiseSchedule(steps, shift, weight_offset); }
  friend bool operator==(const DiffusionSpec&, const DiffusionSpec&) = default;
};

nlohmann::json to_json(const DataSpec& spec);
DataSpec data_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DiffusionSpec& spec);
DiffusionSpec diffusion_spec_from_json(const nlohmann::json& j);

// Throws ConfigError when the source cannot feed a model of this shape.
void check_compatible(const DataSpec& spec, const LoopConfig& cfg);

MarkovGridSource make_markov_source(const DataSpec& spec, const LoopConfig& cfg);
GaussianMixtureSource make_mixture_source(const DataSpec& spec, const LoopConfig& cfg);

// One training batch: each example draws a class uniformly, replaces it by
// kNullClass with probability label_drop, draws clean data and corrupts it.
TrainBatch make_train_batch(const DataSpec& spec, const LoopConfig& cfg,
                            const DiffusionSpec& diffusion, std::size_t batch, Rng& rng);

// Fixed held-out set of spec.eval_examples examples, fully determined by the
// seed. Labels are never dropped.
TrainBatch make_eval_set(const DataSpec& spec, const LoopConfig& cfg,
                         const DiffusionSpec& diffusion, std::uint64_t seed);

}  // namespace elt
