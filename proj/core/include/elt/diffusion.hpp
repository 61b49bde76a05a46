#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "elt/model.hpp"
#include "elt/rng.hpp"
#include "elt/tensor.hpp"

namespace elt {

// Discrete-time variance-preserving schedule on the shifted-cosine logSNR
// curve: logSNR(t) = -2 log tan(pi t / 2T) + 2 log shift, for t = 0..T.
// signal(t)^2 = sigmoid(logSNR), noise(t)^2 = sigmoid(-logSNR).
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int steps, double shift = 1.0, double weight_offset = 0.0);

  int steps() const noexcept { return steps_; }
  double shift() const noexcept { return shift_; }
  double weight_offset() const noexcept { return weight_offset_; }

  double log_snr(int t) const;  // +inf at t = 0
  double signal(int t) const;   // a(t)
  double noise(int t) const;    // sigma(t)
  // sigmoid(weight_offset - logSNR(t))
  double weight(int t) const;
  double time_fraction(int t) const { return static_cast<double>(t) / steps_; }

  // x_{t-1} = c1 * x_t + c2 * x0_hat + c3 * z: the DDPM posterior
  // q(x_{t-1} | x_t, x0) with x0 replaced by the model prediction. c3 is the
  // posterior standard deviation and is exactly 0 for t = 1.
  struct StepCoefficients {
    double c1 = 0.0, c2 = 0.0, c3 = 0.0;
  };
  StepCoefficients coefficients(int t) const;

 private:
  void check(int t) const;

  int steps_;
  double shift_;
  double weight_offset_;
  std::vector<double> signal_, noise_, log_snr_;
};

// x_t = a(t) * x0 + sigma(t) * eps, for 0 < t <= T.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule);

// One reverse step given the model's x0 prediction.
Tensor ddpm_step(const Tensor& x_t, const Tensor& x0_pred, int t, const NoiseSchedule& schedule,
                 Rng& rng);

double sigmoid_weight(double log_snr, double offset = 0.0);

// Anything that predicts x0 from a batch of noisy latents. Latents are
// [batch*seq_len x latent_dim] in example-major row order.
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Tensor predict_x0(const Tensor& x_t, std::size_t batch, int t,
                            const NoiseSchedule& schedule, int class_id, int loops) = 0;
  virtual std::size_t block_applications() const { return 0; }
};

class LoopedDenoiser : public Denoiser {
 public:
  explicit LoopedDenoiser(const BlockParams& params);
  Tensor predict_x0(const Tensor& x_t, std::size_t batch, int t, const NoiseSchedule& schedule,
                    int class_id, int loops) override;
  std::size_t block_applications() const override { return model_.block_applications(); }

 private:
  LoopedModel model_;
};

// Diagonal Gaussian mixture over the flattened latent of one example.
struct GaussianMixture {
  std::vector<double> weights;             // sums to 1
  std::vector<std::vector<double>> means;  // [component][dim]
  std::vector<std::vector<double>> vars;   // [component][dim], all > 0

  std::size_t dim() const { return means.empty() ? 0 : means.front().size(); }
  void validate() const;
  friend bool operator==(const GaussianMixture&, const GaussianMixture&) = default;
};

// Exact E[x0 | x_t] for mixture-distributed data under the schedule. With
// one component per class, class c conditions on component c and kNullClass
// uses the full mixture.
class GaussianMixtureOracle : public Denoiser {
 public:
  GaussianMixtureOracle(GaussianMixture mixture, std::size_t seq_len, std::size_t latent_dim,
                        bool class_is_component = false);
  Tensor predict_x0(const Tensor& x_t, std::size_t batch, int t, const NoiseSchedule& schedule,
                    int class_id, int loops) override;
  // Posterior mean for one flattened example at signal a and noise sigma.
  std::vector<double> posterior_mean(std::span<const double> x_t, double a, double sigma,
                                     int class_id) const;

 private:
  GaussianMixture mixture_;
  std::size_t seq_len_, latent_dim_;
  bool class_is_component_;
};

// Single diagonal Gaussian N(mean, diag(var)).
GaussianMixtureOracle gaussian_oracle(std::vector<double> mean, std::vector<double> var,
                                      std::size_t seq_len, std::size_t latent_dim);

struct SampleResult {
  Tensor latents;  // [chains*seq_len x latent_dim]
  std::size_t block_applications = 0;
};

// Ancestral sampling from x_T ~ N(0, I) down to t = 0 for `chains`
// independent chains evaluated as one batch. With cfg_scale != 1 the model
// is also called with kNullClass and predictions are blended as
// uncond + s * (cond - uncond).
SampleResult sample(Denoiser& model, const NoiseSchedule& schedule, std::size_t chains,
                    std::size_t seq_len, std::size_t latent_dim, int class_id, int loops,
                    double cfg_scale, Rng& rng);

struct NoisedExample {
  Tensor x_t;
  int t = 0;
  Tensor eps;
  double weight = 0.0;
};

// t ~ U{1..T}, eps ~ N(0, I), x_t = q_sample(x0, t, eps), w = weight(t).
NoisedExample corrupt_for_training_diffusion(const Tensor& x0, const NoiseSchedule& schedule,
                                             Rng& rng);

}  // namespace elt
