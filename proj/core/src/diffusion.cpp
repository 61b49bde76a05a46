#include "elt/diffusion.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "elt/error.hpp"

namespace elt {

NoiseSchedule::NoiseSchedule(int steps, double shift, double weight_offset)
    : steps_(steps), shift_(shift), weight_offset_(weight_offset) {
  if (steps < 1) throw ConfigError("noise schedule: steps must be >= 1");
  if (!(shift > 0.0) || !std::isfinite(shift)) throw ConfigError("noise schedule: shift must be positive");
  if (!std::isfinite(weight_offset)) throw ConfigError("noise schedule: weight offset must be finite");
  signal_.resize(steps + 1);
  noise_.resize(steps + 1);
  log_snr_.resize(steps + 1);
  const double s2 = shift * shift;
  for (int t = 0; t <= steps; ++t) {
    const double angle = std::numbers::pi / 2.0 * static_cast<double>(t) / steps;
    const double c = std::cos(angle), s = std::sin(angle);
    // a^2 = 1 / (1 + tan^2 / shift^2) written without the tangent.
    const double norm = std::sqrt(s2 * c * c + s * s);
    signal_[t] = t == 0 ? 1.0 : shift * c / norm;
    noise_[t] = t == 0 ? 0.0 : s / norm;
    log_snr_[t] = t == 0 ? std::numeric_limits<double>::infinity()
                         : 2.0 * std::log(shift) - 2.0 * std::log(std::tan(angle));
  }
}

void NoiseSchedule::check(int t) const {
  if (t < 0 || t > steps_) {
    throw ConfigError("noise schedule: t=" + std::to_string(t) + " outside [0, " +
                      std::to_string(steps_) + "]");
  }
}

double NoiseSchedule::log_snr(int t) const {
  check(t);
  return log_snr_[t];
}

double NoiseSchedule::signal(int t) const {
  check(t);
  return signal_[t];
}

double NoiseSchedule::noise(int t) const {
  check(t);
  return noise_[t];
}

double sigmoid_weight(double log_snr, double offset) {
  const double x = offset - log_snr;
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double NoiseSchedule::weight(int t) const { return sigmoid_weight(log_snr(t), weight_offset_); }

NoiseSchedule::StepCoefficients NoiseSchedule::coefficients(int t) const {
  if (t < 1 || t > steps_) {
    throw ConfigError("ddpm step: t=" + std::to_string(t) + " outside [1, " +
                      std::to_string(steps_) + "]");
  }
  const int s = t - 1;
  const double a_t = signal_[t], sig_t = noise_[t];
  const double a_s = signal_[s], sig_s = noise_[s];
  // 1 - alpha_{t|s}^2 sigma_s^2 / sigma_t^2 = -expm1(logSNR_t - logSNR_s)
  const double keep = -std::expm1(log_snr_[t] - log_snr_[s]);
  StepCoefficients c;
  c.c1 = (a_t / a_s) * (sig_s * sig_s) / (sig_t * sig_t);
  c.c2 = a_s * keep;
  c.c3 = s == 0 ? 0.0 : std::sqrt(sig_s * sig_s * keep);
  return c;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps()) {
    throw ConfigError("q_sample: t=" + std::to_string(t) + " outside [1, " +
                      std::to_string(schedule.steps()) + "]");
  }
  if (x0.shape() != eps.shape()) {
    throw ShapeError("q_sample: x0 " + shape_str(x0.shape()) + " vs eps " + shape_str(eps.shape()));
  }
  const double a = schedule.signal(t), sigma = schedule.noise(t);
  Tensor out = x0;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + sigma * eps[i];
  return out;
}

Tensor ddpm_step(const Tensor& x_t, const Tensor& x0_pred, int t, const NoiseSchedule& schedule,
                 Rng& rng) {
  if (x_t.shape() != x0_pred.shape()) {
    throw ShapeError("ddpm_step: x_t " + shape_str(x_t.shape()) + " vs prediction " +
                     shape_str(x0_pred.shape()));
  }
  const auto c = schedule.coefficients(t);
  Tensor out = x_t;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double z = standard_normal(rng);
    out[i] = c.c1 * x_t[i] + c.c2 * x0_pred[i] + c.c3 * z;
  }
  return out;
}

LoopedDenoiser::LoopedDenoiser(const BlockParams& params)
    : model_(params, LoopedModel::Binding::kFrozen) {
  if (params.config().mode != Mode::kDiffusion) {
    throw ConfigError("denoiser needs a diffusion-mode model");
  }
}

Tensor LoopedDenoiser::predict_x0(const Tensor& x_t, std::size_t batch, int t,
                                  const NoiseSchedule& schedule, int class_id, int loops) {
  ModelInput in;
  in.batch = batch;
  in.latents = x_t;
  in.classes.assign(batch, class_id);
  in.times.assign(batch, schedule.time_fraction(t));
  return model_.forward(in, loops).value();
}

void GaussianMixture::validate() const {
  if (weights.empty() || weights.size() != means.size() || weights.size() != vars.size()) {
    throw ConfigError("gaussian mixture: weights/means/vars must have one entry per component");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (!(weights[k] > 0.0)) throw ConfigError("gaussian mixture: weights must be positive");
    total += weights[k];
    if (means[k].size() != dim() || vars[k].size() != dim() || dim() == 0) {
      throw ConfigError("gaussian mixture: inconsistent dimensions");
    }
    for (double v : vars[k]) {
      if (!(v > 0.0)) throw ConfigError("gaussian mixture: variances must be positive");
    }
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("gaussian mixture: weights must sum to 1");
}

GaussianMixtureOracle::GaussianMixtureOracle(GaussianMixture mixture, std::size_t seq_len,
                                             std::size_t latent_dim, bool class_is_component)
    : mixture_(std::move(mixture)),
      seq_len_(seq_len),
      latent_dim_(latent_dim),
      class_is_component_(class_is_component) {
  mixture_.validate();
  if (mixture_.dim() != seq_len * latent_dim) {
    throw ConfigError("gaussian oracle: mixture dim " + std::to_string(mixture_.dim()) +
                      " != seq_len*latent_dim " + std::to_string(seq_len * latent_dim));
  }
}

std::vector<double> GaussianMixtureOracle::posterior_mean(std::span<const double> x_t, double a,
                                                          double sigma, int class_id) const {
  const std::size_t K = mixture_.weights.size(), D = mixture_.dim();
  std::vector<std::size_t> comps;
  if (class_is_component_ && class_id != kNullClass) {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= K) {
      throw ConfigError("gaussian oracle: class " + std::to_string(class_id) + " has no component");
    }
    comps.push_back(static_cast<std::size_t>(class_id));
  } else {
    for (std::size_t k = 0; k < K; ++k) comps.push_back(k);
  }
  std::vector<double> logw(comps.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < comps.size(); ++i) {
    const std::size_t k = comps[i];
    double lw = std::log(mixture_.weights[k]);
    for (std::size_t d = 0; d < D; ++d) {
      const double var = a * a * mixture_.vars[k][d] + sigma * sigma;
      const double diff = x_t[d] - a * mixture_.means[k][d];
      lw += -0.5 * (std::log(2.0 * std::numbers::pi * var) + diff * diff / var);
    }
    logw[i] = lw;
    mx = std::max(mx, lw);
  }
  double z = 0.0;
  for (double& lw : logw) {
    lw = std::exp(lw - mx);
    z += lw;
  }
  std::vector<double> out(D, 0.0);
  for (std::size_t i = 0; i < comps.size(); ++i) {
    const std::size_t k = comps[i];
    const double r = logw[i] / z;
    for (std::size_t d = 0; d < D; ++d) {
      const double v = mixture_.vars[k][d];
      const double gain = a * v / (a * a * v + sigma * sigma);
      out[d] += r * (mixture_.means[k][d] + gain * (x_t[d] - a * mixture_.means[k][d]));
    }
  }
  return out;
}

Tensor GaussianMixtureOracle::predict_x0(const Tensor& x_t, std::size_t batch, int t,
                                         const NoiseSchedule& schedule, int class_id, int) {
  const std::size_t D = seq_len_ * latent_dim_;
  if (x_t.numel() != batch * D) {
    throw ShapeError("gaussian oracle: latents " + shape_str(x_t.shape()) + " for batch " +
                     std::to_string(batch));
  }
  const double a = schedule.signal(t), sigma = schedule.noise(t);
  Tensor out = x_t;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto mean =
        posterior_mean(std::span<const double>(x_t.data() + b * D, D), a, sigma, class_id);
    std::copy(mean.begin(), mean.end(), out.data() + b * D);
  }
  return out;
}

GaussianMixtureOracle gaussian_oracle(std::vector<double> mean, std::vector<double> var,
                                      std::size_t seq_len, std::size_t latent_dim) {
  GaussianMixture g{{1.0}, {std::move(mean)}, {std::move(var)}};
  return GaussianMixtureOracle(std::move(g), seq_len, latent_dim);
}

SampleResult sample(Denoiser& model, const NoiseSchedule& schedule, std::size_t chains,
                    std::size_t seq_len, std::size_t latent_dim, int class_id, int loops,
                    double cfg_scale, Rng& rng) {
  if (chains == 0 || seq_len == 0 || latent_dim == 0) throw ConfigError("sample: empty latent shape");
  if (loops < 1) throw ConfigError("sample: loop budget must be >= 1");
  const std::size_t apps_before = model.block_applications();
  Tensor x({chains * seq_len, latent_dim}, 0.0);
  for (double& v : x.values()) v = standard_normal(rng);
  for (int t = schedule.steps(); t >= 1; --t) {
    Tensor pred = model.predict_x0(x, chains, t, schedule, class_id, loops);
    if (cfg_scale != 1.0) {
      Tensor uncond = model.predict_x0(x, chains, t, schedule, kNullClass, loops);
      for (std::size_t i = 0; i < pred.numel(); ++i) {
        pred[i] = uncond[i] + cfg_scale * (pred[i] - uncond[i]);
      }
    }
    x = ddpm_step(x, pred, t, schedule, rng);
  }
  return {std::move(x), model.block_applications() - apps_before};
}

NoisedExample corrupt_for_training_diffusion(const Tensor& x0, const NoiseSchedule& schedule,
                                             Rng& rng) {
  NoisedExample ex;
  ex.t = uniform_int(rng, 1, schedule.steps());
  ex.eps = Tensor(x0.shape(), 0.0);
  for (double& v : ex.eps.values()) v = standard_normal(rng);
  ex.x_t = q_sample(x0, ex.t, ex.eps, schedule);
  ex.weight = schedule.weight(ex.t);
  return ex;
}

}  // namespace elt
