#include "elt/ilsd.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace elt {
namespace {

using ad::Var;

std::vector<double> masked_row_weights(std::span<const std::uint8_t> mask, double sign) {
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw ConfigError("masked loss: no masked positions to supervise");
  std::vector<double> w(mask.size(), 0.0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) w[i] = sign / static_cast<double>(count);
  }
  return w;
}

std::vector<double> example_row_weights(std::span<const double> weights, std::size_t rows) {
  const std::size_t batch = weights.size();
  if (batch == 0 || rows % batch != 0) {
    throw ShapeError("diffusion loss: " + std::to_string(rows) + " rows for " +
                     std::to_string(batch) + " examples");
  }
  const std::size_t seq = rows / batch;
  std::vector<double> w(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double wt = weights[r / seq];
    if (!std::isfinite(wt)) throw NumericalError("diffusion loss: non-finite weight w(t)");
    w[r] = wt / static_cast<double>(batch);
  }
  return w;
}

Var combine(const Var& gt_max, const Var& gt_int, const Var& distill, double lambda) {
  return ad::add(gt_max, ad::add(ad::scale(gt_int, lambda), ad::scale(distill, 1.0 - lambda)));
}

LossBreakdown breakdown_of(const Var& gt_max, const Var& gt_int, const Var& distill,
                           const Var& total, double lambda) {
  LossBreakdown b;
  b.gt_max = gt_max.value().item();
  b.gt_int = gt_int.value().item();
  b.distill = distill.value().item();
  b.lambda = lambda;
  b.total = total.value().item();
  return b;
}

}  // namespace

std::string to_string(DistillSpace s) {
  return s == DistillSpace::kHeadOutput ? "head_output" : "features";
}

DistillSpace distill_space_from_string(const std::string& s) {
  if (s == "head_output") return DistillSpace::kHeadOutput;
  if (s == "features") return DistillSpace::kFeatures;
  throw ConfigError("unknown distill_space '" + s + "' (expected head_output|features)");
}

double lambda_at(std::int64_t step, std::int64_t total_steps) {
  if (total_steps <= 0) throw ConfigError("lambda schedule: total_steps must be positive");
  const double lam = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return std::clamp(lam, 0.0, 1.0);
}

int sample_student_depth(Rng& rng, int loop_min, int loop_max) {
  if (loop_min < 1 || loop_min >= loop_max) {
    throw ConfigError("ILSD requires at least one intermediate depth: loop_min=" +
                      std::to_string(loop_min) + ", loop_max=" + std::to_string(loop_max));
  }
  return uniform_int(rng, loop_min, loop_max - 1);
}

bool LossBreakdown::finite() const {
  return std::isfinite(gt_max) && std::isfinite(gt_int) && std::isfinite(distill) &&
         std::isfinite(total);
}

Var masked_cross_entropy(const Var& logits, std::span<const std::size_t> targets,
                         std::span<const std::uint8_t> mask) {
  const std::size_t rows = logits.value().rows();
  if (targets.size() != rows || mask.size() != rows) {
    throw ShapeError("masked cross-entropy: " + std::to_string(targets.size()) + " targets / " +
                     std::to_string(mask.size()) + " mask entries for " + shape_str(logits.shape()));
  }
  const auto w = masked_row_weights(mask, -1.0);
  return ad::sum(ad::scale_rows(ad::pick(ad::log_softmax_rows(logits), targets), w));
}

Var weighted_mse(const Var& pred, const Tensor& target, std::span<const double> weights) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("weighted MSE: prediction " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
  const auto w = example_row_weights(weights, pred.value().rows());
  return ad::sum(ad::scale_rows(ad::row_sum(ad::square(ad::sub(pred, Var::constant(target)))), w));
}

IlsdLoss ilsd_loss_masked(const Var& logits_int, const Var& logits_max,
                          std::span<const std::size_t> targets, std::span<const std::uint8_t> mask,
                          double lambda) {
  if (logits_int.shape() != logits_max.shape()) {
    throw ShapeError("ILSD masked loss: student " + shape_str(logits_int.shape()) +
                     " vs teacher " + shape_str(logits_max.shape()));
  }
  IlsdLoss out;
  out.gt_max = masked_cross_entropy(logits_max, targets, mask);
  out.gt_int = masked_cross_entropy(logits_int, targets, mask);
  const auto w = masked_row_weights(mask, -1.0);
  Var teacher_probs = ad::softmax_rows(ad::stop_gradient(logits_max));
  out.distill = ad::sum(ad::scale_rows(
      ad::row_sum(ad::mul(teacher_probs, ad::log_softmax_rows(logits_int))), w));
  out.total = combine(out.gt_max, out.gt_int, out.distill, lambda);
  out.breakdown = breakdown_of(out.gt_max, out.gt_int, out.distill, out.total, lambda);
  return out;
}

IlsdLoss ilsd_loss_diffusion(const Var& pred_int, const Var& pred_max, const Tensor& x0,
                             std::span<const double> weights, double lambda, DistillSpace space,
                             const Var& feat_int, const Var& feat_max) {
  IlsdLoss out;
  out.gt_max = weighted_mse(pred_max, x0, weights);
  out.gt_int = weighted_mse(pred_int, x0, weights);
  Var student = pred_int;
  Var teacher = pred_max;
  if (space == DistillSpace::kFeatures) {
    if (!feat_int.defined() || !feat_max.defined()) {
      throw ConfigError("feature-space distillation needs both loop features");
    }
    if (feat_int.shape() != feat_max.shape()) {
      throw ShapeError("ILSD diffusion loss: feature shapes " + shape_str(feat_int.shape()) +
                       " vs " + shape_str(feat_max.shape()));
    }
    student = feat_int;
    teacher = feat_max;
  }
  const auto w = example_row_weights(weights, student.value().rows());
  out.distill = ad::sum(ad::scale_rows(
      ad::row_sum(ad::square(ad::sub(ad::stop_gradient(teacher), student))), w));
  out.total = combine(out.gt_max, out.gt_int, out.distill, lambda);
  out.breakdown = breakdown_of(out.gt_max, out.gt_int, out.distill, out.total, lambda);
  return out;
}

namespace {

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

TrainingDiverged::TrainingDiverged(std::int64_t step, LossBreakdown loss)
    : NumericalError("non-finite loss or gradient at step " + std::to_string(step) +
                     " (gt_max=" + short_num(loss.gt_max) + ", gt_int=" + short_num(loss.gt_int) +
                     ", distill=" + short_num(loss.distill) + ")"),
      step_(step),
      loss_(loss) {}

LossAndGrads compute_loss_and_grads(const BlockParams& params, const TrainBatch& batch,
                                    const IlsdConfig& ilsd, std::int64_t step, Rng& rng) {
  const LoopConfig& cfg = params.config();
  LoopedModel model(params, LoopedModel::Binding::kTrainable);
  const double lambda = lambda_at(step, ilsd.total_steps);

  Var h = model.embed(batch.input);
  const ConditioningContext ctx = model.condition(batch.input);

  LossAndGrads result;
  Var total;
  if (ilsd.enabled) {
    const int loop_int = sample_student_depth(rng, cfg.loop_min, cfg.loop_max);
    LoopCapture cap = model.loop_forward_capture(h, ctx, cfg.loop_max, loop_int);
    Var out_int = model.predict_head(cap.intermediate);
    Var out_max = model.predict_head(cap.final);
    IlsdLoss loss;
    if (cfg.mode == Mode::kMasked) {
      loss = ilsd_loss_masked(out_int, out_max, batch.targets, batch.mask, lambda);
    } else {
      loss = ilsd_loss_diffusion(out_int, out_max, batch.x0, batch.weights, lambda,
                                 ilsd.distill_space, cap.intermediate, cap.final);
    }
    total = loss.total;
    result.loss = loss.breakdown;
    result.loss.loop_int = loop_int;
  } else {
    Var out = model.predict_head(model.loop_forward(h, ctx, cfg.loop_max));
    total = cfg.mode == Mode::kMasked ? masked_cross_entropy(out, batch.targets, batch.mask)
                                      : weighted_mse(out, batch.x0, batch.weights);
    result.loss.gt_max = total.value().item();
    result.loss.lambda = lambda;
    result.loss.total = result.loss.gt_max;
  }
  result.block_applications = model.block_applications();
  if (!result.loss.finite()) throw TrainingDiverged(step, result.loss);
  ad::backward(total);
  result.grads = model.gradients();
  return result;
}

TrainStepResult train_step(BlockParams& params, AdamW& opt, const TrainBatch& batch,
                           const IlsdConfig& ilsd, std::int64_t step, Rng& rng) {
  LossAndGrads lg = compute_loss_and_grads(params, batch, ilsd, step, rng);
  TrainStepResult result;
  result.loss = lg.loss;
  result.block_applications = lg.block_applications;
  result.grad_norm = clip_global_norm(lg.grads, opt.config().grad_clip);
  if (!std::isfinite(result.grad_norm)) throw TrainingDiverged(step, result.loss);
  opt.step(params, lg.grads);
  return result;
}

}  // namespace elt
