#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "elt/autograd.hpp"
#include "elt/error.hpp"
#include "elt/model.hpp"
#include "elt/optimizer.hpp"
#include "elt/rng.hpp"

namespace elt {

// Where the diffusion student is distilled against the teacher: on the x0
// predictions of the shared head, or directly on loop features.
enum class DistillSpace { kHeadOutput, kFeatures };

std::string to_string(DistillSpace s);
DistillSpace distill_space_from_string(const std::string& s);

struct IlsdConfig {
  bool enabled = true;  // false: plain looped training on the L_max output only
  std::int64_t total_steps = 1000;
  DistillSpace distill_space = DistillSpace::kHeadOutput;

  friend bool operator==(const IlsdConfig&, const IlsdConfig&) = default;
};

// Linear decay 1 -> 0 over total_steps, clamped to [0, 1].
double lambda_at(std::int64_t step, std::int64_t total_steps);

// Student depth, uniform over {loop_min, ..., loop_max - 1}.
int sample_student_depth(Rng& rng, int loop_min, int loop_max);

struct LossBreakdown {
  double gt_max = 0.0;   // ground truth at the teacher exit
  double gt_int = 0.0;   // ground truth at the student exit (unweighted)
  double distill = 0.0;  // student vs. stop-gradient teacher (unweighted)
  double lambda = 0.0;
  int loop_int = 0;      // 0 when ILSD is disabled
  double total = 0.0;    // gt_max + (lambda*gt_int + (1-lambda)*distill)

  bool finite() const;
};

// The joint loss plus each unweighted term as its own graph node, so callers
// can differentiate a single term.
struct IlsdLoss {
  ad::Var total;
  ad::Var gt_max, gt_int, distill;
  LossBreakdown breakdown;
};

// Masked-token objective. Cross-entropy terms are averaged over masked
// positions; the distillation term is the soft cross-entropy of the student
// log-softmax against the teacher softmax over the full vocabulary. Pass the
// live teacher output: its ground-truth term trains through it, while the
// distillation term sees it only through stop_gradient.
IlsdLoss ilsd_loss_masked(const ad::Var& logits_int, const ad::Var& logits_max,
                          std::span<const std::size_t> targets,
                          std::span<const std::uint8_t> mask, double lambda);

// Diffusion objective: w(t) * ||pred - x0||^2 summed over an example and
// averaged over the batch. With kFeatures, the distillation term compares
// feat_int against feat_max instead of the head outputs. Teacher handling is
// the same as for the masked objective.
IlsdLoss ilsd_loss_diffusion(const ad::Var& pred_int, const ad::Var& pred_max, const Tensor& x0,
                             std::span<const double> weights, double lambda,
                             DistillSpace space = DistillSpace::kHeadOutput,
                             const ad::Var& feat_int = {}, const ad::Var& feat_max = {});

// Ground truth only, used by the non-ILSD baseline and for evaluation.
ad::Var masked_cross_entropy(const ad::Var& logits, std::span<const std::size_t> targets,
                             std::span<const std::uint8_t> mask);
ad::Var weighted_mse(const ad::Var& pred, const Tensor& target, std::span<const double> weights);

// A prepared training batch. Masked mode uses targets/mask (one entry per
// row); diffusion mode uses x0 and per-example weights w(t).
struct TrainBatch {
  ModelInput input;
  std::vector<std::size_t> targets;
  std::vector<std::uint8_t> mask;
  Tensor x0;
  std::vector<double> weights;
};

struct TrainStepResult {
  LossBreakdown loss;
  double grad_norm = 0.0;  // before clipping
  std::size_t block_applications = 0;
};

class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(std::int64_t step, LossBreakdown loss);
  std::int64_t step() const noexcept { return step_; }
  const LossBreakdown& loss() const noexcept { return loss_; }

 private:
  std::int64_t step_;
  LossBreakdown loss_;
};

// Everything one step computes before touching the optimizer.
struct LossAndGrads {
  LossBreakdown loss;
  std::vector<Tensor> grads;
  std::size_t block_applications = 0;
};

// One capture forward (L_max loops with the student state saved at L_int),
// the joint loss, and one backward. Gradients of both exits land on the same
// shared parameters.
LossAndGrads compute_loss_and_grads(const BlockParams& params, const TrainBatch& batch,
                                    const IlsdConfig& ilsd, std::int64_t step, Rng& rng);

// compute_loss_and_grads + global-norm clipping + one AdamW update. Throws
// TrainingDiverged (parameters untouched) on a non-finite loss or gradient.
TrainStepResult train_step(BlockParams& params, AdamW& opt, const TrainBatch& batch,
                           const IlsdConfig& ilsd, std::int64_t step, Rng& rng);

}  // namespace elt
