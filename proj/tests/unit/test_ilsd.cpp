#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numeric>

#include "elt/error.hpp"
#include "elt/experiment.hpp"
#include "elt/ilsd.hpp"
#include "elt/synthetic.hpp"

namespace elt {
namespace {

using ad::Var;

TEST(StudentDepth, UniformOverHalfOpenRange) {
  Rng rng = derive_rng(11, 0);
  std::map<int, int> counts;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++counts[sample_student_depth(rng, 2, 4)];
  ASSERT_EQ(counts.size(), 2u);
  EXPECT_NEAR(counts[2] / static_cast<double>(draws), 0.5, 0.01);
  EXPECT_NEAR(counts[3] / static_cast<double>(draws), 0.5, 0.01);
}

TEST(StudentDepth, SingletonAndSupport) {
  Rng rng = derive_rng(11, 1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_student_depth(rng, 3, 4), 3);
  int lo = 100, hi = 0;
  for (int i = 0; i < 10000; ++i) {
    const int v = sample_student_depth(rng, 1, 8);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_EQ(lo, 1);
  EXPECT_EQ(hi, 7);
  EXPECT_THROW((void)sample_student_depth(rng, 4, 4), ConfigError);
}

TEST(Lambda, EndpointsAndMidpoint) {
  EXPECT_EQ(lambda_at(0, 1000), 1.0);
  EXPECT_EQ(lambda_at(1000, 1000), 0.0);
  EXPECT_EQ(lambda_at(500, 1000), 0.5);
  EXPECT_EQ(lambda_at(2000, 1000), 0.0);
  EXPECT_THROW((void)lambda_at(0, 0), ConfigError);
}

TEST(MaskedLoss, LambdaOneDropsDistillation) {
  Var s = Var::leaf(Tensor::matrix(2, 3, {0.1, 0.5, -0.2, 1.0, 0.0, 0.3}));
  Var t = Var::leaf(Tensor::matrix(2, 3, {0.7, -0.1, 0.2, 0.0, 2.0, -1.0}));
  const std::vector<std::size_t> targets{2, 0};
  const std::vector<std::uint8_t> mask{1, 1};
  const IlsdLoss l = ilsd_loss_masked(s, t, targets, mask, 1.0);
  EXPECT_EQ(l.breakdown.total, l.breakdown.gt_max + l.breakdown.gt_int);
}

TEST(MaskedLoss, UniformTeacherGivesLnTwo) {
  Var s = Var::leaf(Tensor({1, 2}, 0.0));
  Var t = Var::leaf(Tensor({1, 2}, 0.0));
  const std::vector<std::size_t> targets{0};
  const std::vector<std::uint8_t> mask{1};
  const IlsdLoss l = ilsd_loss_masked(s, t, targets, mask, 0.5);
  EXPECT_NEAR(l.breakdown.distill, std::log(2.0), 1e-15);
}

TEST(MaskedLoss, EqualLogitsGiveTeacherEntropyAndZeroGradient) {
  const Tensor logits = Tensor::matrix(2, 3, {0.3, -1.2, 0.8, 2.0, 0.1, -0.5});
  Var s = Var::leaf(logits);
  Var t = Var::leaf(logits);
  const std::vector<std::size_t> targets{0, 1};
  const std::vector<std::uint8_t> mask{1, 1};
  const IlsdLoss l = ilsd_loss_masked(s, t, targets, mask, 0.0);
  double entropy = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.at(r, c));
    for (std::size_t c = 0; c < 3; ++c) {
      const double p = std::exp(logits.at(r, c)) / z;
      entropy -= p * std::log(p);
    }
  }
  EXPECT_NEAR(l.breakdown.distill, entropy / 2.0, 1e-14);
  ad::backward(l.distill);
  const Tensor gs = s.grad();
  for (double g : gs.values()) EXPECT_NEAR(g, 0.0, 1e-15);
  // The teacher sits behind stop_gradient.
  EXPECT_TRUE(t.grad().empty() || std::all_of(t.grad().values().begin(), t.grad().values().end(),
                                              [](double g) { return g == 0.0; }));
}

TEST(MaskedLoss, EmptyMaskRejected) {
  Var s = Var::leaf(Tensor({2, 3}, 0.0));
  const std::vector<std::size_t> targets{0, 1};
  const std::vector<std::uint8_t> mask{0, 0};
  EXPECT_THROW((void)ilsd_loss_masked(s, s, targets, mask, 0.5), ConfigError);
}

TEST(MaskedLoss, OnlyMaskedPositionsCount) {
  Var s = Var::leaf(Tensor::matrix(2, 2, {0.0, 0.0, 5.0, -5.0}));
  const std::vector<std::size_t> targets{0, 1};
  const std::vector<std::uint8_t> mask{1, 0};
  EXPECT_NEAR(masked_cross_entropy(s, targets, mask).value().item(), std::log(2.0), 1e-15);
}

TEST(DiffusionLoss, OneDimensionalArithmetic) {
  Var pi = Var::leaf(Tensor({1, 1}, 2.0));
  Var pm = Var::leaf(Tensor({1, 1}, 3.0));
  const Tensor x0({1, 1}, 0.0);
  const std::vector<double> w{1.0};
  const IlsdLoss l = ilsd_loss_diffusion(pi, pm, x0, w, 0.5);
  EXPECT_EQ(l.breakdown.gt_max, 9.0);
  EXPECT_EQ(l.breakdown.gt_int, 4.0);
  EXPECT_EQ(l.breakdown.distill, 1.0);
  EXPECT_EQ(l.breakdown.total, 11.5);
}

TEST(DiffusionLoss, IdenticalExitsAndZeroWeight) {
  Var p = Var::leaf(Tensor::matrix(2, 2, {0.5, -1.0, 2.0, 0.25}));
  const Tensor x0 = Tensor::matrix(2, 2, {1.0, 1.0, -1.0, 0.0});
  const std::vector<double> w{0.7};
  EXPECT_EQ(ilsd_loss_diffusion(p, p, x0, w, 0.3).breakdown.distill, 0.0);
  const std::vector<double> zero{0.0};
  const auto b = ilsd_loss_diffusion(p, Var::leaf(x0), x0, zero, 0.3).breakdown;
  EXPECT_EQ(b.gt_max, 0.0);
  EXPECT_EQ(b.gt_int, 0.0);
  EXPECT_EQ(b.distill, 0.0);
  EXPECT_EQ(b.total, 0.0);
}

TEST(DiffusionLoss, ShapeMismatchAndNonFiniteWeight) {
  Var a = Var::leaf(Tensor({2, 2}, 0.0));
  Var b = Var::leaf(Tensor({2, 3}, 0.0));
  const std::vector<double> w{1.0};
  EXPECT_THROW((void)ilsd_loss_diffusion(a, b, Tensor({2, 2}), w, 0.5), ShapeError);
  const std::vector<double> bad{std::nan("")};
  EXPECT_THROW((void)ilsd_loss_diffusion(a, a, Tensor({2, 2}), bad, 0.5), NumericalError);
}

// A 4-token, V=8 task: class c draws a cyclic chain with step 1 + c.
ExperimentConfig smoke_config(bool ilsd) {
  ExperimentConfig cfg;
  cfg.model.vocab_size = 8;
  cfg.model.d_model = 16;
  cfg.model.mlp_dim = 32;
  cfg.model.loop_max = 3;
  cfg.ilsd_enabled = ilsd;
  cfg.steps = 200;
  cfg.batch_size = 16;
  cfg.optimizer.lr = 3e-3;
  cfg.optimizer.warmup_steps = 20;
  cfg.data.peak = 0.95;
  cfg.init_std = 0.25;
  cfg.seed = 5;
  return cfg;
}

TEST(TrainStep, LossDecreasesOnFixedBatch) {
  const ExperimentConfig cfg = smoke_config(true);
  Rng init = derive_rng(cfg.seed, 1), data = derive_rng(cfg.seed, 2), step_rng = derive_rng(cfg.seed, 3);
  BlockParams params = BlockParams::init(cfg.model, init, cfg.init_std);
  AdamW opt(params, cfg.optimizer);
  const TrainBatch batch = make_train_batch(cfg.data, cfg.model, cfg.diffusion, 32, data);
  std::vector<double> totals;
  for (std::int64_t s = 0; s < 200; ++s) {
    const auto r = train_step(params, opt, batch, cfg.ilsd(), s, step_rng);
    EXPECT_EQ(r.block_applications, static_cast<std::size_t>(cfg.model.loop_max));
    // gt_max is comparable across steps; total mixes lambda-weighted terms.
    totals.push_back(r.loss.gt_max);
  }
  std::vector<double> window;
  for (std::size_t i = 0; i + 20 <= totals.size(); i += 20) {
    window.push_back(std::accumulate(totals.begin() + i, totals.begin() + i + 20, 0.0) / 20.0);
  }
  for (std::size_t i = 1; i < window.size(); ++i) {
    EXPECT_LT(window[i], window[i - 1]) << "window " << i;
  }
}

TEST(TrainStep, IdenticalSeedsGiveIdenticalLogs) {
  ExperimentConfig cfg = smoke_config(true);
  cfg.steps = 20;
  const TrainResult a = train(cfg), b = train(cfg);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].loss.total, b.log[i].loss.total);
    EXPECT_EQ(a.log[i].loss.loop_int, b.log[i].loss.loop_int);
    EXPECT_EQ(a.log[i].grad_norm, b.log[i].grad_norm);
  }
}

TEST(TrainStep, VanillaLogsZeroStudentTerms) {
  ExperimentConfig cfg = smoke_config(false);
  cfg.steps = 10;
  for (const auto& row : train(cfg).log) {
    EXPECT_EQ(row.loss.gt_int, 0.0);
    EXPECT_EQ(row.loss.distill, 0.0);
    EXPECT_EQ(row.loss.total, row.loss.gt_max);
  }
}

TEST(TrainStep, NonFiniteLossIsRejected) {
  const ExperimentConfig cfg = smoke_config(true);
  Rng init = derive_rng(1, 1), data = derive_rng(1, 2), step_rng = derive_rng(1, 3);
  BlockParams params = BlockParams::init(cfg.model, init);
  params.get("head.b")[0] = std::numeric_limits<double>::infinity();
  const BlockParams before = params;
  AdamW opt(params, cfg.optimizer);
  const TrainBatch batch = make_train_batch(cfg.data, cfg.model, cfg.diffusion, 4, data);
  const bool trap = ad::finite_trap_enabled();
  ad::set_finite_trap(false);
  EXPECT_THROW((void)train_step(params, opt, batch, cfg.ilsd(), 0, step_rng), NumericalError);
  ad::set_finite_trap(trap);
  for (std::size_t i = 0; i < params.tensors().size(); ++i) {
    EXPECT_EQ(params.tensors()[i].value, before.tensors()[i].value);
  }
}

TEST(Optimizer, WarmupThenConstant) {
  const LoopConfig cfg;
  Rng rng = derive_rng(0, 0);
  BlockParams p = BlockParams::init(cfg, rng);
  OptimizerConfig oc;
  oc.lr = 1e-3;
  oc.warmup_steps = 4;
  AdamW opt(p, oc);
  std::vector<Tensor> zeros;
  for (const auto& t : p.tensors()) zeros.emplace_back(t.value.shape(), 0.0);
  std::vector<double> lrs;
  for (int i = 0; i < 6; ++i) {
    lrs.push_back(opt.current_lr());
    opt.step(p, zeros);
  }
  EXPECT_DOUBLE_EQ(lrs[0], 0.25e-3);
  EXPECT_DOUBLE_EQ(lrs[3], 1e-3);
  EXPECT_DOUBLE_EQ(lrs[5], 1e-3);
}

TEST(Optimizer, ClipScalesToMaxNorm) {
  std::vector<Tensor> g{Tensor({2}, std::vector<double>{3.0, 4.0})};
  EXPECT_EQ(clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[0][1], 0.8, 1e-15);
}

}  // namespace
}  // namespace elt
