#include <gtest/gtest.h>

#include "elt/accounting.hpp"
#include "elt/error.hpp"
#include "elt/model.hpp"

namespace elt {
namespace {

using ad::Var;

LoopConfig small(Mode mode = Mode::kMasked, Conditioning cond = Conditioning::kAdditive) {
  LoopConfig cfg;
  cfg.mode = mode;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.mlp_dim = 32;
  cfg.loop_max = 6;
  cfg.seq_len = 4;
  cfg.conditioning = cond;
  return cfg;
}

// Weights drawn wide enough that every op leaves a visible footprint, with a
// non-zero head so outputs depend on the features.
BlockParams noisy_params(const LoopConfig& cfg, std::uint64_t seed) {
  Rng rng = derive_rng(seed, 0);
  BlockParams p = BlockParams::init(cfg, rng);
  for (auto& t : p.tensors()) {
    for (double& v : t.value.values()) v += 0.3 * standard_normal(rng);
  }
  return p;
}

ModelInput masked_input(const LoopConfig& cfg) {
  ModelInput in;
  in.batch = 2;
  in.tokens = {0, 1, 4, 3, 2, 4, 4, 1};
  in.classes = {1, kNullClass};
  (void)cfg;
  return in;
}

ModelInput diffusion_input(const LoopConfig& cfg) {
  ModelInput in;
  in.batch = 2;
  Rng rng = derive_rng(4, 4);
  in.latents = Tensor({in.batch * cfg.seq_len, static_cast<std::size_t>(cfg.latent_dim)});
  for (double& v : in.latents.values()) v = standard_normal(rng);
  in.classes = {0, kNullClass};
  in.times = {0.25, 0.75};
  return in;
}

TEST(LoopForward, BaseCaseAndComposition) {
  const LoopConfig cfg = small();
  const BlockParams p = noisy_params(cfg, 1);
  LoopedModel m(p, LoopedModel::Binding::kFrozen);
  const ModelInput in = masked_input(cfg);
  const Var h = m.embed(in);
  const ConditioningContext ctx = m.condition(in);

  EXPECT_EQ(m.loop_forward(h, ctx, 1).value(), m.apply_block(h, ctx).value());
  EXPECT_EQ(m.loop_forward(h, ctx, 2).value(), m.apply_block(m.apply_block(h, ctx), ctx).value());
  EXPECT_EQ(m.loop_forward(h, ctx, 4).value(),
            m.loop_forward(m.loop_forward(h, ctx, 2), ctx, 2).value());
}

TEST(LoopForward, RejectsZeroLoops) {
  const LoopConfig cfg = small();
  LoopedModel m(noisy_params(cfg, 1), LoopedModel::Binding::kFrozen);
  const ModelInput in = masked_input(cfg);
  EXPECT_THROW((void)m.loop_forward(m.embed(in), m.condition(in), 0), ConfigError);
}

TEST(LoopForward, ZeroedWeightsLeaveResidualIdentity) {
  LoopConfig cfg = small();
  BlockParams p = BlockParams::zeros(cfg);
  // Zero conditioning as well, so the block is a pure residual identity.
  LoopedModel m(p, LoopedModel::Binding::kFrozen);
  Rng rng = derive_rng(9, 0);
  Tensor x({8, 16});
  for (double& v : x.values()) v = standard_normal(rng);
  const ModelInput in = masked_input(cfg);
  const Var y = m.apply_block(Var::constant(x), m.condition(in));
  EXPECT_EQ(y.value(), x);
}

class CaptureGrid : public ::testing::TestWithParam<std::tuple<int, int>> {};

TEST_P(CaptureGrid, PrefixEqualsIndependentForward) {
  const auto [n_layers, loop_max] = GetParam();
  LoopConfig cfg = small();
  cfg.n_layers = n_layers;
  cfg.loop_max = loop_max;
  const BlockParams p = noisy_params(cfg, 7 + n_layers);
  const ModelInput in = masked_input(cfg);
  for (int loop_int = 1; loop_int < loop_max; ++loop_int) {
    LoopedModel cap_model(p, LoopedModel::Binding::kFrozen);
    const LoopCapture cap =
        cap_model.loop_forward_capture(cap_model.embed(in), cap_model.condition(in), loop_max, loop_int);
    EXPECT_EQ(cap_model.block_applications(), static_cast<std::size_t>(loop_max));

    LoopedModel ref(p, LoopedModel::Binding::kFrozen);
    const Var h = ref.embed(in);
    const ConditioningContext ctx = ref.condition(in);
    EXPECT_EQ(cap.intermediate.value(), ref.loop_forward(h, ctx, loop_int).value());
    EXPECT_EQ(cap.final.value(), ref.loop_forward(h, ctx, loop_max).value());
  }
}

INSTANTIATE_TEST_SUITE_P(AllDepths, CaptureGrid,
                         ::testing::Combine(::testing::Values(1, 2, 4), ::testing::Values(2, 3, 4, 5, 6)));

TEST(LoopForwardCapture, RejectsOutOfRangeStudent) {
  const LoopConfig cfg = small();
  LoopedModel m(noisy_params(cfg, 1), LoopedModel::Binding::kFrozen);
  const ModelInput in = masked_input(cfg);
  const Var h = m.embed(in);
  const auto ctx = m.condition(in);
  EXPECT_THROW((void)m.loop_forward_capture(h, ctx, 4, 0), ConfigError);
  EXPECT_THROW((void)m.loop_forward_capture(h, ctx, 4, 4), ConfigError);
}

TEST(Head, SharedAcrossExitsAndShaped) {
  LoopConfig cfg = small();
  cfg.seq_len = 16;
  cfg.vocab_size = 32;
  cfg.n_classes = 3;
  const BlockParams p = noisy_params(cfg, 2);
  LoopedModel m(p, LoopedModel::Binding::kFrozen);
  ModelInput in;
  in.batch = 1;
  in.tokens.assign(16, 32);
  in.classes = {2};
  const Var h = m.embed(in);
  const auto ctx = m.condition(in);
  const ad::Node* head_w = m.head().w.node();
  for (int L = 1; L <= 3; ++L) {
    const Var out = m.predict_head(m.loop_forward(h, ctx, L));
    EXPECT_EQ(out.shape(), (Shape{16, 32}));
    EXPECT_EQ(m.head().w.node(), head_w);
  }
  EXPECT_EQ(m.predict_head(h).value(), m.predict_head(h).value());
}

TEST(Head, DiffusionOutputIsLatentShaped) {
  const LoopConfig cfg = small(Mode::kDiffusion, Conditioning::kModulated);
  LoopedModel m(noisy_params(cfg, 3), LoopedModel::Binding::kFrozen);
  const Var out = m.forward(diffusion_input(cfg), 3);
  EXPECT_EQ(out.shape(), (Shape{8, 2}));
}

TEST(Conditioning, SameContextSeenByEveryLoop) {
  for (auto cond : {Conditioning::kAdditive, Conditioning::kModulated}) {
    const LoopConfig cfg = small(Mode::kDiffusion, cond);
    LoopedModel m(noisy_params(cfg, 5), LoopedModel::Binding::kFrozen);
    std::vector<const ad::Node*> seen;
    m.set_loop_observer([&](int, const ConditioningContext& ctx) { seen.push_back(ctx.per_example.node()); });
    (void)m.forward(diffusion_input(cfg), 5);
    ASSERT_EQ(seen.size(), 5u);
    for (const ad::Node* n : seen) EXPECT_EQ(n, seen.front());
  }
}

TEST(Accounting, ParamCountMatchesMaterialisedTensors) {
  for (auto mode : {Mode::kMasked, Mode::kDiffusion}) {
    for (auto cond : {Conditioning::kAdditive, Conditioning::kModulated}) {
      const LoopConfig cfg = small(mode, cond);
      const BlockParams p = BlockParams::zeros(cfg);
      EXPECT_EQ(count_params(cfg).total(), p.numel());
      EXPECT_EQ(count_params(cfg).block, p.block_numel());
    }
  }
}

TEST(Accounting, ParamCountIndependentOfLoops) {
  LoopConfig a = small();
  a.n_layers = 8;
  a.loop_max = 4;
  LoopConfig b = a;
  b.loop_max = 1;
  b.loop_min = 1;
  EXPECT_EQ(count_params(a).total(), count_params(b).total());
  EXPECT_EQ(count_params(a).block, count_params(b).block);
}

TEST(Accounting, BlockRatioEightToThirtyTwo) {
  LoopConfig a = small();
  a.n_layers = 8;
  LoopConfig b = a;
  b.n_layers = 32;
  EXPECT_EQ(4 * count_params(a).block, count_params(b).block);
}

TEST(Accounting, DiffusionReferenceSizeNear539M) {
  LoopConfig cfg;
  cfg.mode = Mode::kDiffusion;
  cfg.conditioning = Conditioning::kModulated;
  cfg.d_model = 2048;
  cfg.mlp_dim = 8192;
  cfg.n_heads = 16;
  cfg.n_layers = 8;
  cfg.seq_len = 256;
  cfg.latent_dim = 16;
  cfg.n_classes = 1000;
  const double total = static_cast<double>(count_params(cfg).total());
  EXPECT_NEAR(total / 539e6, 1.0, 0.10) << total;
}

TEST(Accounting, FlopsLinearInLoopsAndIsoDepth) {
  LoopConfig n8 = small();
  n8.n_layers = 8;
  LoopConfig n32 = n8;
  n32.n_layers = 32;
  for (int L = 1; L <= 6; ++L) {
    EXPECT_EQ(count_flops(n8, 2 * L, 4).block, 2 * count_flops(n8, L, 4).block);
  }
  EXPECT_EQ(count_flops(n8, 4, 4).block, count_flops(n32, 1, 4).block);
}

TEST(Accounting, GenerationFlopsScaleWithSteps) {
  const LoopConfig cfg = small();
  const auto per_call = count_flops(cfg, 3, cfg.seq_len).total();
  EXPECT_EQ(generation_flops(cfg, 3, cfg.seq_len, 24, false), 24 * per_call);
  EXPECT_EQ(generation_flops(cfg, 3, cfg.seq_len, 512, true), 2 * 512 * per_call);
}

TEST(Config, ValidationCatchesBadShapes) {
  LoopConfig cfg = small();
  cfg.n_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small();
  cfg.loop_min = 5;
  cfg.loop_max = 4;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

}  // namespace
}  // namespace elt
