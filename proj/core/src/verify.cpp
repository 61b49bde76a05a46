#include "elt/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "elt/accounting.hpp"
#include "elt/checkpoint.hpp"
#include "elt/diffusion.hpp"
#include "elt/error.hpp"
#include "elt/eval.hpp"
#include "elt/experiment.hpp"
#include "elt/ilsd.hpp"
#include "elt/masked.hpp"
#include "elt/synthetic.hpp"

namespace elt {

using ad::Var;

CaptureFn default_capture() {
  return [](LoopedModel& model, const Var& x, const ConditioningContext& ctx, int loop_max,
            int loop_int) { return model.loop_forward_capture(x, ctx, loop_max, loop_int); };
}

double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12 * h);
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor) {
  if (analytic.size() != numeric.size()) throw ShapeError("max_relative_error: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
  }
  return worst;
}

namespace {

struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw CheckFailed(what);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

LoopConfig tiny_config(Mode mode, int n_layers, int d_model, int loop_max,
                       Conditioning cond = Conditioning::kAdditive) {
  LoopConfig cfg;
  cfg.mode = mode;
  cfg.n_layers = n_layers;
  cfg.d_model = d_model;
  cfg.n_heads = 2;
  cfg.mlp_dim = 2 * d_model;
  cfg.loop_min = 1;
  cfg.loop_max = loop_max;
  cfg.seq_len = 4;
  cfg.vocab_size = 4;
  cfg.latent_dim = 2;
  cfg.n_classes = 2;
  cfg.conditioning = cond;
  return cfg;
}

// Standard init plus Gaussian jitter on every entry, so that no parameter
// (zero-initialised head and modulation included) is trivially dead.
BlockParams jittered_params(const LoopConfig& cfg, std::uint64_t seed, double jitter) {
  Rng rng = derive_rng(seed, 7);
  BlockParams p = BlockParams::init(cfg, rng);
  for (auto& t : p.tensors()) {
    for (double& v : t.value.values()) v += jitter * standard_normal(rng);
  }
  return p;
}

DataSpec data_for(const LoopConfig& cfg) {
  DataSpec spec;
  if (cfg.mode == Mode::kMasked) {
    spec.kind = "markov-grid";
    spec.grid = {2, static_cast<std::size_t>(cfg.seq_len) / 2};
  } else {
    spec.kind = "gaussian-mixture";
    const auto D = static_cast<std::size_t>(cfg.seq_len * cfg.latent_dim);
    spec.mixture = {{0.5, 0.5}, {std::vector<double>(D, -1.0), std::vector<double>(D, 1.0)},
                    {std::vector<double>(D, 0.3), std::vector<double>(D, 0.3)}};
  }
  return spec;
}

// A batch that exercises every token id (MASK included) and every class row
// (null included).
ModelInput covering_input(const LoopConfig& cfg, Rng& rng) {
  ModelInput in;
  in.batch = static_cast<std::size_t>(cfg.n_classes + 1);
  for (std::size_t b = 0; b < in.batch; ++b) {
    in.classes.push_back(b == 0 ? kNullClass : static_cast<int>(b) - 1);
  }
  const std::size_t rows = in.batch * static_cast<std::size_t>(cfg.seq_len);
  if (cfg.mode == Mode::kMasked) {
    for (std::size_t r = 0; r < rows; ++r) in.tokens.push_back(r % static_cast<std::size_t>(cfg.vocab_size + 1));
  } else {
    in.latents = Tensor({rows, static_cast<std::size_t>(cfg.latent_dim)}, 0.0);
    for (double& v : in.latents.values()) v = standard_normal(rng);
    for (std::size_t b = 0; b < in.batch; ++b) in.times.push_back(0.2 + 0.3 * static_cast<double>(b));
  }
  return in;
}

double max_abs(const std::vector<Tensor>& ts) {
  double m = 0.0;
  for (const auto& t : ts) {
    for (double v : t.values()) m = std::max(m, std::abs(v));
  }
  return m;
}

double max_abs_diff(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  require(a.size() == b.size(), "gradient lists differ in length");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i].shape() == b[i].shape(), "gradient shapes differ");
    for (std::size_t j = 0; j < a[i].numel(); ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  }
  return m;
}

// ---------------------------------------------------------------- numerics

using OpFn = std::function<Var(const std::vector<Var>&)>;

double primitive_error(const std::string& name, std::vector<Tensor> inputs, const OpFn& op,
                       Rng& rng) {
  auto as_constants = [](const std::vector<Tensor>& ins) {
    std::vector<Var> vs;
    for (const auto& t : ins) vs.push_back(Var::constant(t));
    return vs;
  };
  const Tensor probe = op(as_constants(inputs)).value();
  Tensor proj(probe.shape(), 0.0);
  for (double& v : proj.values()) v = standard_normal(rng);
  auto loss = [&](const std::vector<Tensor>& ins) {
    const Tensor out = op(as_constants(ins)).value();
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * proj[i];
    return s;
  };
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(Var::leaf(t));
  ad::backward(ad::sum(ad::mul(op(leaves), Var::constant(proj))));
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = leaves[i].grad();
    std::vector<double> numeric(inputs[i].numel());
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      const double x0 = inputs[i][j];
      numeric[j] = central_difference(
          [&](double x) {
            auto ins = inputs;
            ins[i][j] = x;
            return loss(ins);
          },
          x0, 1e-3);
    }
    worst = std::max(worst, max_relative_error(analytic.values(), numeric));
  }
  require(worst < 1e-5, name + ": max relative error " + fmt(worst));
  return worst;
}

std::string check_primitive_gradients(const VerifyOptions&) {
  Rng rng = derive_rng(101, 0);
  auto rnd = [&](Shape s, double scale = 1.0) {
    Tensor t(std::move(s), 0.0);
    for (double& v : t.values()) v = scale * standard_normal(rng);
    return t;
  };
  const std::vector<std::size_t> gather_idx{0, 2, 2, 4};
  const std::vector<std::size_t> pick_idx{1, 0, 3};
  const std::vector<double> row_w{0.5, -1.0, 2.0};
  double worst = 0.0;
  auto run = [&](const std::string& name, std::vector<Tensor> ins, const OpFn& op) {
    worst = std::max(worst, primitive_error(name, std::move(ins), op, rng));
  };
  run("add", {rnd({3, 4}), rnd({3, 4})}, [](auto& v) { return ad::add(v[0], v[1]); });
  run("sub", {rnd({3, 4}), rnd({3, 4})}, [](auto& v) { return ad::sub(v[0], v[1]); });
  run("mul", {rnd({3, 4}), rnd({3, 4})}, [](auto& v) { return ad::mul(v[0], v[1]); });
  run("scale", {rnd({3, 4})}, [](auto& v) { return ad::scale(v[0], 1.7); });
  run("square", {rnd({3, 4})}, [](auto& v) { return ad::square(v[0]); });
  run("add_bias", {rnd({3, 4}), rnd({4})}, [](auto& v) { return ad::add_bias(v[0], v[1]); });
  run("matmul", {rnd({3, 4}), rnd({4, 5})}, [](auto& v) { return ad::matmul(v[0], v[1]); });
  run("gelu", {rnd({3, 4}, 2.0)}, [](auto& v) { return ad::gelu(v[0]); });
  run("layer_norm", {rnd({3, 6}), rnd({6}), rnd({6})},
      [](auto& v) { return ad::layer_norm(v[0], v[1], v[2]); });
  run("softmax_rows", {rnd({3, 5})}, [](auto& v) { return ad::softmax_rows(v[0]); });
  run("log_softmax_rows", {rnd({3, 5})}, [](auto& v) { return ad::log_softmax_rows(v[0]); });
  run("gather_rows", {rnd({5, 3})}, [&](auto& v) { return ad::gather_rows(v[0], gather_idx); });
  run("slice_cols", {rnd({3, 6})}, [](auto& v) { return ad::slice_cols(v[0], 1, 3); });
  run("attention", {rnd({6, 4}), rnd({6, 4}), rnd({6, 4})},
      [](auto& v) { return ad::attention(v[0], v[1], v[2], 2, 3, 2); });
  run("sum", {rnd({3, 4})}, [](auto& v) { return ad::sum(v[0]); });
  run("row_sum", {rnd({3, 4})}, [](auto& v) { return ad::row_sum(v[0]); });
  run("scale_rows", {rnd({3, 4})}, [&](auto& v) { return ad::scale_rows(v[0], row_w); });
  run("pick", {rnd({3, 4})}, [&](auto& v) { return ad::pick(v[0], pick_idx); });
  return "18 primitives, max rel err " + fmt(worst);
}

std::string check_determinism(const VerifyOptions&) {
  const LoopConfig cfg = tiny_config(Mode::kMasked, 2, 8, 3);
  const BlockParams params = jittered_params(cfg, 3, 0.1);
  Rng drng = derive_rng(3, 1);
  const TrainBatch batch = make_train_batch(data_for(cfg), cfg, {}, 4, drng);
  auto once = [&] {
    Rng r = derive_rng(3, 2);
    return compute_loss_and_grads(params, batch, IlsdConfig{true, 10}, 4, r);
  };
  const auto a = once(), b = once();
  require(a.loss.total == b.loss.total, "loss differs between identical runs");
  for (std::size_t i = 0; i < a.grads.size(); ++i) {
    require(a.grads[i] == b.grads[i], "gradient " + params.tensors()[i].name + " differs");
  }
  LoopedModel m1(params, LoopedModel::Binding::kFrozen), m2(params, LoopedModel::Binding::kFrozen);
  require(m1.forward(batch.input, 3).value() == m2.forward(batch.input, 3).value(),
          "forward values differ");
  return "loss, gradients and forward values bit-identical";
}

std::string check_stop_grad_zero_flow(const VerifyOptions&) {
  Rng rng = derive_rng(5, 0);
  auto rnd = [&](Shape s) {
    Tensor t(std::move(s), 0.0);
    for (double& v : t.values()) v = standard_normal(rng);
    return t;
  };
  Var p = Var::leaf(rnd({3, 3})), q = Var::leaf(rnd({3, 3})), x = Var::constant(rnd({3, 3}));
  // p reaches the root only through stop_gradient; q also directly.
  Var hidden = ad::stop_gradient(ad::matmul(p, ad::gelu(q)));
  Var root = ad::sum(ad::add(ad::mul(hidden, x), ad::square(q)));
  ad::backward(root);
  double p_sum = 0.0, q_sum = 0.0;
  const Tensor gp = p.grad(), gq = q.grad();
  for (double v : gp.values()) p_sum += std::abs(v);
  for (double v : gq.values()) q_sum += std::abs(v);
  require(p_sum == 0.0, "gradient leaked through stop_gradient: " + fmt(p_sum));
  require(q_sum > 0.0, "direct path produced no gradient");
  return "sum |grad| through stop_gradient == 0";
}

// ------------------------------------------------------------- looped_core

std::string check_prefix_capture(const VerifyOptions& opts) {
  int cases = 0;
  for (int n_layers : {1, 2, 4}) {
    for (int loop_max = 2; loop_max <= 6; ++loop_max) {
      const LoopConfig cfg = tiny_config(Mode::kMasked, n_layers, 16, loop_max);
      const BlockParams params = jittered_params(cfg, 17 + n_layers, 0.05);
      Rng rng = derive_rng(19, static_cast<std::uint64_t>(loop_max));
      const ModelInput in = covering_input(cfg, rng);
      for (int loop_int = 1; loop_int < loop_max; ++loop_int) {
        LoopedModel model(params, LoopedModel::Binding::kFrozen);
        const Var x = model.embed(in);
        const ConditioningContext ctx = model.condition(in);
        const LoopCapture cap = opts.capture(model, x, ctx, loop_max, loop_int);
        const std::string where = "N=" + std::to_string(n_layers) + " L_max=" +
                                  std::to_string(loop_max) + " L_int=" + std::to_string(loop_int);
        require(model.block_applications() == static_cast<std::size_t>(loop_max),
                where + ": capture used " + std::to_string(model.block_applications()) +
                    " block applications");
        LoopedModel ref(params, LoopedModel::Binding::kFrozen);
        const Var rx = ref.embed(in);
        const ConditioningContext rctx = ref.condition(in);
        require(cap.intermediate.defined() &&
                    cap.intermediate.value() == ref.loop_forward(rx, rctx, loop_int).value(),
                where + ": intermediate state differs from loop_forward(L_int)");
        require(cap.final.defined() &&
                    cap.final.value() == ref.loop_forward(rx, rctx, loop_max).value(),
                where + ": final state differs from loop_forward(L_max)");
        ++cases;
      }
    }
  }
  return std::to_string(cases) + " (N, L_max, L_int) cases bit-identical";
}

std::string check_param_count_loop_independent(const VerifyOptions&) {
  for (Mode mode : {Mode::kMasked, Mode::kDiffusion}) {
    for (Conditioning cond : {Conditioning::kAdditive, Conditioning::kModulated}) {
      LoopConfig cfg = tiny_config(mode, 2, 16, 1, cond);
      const ParamCount base = count_params(cfg);
      Rng rng = derive_rng(1, 1);
      const std::size_t base_numel = BlockParams::init(cfg, rng).numel();
      require(base.total() == base_numel, "closed-form count " + std::to_string(base.total()) +
                                              " != materialised " + std::to_string(base_numel));
      for (int L = 1; L <= 12; ++L) {
        cfg.loop_max = L;
        const ParamCount c = count_params(cfg);
        require(c.block == base.block && c.total() == base.total(),
                "parameter count changed with loop_max=" + std::to_string(L));
        Rng r2 = derive_rng(1, 1);
        require(BlockParams::init(cfg, r2).block_numel() == base.block,
                "materialised block size changed with loop_max");
      }
    }
  }
  return "identical for loop_max 1..12 in both modes and conditionings";
}

std::string check_block_param_ratio(const VerifyOptions&) {
  LoopConfig a = tiny_config(Mode::kMasked, 8, 64, 4), b = a;
  b.n_layers = 32;
  const auto pa = count_params(a).block, pb = count_params(b).block;
  require(pb == 4 * pa, "N=32 block params " + std::to_string(pb) + " != 4 x " + std::to_string(pa));
  return "N=8: " + std::to_string(pa) + ", N=32: " + std::to_string(pb);
}

std::string check_flops_linear(const VerifyOptions&) {
  for (int n_layers : {1, 2, 4}) {
    const LoopConfig cfg = tiny_config(Mode::kDiffusion, n_layers, 32, 8);
    const auto one = count_flops(cfg, 1, cfg.seq_len).block;
    for (int L = 1; L <= 16; ++L) {
      require(count_flops(cfg, L, cfg.seq_len).block == static_cast<std::uint64_t>(L) * one,
              "block FLOPs not linear at L=" + std::to_string(L));
      LoopConfig deep = cfg;
      deep.n_layers = n_layers * L;
      require(count_flops(deep, 1, cfg.seq_len).block == count_flops(cfg, L, cfg.seq_len).block,
              "iso-depth FLOPs differ for N=" + std::to_string(n_layers) + " L=" + std::to_string(L));
    }
  }
  return "FLOPs(N, L) == L * FLOPs(N, 1) == FLOPs(N*L, 1)";
}

std::string check_conditioning_stationarity(const VerifyOptions&) {
  int compared = 0;
  for (Conditioning cond : {Conditioning::kAdditive, Conditioning::kModulated}) {
    const LoopConfig cfg = tiny_config(Mode::kDiffusion, 2, 8, 5, cond);
    const BlockParams params = jittered_params(cfg, 23, 0.1);
    Rng rng = derive_rng(23, 1);
    const ModelInput in = covering_input(cfg, rng);
    LoopedModel model(params, LoopedModel::Binding::kFrozen);
    std::vector<std::vector<Tensor>> seen;
    model.set_loop_observer([&](int, const ConditioningContext& ctx) {
      std::vector<Tensor> vals{ctx.per_example.value()};
      if (ctx.rows.defined()) vals.push_back(ctx.rows.value());
      for (const auto& layer : ctx.modulation) {
        for (const auto& v : layer) vals.push_back(v.value());
      }
      seen.push_back(std::move(vals));
    });
    (void)model.forward(in, cfg.loop_max);
    require(seen.size() == static_cast<std::size_t>(cfg.loop_max), "observer not called once per loop");
    for (const auto& s : seen) {
      require(s.size() == seen.front().size(), "conditioning arity changed between loops");
      for (std::size_t i = 0; i < s.size(); ++i) {
        require(s[i] == seen.front()[i], "conditioning changed between loops");
        ++compared;
      }
    }
  }
  return std::to_string(compared) + " conditioning tensors equal across loops";
}

// ------------------------------------------------------------- ilsd_train

// ILSD objective at `p` with the teacher pinned to precomputed values. This is
// the function whose gradient the stop-gradient training loss should produce:
// gt_max still sees p, the distillation target does not.
double frozen_teacher_total(const BlockParams& p, const TrainBatch& batch, int loop_int,
                            double lambda, DistillSpace space, const Tensor& teacher_out,
                            const Tensor& teacher_feat) {
  const LoopConfig& cfg = p.config();
  LoopedModel model(p, LoopedModel::Binding::kFrozen);
  const Var h = model.embed(batch.input);
  const ConditioningContext ctx = model.condition(batch.input);
  LoopCapture cap = model.loop_forward_capture(h, ctx, cfg.loop_max, loop_int);
  const Var out_int = model.predict_head(cap.intermediate);
  const Var out_max = model.predict_head(cap.final);
  const IlsdLoss live =
      cfg.mode == Mode::kMasked
          ? ilsd_loss_masked(out_int, out_max, batch.targets, batch.mask, lambda)
          : ilsd_loss_diffusion(out_int, out_max, batch.x0, batch.weights, lambda, space,
                                cap.intermediate, cap.final);
  const Var t_out = Var::constant(teacher_out);
  const IlsdLoss pinned =
      cfg.mode == Mode::kMasked
          ? ilsd_loss_masked(out_int, t_out, batch.targets, batch.mask, lambda)
          : ilsd_loss_diffusion(out_int, t_out, batch.x0, batch.weights, lambda, space,
                                cap.intermediate, Var::constant(teacher_feat));
  return live.breakdown.gt_max + lambda * pinned.breakdown.gt_int +
         (1.0 - lambda) * pinned.breakdown.distill;
}

double ilsd_gradient_error(const LoopConfig& cfg, DistillSpace space) {
  const BlockParams params = jittered_params(cfg, 29, 0.2);
  Rng drng = derive_rng(29, 1);
  const TrainBatch batch = make_train_batch(data_for(cfg), cfg, DiffusionSpec{16}, 3, drng);
  const IlsdConfig ilsd{true, 10, space};
  Rng r = derive_rng(29, 2);
  const LossAndGrads base = compute_loss_and_grads(params, batch, ilsd, 3, r);
  require(base.loss.distill > 0.0 && base.loss.gt_int > 0.0, "degenerate loss terms");
  const int loop_int = base.loss.loop_int;
  const double lambda = base.loss.lambda;

  Tensor teacher_out, teacher_feat;
  {
    LoopedModel model(params, LoopedModel::Binding::kFrozen);
    const Var h = model.embed(batch.input);
    const ConditioningContext ctx = model.condition(batch.input);
    LoopCapture cap = model.loop_forward_capture(h, ctx, cfg.loop_max, loop_int);
    teacher_out = model.predict_head(cap.final).value();
    teacher_feat = cap.final.value();
  }
  const double total0 =
      frozen_teacher_total(params, batch, loop_int, lambda, space, teacher_out, teacher_feat);
  require(std::abs(total0 - base.loss.total) <= 1e-12 * std::max(1.0, std::abs(total0)),
          "pinned-teacher objective disagrees with the training loss");

  std::vector<double> analytic, numeric;
  BlockParams work = params;
  for (std::size_t t = 0; t < params.tensors().size(); ++t) {
    for (std::size_t e = 0; e < params.tensors()[t].value.numel(); ++e) {
      const double x0 = params.tensors()[t].value[e];
      numeric.push_back(central_difference(
          [&](double x) {
            work.tensors()[t].value[e] = x;
            const double v =
                frozen_teacher_total(work, batch, loop_int, lambda, space, teacher_out, teacher_feat);
            work.tensors()[t].value[e] = x0;
            return v;
          },
          x0, 1e-3));
      analytic.push_back(base.grads[t][e]);
    }
  }
  return max_relative_error(analytic, numeric);
}

std::string check_ilsd_gradient(const VerifyOptions&) {
  const double e_masked =
      ilsd_gradient_error(tiny_config(Mode::kMasked, 2, 8, 3), DistillSpace::kHeadOutput);
  const double e_diff = ilsd_gradient_error(
      tiny_config(Mode::kDiffusion, 2, 8, 3, Conditioning::kModulated), DistillSpace::kHeadOutput);
  const double e_feat =
      ilsd_gradient_error(tiny_config(Mode::kDiffusion, 2, 8, 3), DistillSpace::kFeatures);
  const double worst = std::max({e_masked, e_diff, e_feat});
  require(worst < 1e-5, "max relative error masked " + fmt(e_masked) + ", diffusion " +
                            fmt(e_diff) + ", features " + fmt(e_feat));
  return "masked " + fmt(e_masked) + ", diffusion " + fmt(e_diff) + ", diffusion/features " +
         fmt(e_feat);
}

// Builds the ILSD graph on a fresh trainable model and returns the
// gradients of root_of(loss).
struct GraphSetup {
  const BlockParams& params;
  const TrainBatch& batch;
  int loop_int;
  double lambda;
  DistillSpace space = DistillSpace::kHeadOutput;
};

std::vector<Tensor> ilsd_grads(const GraphSetup& g, bool detach_teacher,
                               const std::function<Var(const IlsdLoss&)>& root_of,
                               IlsdLoss* loss_out = nullptr) {
  const LoopConfig& cfg = g.params.config();
  LoopedModel model(g.params, LoopedModel::Binding::kTrainable);
  const Var h = model.embed(g.batch.input);
  const ConditioningContext ctx = model.condition(g.batch.input);
  LoopCapture cap = model.loop_forward_capture(h, ctx, cfg.loop_max, g.loop_int);
  const Var out_int = model.predict_head(cap.intermediate);
  Var out_max = model.predict_head(cap.final);
  Var feat_max = cap.final;
  if (detach_teacher) {
    out_max = Var::constant(Tensor(out_max.value()));
    feat_max = Var::constant(Tensor(feat_max.value()));
  }
  IlsdLoss loss = cfg.mode == Mode::kMasked
                      ? ilsd_loss_masked(out_int, out_max, g.batch.targets, g.batch.mask, g.lambda)
                      : ilsd_loss_diffusion(out_int, out_max, g.batch.x0, g.batch.weights, g.lambda,
                                            g.space, cap.intermediate, feat_max);
  ad::backward(root_of(loss));
  if (loss_out) *loss_out = loss;
  return model.gradients();
}

std::string check_teacher_insulation(const VerifyOptions&) {
  int cases = 0;
  for (Mode mode : {Mode::kMasked, Mode::kDiffusion}) {
    for (DistillSpace space : {DistillSpace::kHeadOutput, DistillSpace::kFeatures}) {
      if (mode == Mode::kMasked && space == DistillSpace::kFeatures) continue;
      const LoopConfig cfg = tiny_config(mode, 2, 8, 4);
      const BlockParams params = jittered_params(cfg, 31, 0.2);
      Rng drng = derive_rng(31, 1);
      const TrainBatch batch = make_train_batch(data_for(cfg), cfg, DiffusionSpec{16}, 3, drng);
      for (int loop_int = 1; loop_int < cfg.loop_max; ++loop_int) {
        const GraphSetup g{params, batch, loop_int, 0.3, space};
        auto distill = [](const IlsdLoss& l) { return l.distill; };
        const auto live = ilsd_grads(g, false, distill);
        const auto detached = ilsd_grads(g, true, distill);
        require(max_abs(live) > 0.0, "distillation gradient is identically zero");
        for (std::size_t i = 0; i < live.size(); ++i) {
          require(live[i] == detached[i], "gradient of " + params.tensors()[i].name +
                                              " differs with a detached teacher (L_int=" +
                                              std::to_string(loop_int) + ")");
        }
        ++cases;
      }
    }
  }
  return std::to_string(cases) + " cases elementwise identical";
}

std::string check_lambda_endpoints(const VerifyOptions&) {
  for (std::int64_t total : {2, 10, 1000, 12345678}) {
    require(lambda_at(0, total) == 1.0, "lambda(0) != 1");
    require(lambda_at(total, total) == 0.0, "lambda(end) != 0");
    require(lambda_at(total + 5, total) == 0.0, "lambda past the end is not clamped to 0");
    if (total % 2 == 0) require(lambda_at(total / 2, total) == 0.5, "lambda(mid) != 0.5");
  }
  double worst = 0.0;
  for (Mode mode : {Mode::kMasked, Mode::kDiffusion}) {
    const LoopConfig cfg = tiny_config(mode, 2, 8, 3);
    const BlockParams params = jittered_params(cfg, 37, 0.2);
    Rng drng = derive_rng(37, 1);
    const TrainBatch batch = make_train_batch(data_for(cfg), cfg, DiffusionSpec{16}, 3, drng);
    auto total = [](const IlsdLoss& l) { return l.total; };
    // lambda = 1: gt_max + gt_int.
    const auto g1 = ilsd_grads({params, batch, 1, 1.0}, false, total);
    const auto r1 = ilsd_grads({params, batch, 1, 1.0}, false,
                               [](const IlsdLoss& l) { return ad::add(l.gt_max, l.gt_int); });
    // lambda = 0: gt_max + distill.
    const auto g0 = ilsd_grads({params, batch, 2, 0.0}, false, total);
    const auto r0 = ilsd_grads({params, batch, 2, 0.0}, false,
                               [](const IlsdLoss& l) { return ad::add(l.gt_max, l.distill); });
    const double s1 = std::max(1.0, max_abs(r1)), s0 = std::max(1.0, max_abs(r0));
    const double d1 = max_abs_diff(g1, r1) / s1, d0 = max_abs_diff(g0, r0) / s0;
    require(d1 <= 1e-12, "lambda=1 gradient differs from the two-exit ground-truth gradient by " + fmt(d1));
    require(d0 <= 1e-12, "lambda=0 gradient differs from gt_max + distill by " + fmt(d0));
    worst = std::max({worst, d1, d0});
  }
  return "endpoints exact; reduced objectives agree to " + fmt(worst);
}

std::string check_loss_decomposition(const VerifyOptions&) {
  int cases = 0;
  for (Mode mode : {Mode::kMasked, Mode::kDiffusion}) {
    const LoopConfig cfg = tiny_config(mode, 2, 8, 4);
    const BlockParams params = jittered_params(cfg, 41, 0.2);
    Rng drng = derive_rng(41, 1);
    const TrainBatch batch = make_train_batch(data_for(cfg), cfg, DiffusionSpec{16}, 4, drng);
    for (double lambda : {0.0, 0.25, 1.0 / 3.0, 0.9, 1.0}) {
      IlsdLoss loss;
      (void)ilsd_grads({params, batch, 2, lambda}, false, [](const IlsdLoss& l) { return l.total; },
                       &loss);
      const auto& b = loss.breakdown;
      const double expect = b.gt_max + (lambda * b.gt_int + (1.0 - lambda) * b.distill);
      const double ulp = std::nextafter(std::abs(expect), INFINITY) - std::abs(expect);
      require(std::abs(b.total - expect) <= ulp, "total " + fmt(b.total) + " != recomposed " + fmt(expect));
      require(loss.total.value().item() == b.total, "graph total differs from reported total");
      ++cases;
    }
  }
  return std::to_string(cases) + " cases within 1 ulp";
}

std::string check_shared_coupling(const VerifyOptions&) {
  int tensors = 0;
  for (Mode mode : {Mode::kMasked, Mode::kDiffusion}) {
    for (Conditioning cond : {Conditioning::kAdditive, Conditioning::kModulated}) {
      const LoopConfig cfg = tiny_config(mode, 2, 8, 3, cond);
      const BlockParams params = jittered_params(cfg, 43, 0.2);
      Rng rng = derive_rng(43, 1);
      const ModelInput in = covering_input(cfg, rng);
      auto exits = [&](const BlockParams& p) {
        LoopedModel m(p, LoopedModel::Binding::kFrozen);
        const Var x = m.embed(in);
        const auto cap = m.loop_forward_capture(x, m.condition(in), cfg.loop_max, 1);
        return std::pair{m.predict_head(cap.intermediate).value(), m.predict_head(cap.final).value()};
      };
      const auto [base_int, base_max] = exits(params);
      for (std::size_t t = 0; t < params.tensors().size(); ++t) {
        BlockParams p = params;
        for (double& v : p.tensors()[t].value.values()) v += 1e-4 * standard_normal(rng);
        const auto [f_int, f_max] = exits(p);
        const std::string& name = params.tensors()[t].name;
        require(!(f_int == base_int), name + " does not influence the student exit");
        require(!(f_max == base_max), name + " does not influence the teacher exit");
        ++tensors;
      }
    }
  }
  return std::to_string(tensors) + " parameter tensors move both exits";
}

// -------------------------------------------------------------- masked_gen

std::string check_masked_schedules(const VerifyOptions&) {
  for (int K = 1; K <= 64; ++K) {
    require(sampling_temperature(K - 1, K, 0.5, 0.8) == 0.5, "STemp(K-1) != bias for K=" + std::to_string(K));
    for (int k = 0; k + 1 < K; ++k) {
      require(sampling_temperature(k + 1, K, 0.5, 0.8) < sampling_temperature(k, K, 0.5, 0.8),
              "STemp not strictly decreasing at K=" + std::to_string(K));
    }
    for (int n = 1; n <= 64; ++n) {
      require(cosine_mask_count(K - 1, K, n) == 0, "mask count at the final step is not 0");
      for (int k = 0; k + 1 < K; ++k) {
        require(cosine_mask_count(k + 1, K, n) <= cosine_mask_count(k, K, n),
                "mask count increases at K=" + std::to_string(K) + " n=" + std::to_string(n));
      }
    }
  }
  return "STemp(K-1)=0.5, strictly decreasing; mask count monotone, 0 at end (K<=64, n<=64)";
}

std::string check_decode_invariants(const VerifyOptions&) {
  const auto source = MarkovGridSource::cyclic({2, 3}, 4, 2, 0.8, 0.25);
  EnumerationOracle oracle(source);
  DecodeOptions opts;
  opts.steps = 5;
  int decodes = 0;
  for (RevealOrder order : {RevealOrder::kConfidence, RevealOrder::kUniform}) {
    opts.order = order;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng = derive_rng(47, seed);
      TokenGrid grid = TokenGrid::fully_masked({2, 3}, 4);
      std::size_t revealed_total = 0;
      for (int k = 0; k < opts.steps; ++k) {
        const TokenGrid next = sample_and_mask(oracle.logits(grid, 1, 1), grid, k, opts, rng);
        for (std::size_t i = 0; i < grid.size(); ++i) {
          if (!grid.is_masked(i)) require(next.at(i) == grid.at(i), "a revealed token changed");
        }
        revealed_total += grid.masked_count() - next.masked_count();
        grid = next;
      }
      require(grid.masked_count() == 0, "decode finished with masked tokens");
      require(revealed_total == grid.size(), "revealed counts do not sum to n_tokens");
      ++decodes;
    }
  }
  return std::to_string(decodes) + " decodes: revealed tokens immutable, counts sum to n";
}

std::string check_cfg_consistency(const VerifyOptions&) {
  Rng rng = derive_rng(53, 0);
  Tensor cond({6, 5}, 0.0);
  for (double& v : cond.values()) v = 3.0 * standard_normal(rng);
  for (double s : {-2.0, 0.0, 0.5, 1.0, 3.0, 7.5, 100.0}) {
    require(cfg_logits(cond, cond, s) == cond, "guided logits differ from agreeing inputs at s=" + fmt(s));
  }
  return "exact for s in {-2, 0, 0.5, 1, 3, 7.5, 100}";
}

std::string check_generation_accounting(const VerifyOptions&) {
  const LoopConfig mcfg = tiny_config(Mode::kMasked, 2, 8, 4);
  Rng rng = derive_rng(59, 0);
  const BlockParams mparams = BlockParams::init(mcfg, rng);
  for (int L : {1, 3, 6}) {
    for (double s : {1.0, 2.5}) {
      LoopedMaskedPredictor pred(mparams);
      DecodeOptions opts;
      opts.steps = 4;
      opts.cfg_scale = s;
      const auto r = generate(pred, {2, 2}, mcfg.vocab_size, 0, L, opts, rng);
      const std::size_t expect = static_cast<std::size_t>(opts.steps * L) * (s != 1.0 ? 2 : 1);
      require(r.block_applications == expect, "masked: " + std::to_string(r.block_applications) +
                                                  " block applications, expected " + std::to_string(expect));
    }
  }
  const LoopConfig dcfg = tiny_config(Mode::kDiffusion, 2, 8, 4);
  const BlockParams dparams = BlockParams::init(dcfg, rng);
  const NoiseSchedule schedule(8);
  for (int L : {1, 3, 6}) {
    for (double s : {1.0, 2.5}) {
      LoopedDenoiser den(dparams);
      const auto r = sample(den, schedule, 2, 4, 2, 1, L, s, rng);
      const std::size_t expect = static_cast<std::size_t>(schedule.steps() * L) * (s != 1.0 ? 2 : 1);
      require(r.block_applications == expect, "diffusion: " + std::to_string(r.block_applications) +
                                                  " block applications, expected " + std::to_string(expect));
    }
  }
  return "K*L and T*L, doubled under guidance";
}

// ----------------------------------------------------------- diffusion_gen

std::string check_variance_preservation(const VerifyOptions&) {
  double worst = 0.0;
  for (int T : {1, 2, 64, 256, 512, 1000}) {
    for (double shift : {0.25, 0.5, 1.0, 2.0, 4.0}) {
      const NoiseSchedule s(T, shift);
      for (int t = 0; t <= T; ++t) {
        const double a = s.signal(t), sig = s.noise(t);
        worst = std::max(worst, std::abs(a * a + sig * sig - 1.0));
        if (t > 0) require(a < s.signal(t - 1), "signal amplitude not decreasing");
      }
      require(s.coefficients(1).c3 == 0.0, "final step injects noise");
      if (shift == 1.0 && T >= 64) require(s.signal(T) <= 0.02, "a(T) above 0.02");
    }
  }
  require(worst <= 1e-12, "max |a^2 + sigma^2 - 1| = " + fmt(worst));
  return "max |a^2 + sigma^2 - 1| = " + fmt(worst);
}

std::string check_oracle_moments(const VerifyOptions&) {
  const std::vector<double> mu{0.5, -1.0, 2.0, 0.0}, var{0.25, 1.0, 2.0, 0.5};
  auto oracle = gaussian_oracle(mu, var, 2, 2);
  const NoiseSchedule schedule(256);
  const std::size_t n = 10000;
  Rng rng = derive_rng(61, 0);
  const auto r = sample(oracle, schedule, n, 2, 2, 0, 1, 1.0, rng);
  double worst_z = 0.0, worst_var = 0.0;
  for (std::size_t d = 0; d < 4; ++d) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += r.latents[i * 4 + d];
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) v += (r.latents[i * 4 + d] - m) * (r.latents[i * 4 + d] - m);
    v /= static_cast<double>(n - 1);
    const double z = std::abs(m - mu[d]) / std::sqrt(var[d] / static_cast<double>(n));
    const double rel = std::abs(v / var[d] - 1.0);
    worst_z = std::max(worst_z, z);
    worst_var = std::max(worst_var, rel);
    require(z <= 3.0, "dim " + std::to_string(d) + " mean off by " + fmt(z) + " standard errors");
    require(rel <= 0.05, "dim " + std::to_string(d) + " variance off by " + fmt(100 * rel) + "%");
  }
  return "worst mean deviation " + fmt(worst_z) + " SE, worst variance deviation " +
         fmt(100 * worst_var) + "%";
}

double normal_cdf(double x, double mu, double var) {
  return 0.5 * std::erfc(-(x - mu) / std::sqrt(2.0 * var));
}

double ks_statistic(std::vector<double> xs, double mu, double var) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = normal_cdf(xs[i], mu, var);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

std::string check_sampler_consistency(const VerifyOptions&) {
  const std::vector<double> mu{0.5, -1.0}, var{0.25, 2.0};
  auto oracle = gaussian_oracle(mu, var, 1, 2);
  const std::size_t n = 20000;
  std::vector<double> ks;
  for (int T : {64, 256}) {
    Rng rng = derive_rng(67, 0);
    const auto r = sample(oracle, NoiseSchedule(T), n, 1, 2, 0, 1, 1.0, rng);
    double worst = 0.0;
    for (std::size_t d = 0; d < 2; ++d) {
      std::vector<double> xs(n);
      for (std::size_t i = 0; i < n; ++i) xs[i] = r.latents[i * 2 + d];
      worst = std::max(worst, ks_statistic(std::move(xs), mu[d], var[d]));
    }
    ks.push_back(worst);
  }
  const double noise = 1.0 / std::sqrt(static_cast<double>(n));
  require(ks[1] <= ks[0] + noise, "KS grew from " + fmt(ks[0]) + " (T=64) to " + fmt(ks[1]) + " (T=256)");
  return "KS T=64: " + fmt(ks[0]) + ", T=256: " + fmt(ks[1]);
}

std::string check_cfg_identity(const VerifyOptions&) {
  const LoopConfig cfg = tiny_config(Mode::kDiffusion, 2, 8, 3);
  const BlockParams params = jittered_params(cfg, 71, 0.1);
  const NoiseSchedule schedule(12);
  LoopedDenoiser guided(params), plain(params);
  Rng r1 = derive_rng(71, 1), r2 = derive_rng(71, 1);
  const auto a = sample(guided, schedule, 3, 4, 2, 1, 2, 1.0, r1);
  // Conditional-only reference written out step by step.
  Tensor x({12, 2}, 0.0);
  for (double& v : x.values()) v = standard_normal(r2);
  for (int t = schedule.steps(); t >= 1; --t) {
    x = ddpm_step(x, plain.predict_x0(x, 3, t, schedule, 1, 2), t, schedule, r2);
  }
  require(a.latents == x, "cfg_scale=1 trajectory differs from conditional-only sampling");
  return "bit-identical";
}

// -------------------------------------------------------------- eval_bench

std::string check_tv_consistency(const VerifyOptions&) {
  const auto source = MarkovGridSource::cyclic({2, 2}, 4, 2, 0.85, 0.25);
  const auto truth = source.distribution(kNullClass);
  const std::size_t n = 100 * truth.size();
  std::vector<double> tv;
  for (std::uint64_t set = 0; set < 2; ++set) {
    Rng rng = derive_rng(73, set);
    std::vector<std::size_t> outcomes(n);
    for (auto& o : outcomes) o = source.outcome_index(source.sample(kNullClass, rng));
    tv.push_back(tv_from_samples(outcomes, truth));
  }
  const double bound = 2.0 / std::sqrt(static_cast<double>(n));
  require(std::abs(tv[0] - tv[1]) < bound, "TV estimates " + fmt(tv[0]) + " and " + fmt(tv[1]) +
                                               " differ by more than " + fmt(bound));
  require(tv[0] < 0.05 && tv[1] < 0.05, "TV of exact samples above 0.05");
  std::vector<double> p(4, 0.0), q(4, 0.0);
  p[0] = p[1] = 0.5;
  q[2] = q[3] = 0.5;
  require(tv_distance(p, q) == 1.0 && tv_distance(p, p) == 0.0, "TV identities");
  return "TV " + fmt(tv[0]) + " vs " + fmt(tv[1]) + " at n=" + std::to_string(n);
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    Rng rng(std::random_device{}());
    path = std::filesystem::temp_directory_path() / ("elt-verify-" + std::to_string(rng()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

std::string check_sweep(const VerifyOptions&) {
  TempDir dir;
  DataSpec data;
  data.eval_examples = 64;
  nlohmann::json grid_json = {{"version", 1}, {"seed", 5}, {"entries", nlohmann::json::array()}};
  for (int n_layers : {1, 2}) {
    const LoopConfig cfg = tiny_config(Mode::kMasked, n_layers, 8, 3);
    const auto path = dir.path / ("n" + std::to_string(n_layers) + ".ckpt");
    save_checkpoint(path, jittered_params(cfg, 79 + n_layers, 0.1), {{"data", to_json(data)}});
    grid_json["entries"].push_back({{"ckpt", path.string()}, {"loops", {1, 2, 3, 4, 5}}});
  }
  const SweepGrid grid = sweep_grid_from_json(grid_json);
  const SweepResult a = pareto_sweep(grid, 1), b = pareto_sweep(grid, 3);
  require(a.rows.size() == 10 && b.rows.size() == 10, "expected one row per (checkpoint, L)");
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    const auto &x = a.rows[i], &y = b.rows[i];
    require(x.checkpoint == y.checkpoint && x.loops == y.loops && x.metric == y.metric &&
                x.block_flops == y.block_flops && x.params == y.params && x.pareto == y.pareto,
            "sweep rows differ between runs");
    require(std::isfinite(x.metric), "non-finite metric");
  }
  // Accounting: L and 2L rows of one checkpoint.
  for (const auto& r : a.rows) {
    for (const auto& s : a.rows) {
      if (r.checkpoint == s.checkpoint && s.loops == 2 * r.loops) {
        require(s.block_flops == 2 * r.block_flops, "block FLOPs at 2L are not twice those at L");
      }
    }
  }
  // Pareto rows form an antichain and cover every dominated row.
  for (const auto& r : a.rows) {
    bool dominated = false;
    for (const auto& s : a.rows) {
      const bool dom = s.block_flops <= r.block_flops && s.metric <= r.metric &&
                       (s.block_flops < r.block_flops || s.metric < r.metric);
      if (dom && r.pareto) throw CheckFailed("a Pareto row is dominated");
      dominated = dominated || dom;
    }
    require(r.pareto != dominated, "Pareto flag inconsistent with dominance");
  }
  bool missing_fails = false;
  try {
    SweepGrid bad = grid;
    bad.entries.push_back({dir.path / "absent.ckpt", {1}});
    (void)pareto_sweep(bad, 1);
  } catch (const IoError&) {
    missing_fails = true;
  }
  require(missing_fails, "a missing checkpoint did not raise an I/O error");
  return "10 rows identical across thread counts; Pareto antichain; 2L == 2x FLOPs";
}

std::string check_extrapolation(const VerifyOptions&) {
  for (Mode mode : {Mode::kMasked, Mode::kDiffusion}) {
    const LoopConfig cfg = tiny_config(mode, 2, 8, 4);
    const BlockParams params = jittered_params(cfg, 83, 0.1);
    DataSpec data = data_for(cfg);
    data.eval_examples = 32;
    const TrainBatch eval = make_eval_set(data, cfg, DiffusionSpec{16}, 1);
    const std::vector<int> loops{1, 2, 3, 4, 5, 6};
    const auto curve = elasticity_curve(params, eval, loops);
    require(curve.size() == loops.size(), "curve length != |L_values|");
    for (const auto& p : curve) {
      require(std::isfinite(p.metric), "non-finite metric at L=" + std::to_string(p.loops));
      require(p.extrapolation == (p.loops > cfg.loop_max), "extrapolation flag wrong");
    }
  }
  return "L up to L_max+2 finite and flagged";
}

// --------------------------------------------------------------------- cli

ExperimentConfig tiny_experiment(Mode mode, std::uint64_t seed) {
  ExperimentConfig cfg;
  cfg.model = tiny_config(mode, 1, 8, 3);
  cfg.data = data_for(cfg.model);
  cfg.data.eval_examples = 16;
  cfg.diffusion.steps = 16;
  cfg.steps = 4;
  cfg.batch_size = 4;
  cfg.seed = seed;
  cfg.optimizer.warmup_steps = 2;
  cfg.optimizer.lr = 1e-2;
  return cfg;
}

std::string check_config_roundtrip(const VerifyOptions&) {
  ExperimentConfig cfg = tiny_experiment(Mode::kDiffusion, 9);
  cfg.model.conditioning = Conditioning::kModulated;
  cfg.distill_space = DistillSpace::kFeatures;
  cfg.ilsd_enabled = false;
  cfg.optimizer.lr = 3.3e-4;
  cfg.diffusion.shift = 0.7;
  cfg.checkpoint_every = 2;
  const auto j1 = to_json(cfg);
  const ExperimentConfig parsed = experiment_config_from_json(j1);
  require(parsed == cfg, "parse(serialize(cfg)) != cfg");
  require(to_json(parsed).dump() == j1.dump(), "serialisation not byte-stable");
  bool rejected = false;
  try {
    auto bad = j1;
    bad["optimizer"]["learning_rate"] = 1.0;
    (void)experiment_config_from_json(bad);
  } catch (const ConfigError&) {
    rejected = true;
  }
  require(rejected, "unknown key accepted");
  return "identical config, byte-stable JSON, unknown keys rejected";
}

std::string check_checkpoint_roundtrip(const VerifyOptions&) {
  TempDir dir;
  for (Mode mode : {Mode::kMasked, Mode::kDiffusion}) {
    const LoopConfig cfg = tiny_config(mode, 2, 8, 3, Conditioning::kModulated);
    const BlockParams params = jittered_params(cfg, 89, 0.3);
    const nlohmann::json meta = {{"note", "round trip"}, {"step", 7}};
    save_checkpoint(dir.path / "a.ckpt", params, meta);
    const Checkpoint loaded = load_checkpoint(dir.path / "a.ckpt");
    save_checkpoint(dir.path / "b.ckpt", loaded.params, loaded.meta);
    auto slurp = [](const std::filesystem::path& p) {
      std::ifstream in(p, std::ios::binary);
      return std::string(std::istreambuf_iterator<char>(in), {});
    };
    require(slurp(dir.path / "a.ckpt") == slurp(dir.path / "b.ckpt"), "save-load-save not byte-identical");
    for (std::size_t i = 0; i < params.tensors().size(); ++i) {
      require(params.tensors()[i].value == loaded.params.tensors()[i].value, "tensor values changed");
    }
  }
  return "save -> load -> save byte-identical in both modes";
}

std::string check_train_determinism(const VerifyOptions&) {
  for (Mode mode : {Mode::kMasked, Mode::kDiffusion}) {
    const ExperimentConfig cfg = tiny_experiment(mode, 11);
    const auto a = serialize_checkpoint(train(cfg).params, checkpoint_meta(cfg, cfg.steps));
    const auto b = serialize_checkpoint(train(cfg).params, checkpoint_meta(cfg, cfg.steps));
    require(a == b, to_string(mode) + ": identical seeds gave different checkpoints");
    ExperimentConfig other = cfg;
    other.seed = 12;
    require(serialize_checkpoint(train(other).params, checkpoint_meta(other, other.steps)) != a,
            "different seeds gave identical checkpoints");
  }
  return "byte-identical checkpoints for identical seeds";
}

struct Registered {
  CheckInfo info;
  std::function<std::string(const VerifyOptions&)> run;
};

const std::vector<Registered>& registry() {
  static const std::vector<Registered> checks = {
      {{"primitive_gradients", "numerics", "max rel err < 1e-5 (4-point central FD, floor 1e-6)"},
       check_primitive_gradients},
      {{"determinism", "numerics", "bit-exact"}, check_determinism},
      {{"stop_grad_zero_flow", "numerics", "exactly 0"}, check_stop_grad_zero_flow},
      {{"prefix_capture_exact", "looped_core", "bit-exact; block applications == L_max"},
       check_prefix_capture},
      {{"param_count_loop_independent", "looped_core", "exact"}, check_param_count_loop_independent},
      {{"block_param_ratio_8_32", "looped_core", "exactly 1:4"}, check_block_param_ratio},
      {{"block_flops_linear_iso_depth", "looped_core", "exact"}, check_flops_linear},
      {{"conditioning_stationarity", "looped_core", "bit-exact"}, check_conditioning_stationarity},
      {{"ilsd_loss_gradient", "ilsd_train", "max rel err < 1e-5 (4-point central FD, floor 1e-6)"},
       check_ilsd_gradient},
      {{"teacher_insulation", "ilsd_train", "elementwise exact"}, check_teacher_insulation},
      {{"lambda_endpoints", "ilsd_train", "schedule exact; reduced gradients <= 1e-12 relative"},
       check_lambda_endpoints},
      {{"loss_decomposition", "ilsd_train", "<= 1 ulp"}, check_loss_decomposition},
      {{"shared_parameter_coupling", "ilsd_train", "every tensor changes both exits"},
       check_shared_coupling},
      {{"temperature_and_mask_schedules", "masked_gen", "exact"}, check_masked_schedules},
      {{"decode_invariants", "masked_gen", "exact"}, check_decode_invariants},
      {{"cfg_consistency", "masked_gen", "exact"}, check_cfg_consistency},
      {{"generation_accounting", "masked_gen+diffusion_gen", "exact"}, check_generation_accounting},
      {{"variance_preservation", "diffusion_gen", "|a^2 + sigma^2 - 1| <= 1e-12"},
       check_variance_preservation},
      {{"oracle_sampler_moments", "diffusion_gen", "mean within 3 SE; variance within 5%"},
       check_oracle_moments},
      {{"sampler_consistency_ks", "diffusion_gen", "KS(T=256) <= KS(T=64) + 1/sqrt(n)"},
       check_sampler_consistency},
      {{"cfg_identity", "diffusion_gen", "bit-exact"}, check_cfg_identity},
      {{"tv_consistency", "eval_bench", "|TV1 - TV2| < 2/sqrt(n)"}, check_tv_consistency},
      {{"sweep_determinism_pareto", "eval_bench", "exact modulo wall_ms"}, check_sweep},
      {{"extrapolation_safety", "eval_bench", "finite at L_max+2"}, check_extrapolation},
      {{"config_roundtrip", "cli", "identical config, byte-stable"}, check_config_roundtrip},
      {{"checkpoint_roundtrip", "cli", "byte-identical"}, check_checkpoint_roundtrip},
      {{"train_determinism", "cli", "byte-identical"}, check_train_determinism},
  };
  return checks;
}

}  // namespace

std::vector<CheckInfo> registered_checks() {
  std::vector<CheckInfo> out;
  for (const auto& r : registry()) out.push_back(r.info);
  return out;
}

std::string format_result(const CheckResult& r) {
  std::ostringstream os;
  os << (r.passed ? "PASS " : "FAIL ") << r.module << "/" << r.name << "  [tol: " << r.tolerance
     << "]  " << r.detail << "  (" << std::fixed;
  os.precision(2);
  os << r.seconds << " s)";
  return os.str();
}

std::vector<CheckResult> run_checks(const VerifyOptions& opts, std::ostream* progress) {
  std::vector<CheckResult> results;
  for (const auto& reg : registry()) {
    if (!opts.filter.empty() && reg.info.name.find(opts.filter) == std::string::npos &&
        reg.info.module.find(opts.filter) == std::string::npos) {
      continue;
    }
    CheckResult r{reg.info.name, reg.info.module, reg.info.tolerance, false, "", 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      r.detail = reg.run(opts);
      r.passed = true;
    } catch (const std::exception& e) {
      r.detail = e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (progress) *progress << format_result(r) << std::endl;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace elt
