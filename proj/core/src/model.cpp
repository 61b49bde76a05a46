#include "elt/model.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "elt/error.hpp"

namespace elt {
namespace {

using ad::Var;

double truncated_normal(Rng& rng, double stddev) {
  for (;;) {
    const double z = standard_normal(rng);
    if (std::abs(z) <= 2.0) return z * stddev;
  }
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const LoopConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model, m = cfg.mlp_dim, s = cfg.seq_len;
  const std::size_t out = cfg.output_dim();
  std::vector<std::pair<std::string, Shape>> layout;
  if (cfg.mode == Mode::kMasked) {
    layout.push_back({"embed.tokens", {static_cast<std::size_t>(cfg.vocab_size) + 1, d}});
  } else {
    layout.push_back({"embed.in_w", {static_cast<std::size_t>(cfg.latent_dim), d}});
    layout.push_back({"embed.in_b", {d}});
  }
  layout.push_back({"embed.pos", {s, d}});
  layout.push_back({"cond.class", {static_cast<std::size_t>(cfg.n_classes) + 1, d}});
  if (cfg.mode == Mode::kDiffusion) {
    layout.push_back({"cond.time_w", {d, d}});
    layout.push_back({"cond.time_b", {d}});
  }
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    layout.push_back({p + "ln1.g", {d}});
    layout.push_back({p + "ln1.b", {d}});
    layout.push_back({p + "attn.wq", {d, d}});
    layout.push_back({p + "attn.bq", {d}});
    layout.push_back({p + "attn.wk", {d, d}});
    layout.push_back({p + "attn.bk", {d}});
    layout.push_back({p + "attn.wv", {d, d}});
    layout.push_back({p + "attn.bv", {d}});
    layout.push_back({p + "attn.wo", {d, d}});
    layout.push_back({p + "attn.bo", {d}});
    layout.push_back({p + "ln2.g", {d}});
    layout.push_back({p + "ln2.b", {d}});
    layout.push_back({p + "mlp.w1", {d, m}});
    layout.push_back({p + "mlp.b1", {m}});
    layout.push_back({p + "mlp.w2", {m, d}});
    layout.push_back({p + "mlp.b2", {d}});
    if (cfg.conditioning == Conditioning::kModulated) {
      layout.push_back({p + "mod.w", {d, 4 * d}});
      layout.push_back({p + "mod.b", {4 * d}});
    }
  }
  layout.push_back({"head.ln.g", {d}});
  layout.push_back({"head.ln.b", {d}});
  layout.push_back({"head.w", {d, out}});
  layout.push_back({"head.b", {out}});
  return layout;
}

BlockParams::BlockParams(LoopConfig cfg, std::vector<NamedTensor> tensors)
    : cfg_(cfg), tensors_(std::move(tensors)) {}

BlockParams BlockParams::zeros(const LoopConfig& cfg) {
  std::vector<NamedTensor> tensors;
  for (auto& [name, shape] : parameter_layout(cfg)) tensors.push_back({name, Tensor(shape, 0.0)});
  return BlockParams(cfg, std::move(tensors));
}

BlockParams BlockParams::init(const LoopConfig& cfg, Rng& rng, double weight_std) {
  if (!(weight_std > 0.0)) throw ConfigError("init: weight_std must be positive");
  std::vector<NamedTensor> tensors;
  for (auto& [name, shape] : parameter_layout(cfg)) {
    Tensor t(shape, 0.0);
    const bool is_gain = ends_with(name, ".g");
    const bool zero_init = shape.size() == 1 || name == "head.w" || ends_with(name, "mod.w");
    if (is_gain) {
      std::fill(t.values().begin(), t.values().end(), 1.0);
    } else if (!zero_init) {
      for (double& v : t.values()) v = truncated_normal(rng, weight_std);
    }
    tensors.push_back({name, std::move(t)});
  }
  return BlockParams(cfg, std::move(tensors));
}

BlockParams BlockParams::from_tensors(const LoopConfig& cfg, std::vector<NamedTensor> tensors) {
  const auto layout = parameter_layout(cfg);
  if (layout.size() != tensors.size()) {
    throw ConfigError("parameter set has " + std::to_string(tensors.size()) +
                      " tensors, config expects " + std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].first != tensors[i].name || layout[i].second != tensors[i].value.shape()) {
      throw ConfigError("parameter " + std::to_string(i) + ": expected " + layout[i].first +
                        shape_str(layout[i].second) + ", got " + tensors[i].name +
                        shape_str(tensors[i].value.shape()));
    }
  }
  return BlockParams(cfg, std::move(tensors));
}

std::size_t BlockParams::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].name == name) return i;
  }
  throw ConfigError("no parameter named '" + std::string(name) + "'");
}

const Tensor& BlockParams::get(std::string_view name) const {
  return tensors_[index_of(name)].value;
}

Tensor& BlockParams::get(std::string_view name) { return tensors_[index_of(name)].value; }

std::size_t BlockParams::numel() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.value.numel();
  return n;
}

std::size_t BlockParams::block_numel() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) {
    if (t.name.starts_with("layers.")) n += t.value.numel();
  }
  return n;
}

Tensor time_embedding(std::span<const double> times, std::size_t dim) {
  Tensor out({times.size(), dim}, 0.0);
  const std::size_t half = dim / 2;
  for (std::size_t b = 0; b < times.size(); ++b) {
    const double t = times[b] * 1000.0;
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                   static_cast<double>(half));
      out.at(b, i) = std::cos(t * freq);
      out.at(b, i + half) = std::sin(t * freq);
    }
  }
  return out;
}

LoopedModel::LoopedModel(const BlockParams& params, Binding binding) : cfg_(params.config()) {
  const bool trainable = binding == Binding::kTrainable;
  std::unordered_map<std::string, Var> by_name;
  for (const auto& t : params.tensors()) {
    vars_.push_back(Var::leaf(t.value, trainable));
    by_name.emplace(t.name, vars_.back());
  }
  auto at = [&](const std::string& name) -> Var {
    auto it = by_name.find(name);
    return it == by_name.end() ? Var() : it->second;
  };
  tok_embed_ = at("embed.tokens");
  in_w_ = at("embed.in_w");
  in_b_ = at("embed.in_b");
  pos_ = at("embed.pos");
  class_table_ = at("cond.class");
  time_w_ = at("cond.time_w");
  time_b_ = at("cond.time_b");
  for (int i = 0; i < cfg_.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    LayerWeights w;
    w.ln1_g = at(p + "ln1.g");
    w.ln1_b = at(p + "ln1.b");
    w.wq = at(p + "attn.wq");
    w.bq = at(p + "attn.bq");
    w.wk = at(p + "attn.wk");
    w.bk = at(p + "attn.bk");
    w.wv = at(p + "attn.wv");
    w.bv = at(p + "attn.bv");
    w.wo = at(p + "attn.wo");
    w.bo = at(p + "attn.bo");
    w.ln2_g = at(p + "ln2.g");
    w.ln2_b = at(p + "ln2.b");
    w.w1 = at(p + "mlp.w1");
    w.b1 = at(p + "mlp.b1");
    w.w2 = at(p + "mlp.w2");
    w.b2 = at(p + "mlp.b2");
    w.mod_w = at(p + "mod.w");
    w.mod_b = at(p + "mod.b");
    layers_.push_back(std::move(w));
  }
  head_ = {at("head.ln.g"), at("head.ln.b"), at("head.w"), at("head.b")};
}

ad::Var LoopedModel::embed(const ModelInput& input) const {
  const std::size_t s = cfg_.seq_len;
  const std::size_t rows = input.batch * s;
  if (input.batch == 0) throw ShapeError("embed: empty batch");
  Var h;
  if (cfg_.mode == Mode::kMasked) {
    if (input.tokens.size() != rows) {
      throw ShapeError("embed: expected " + std::to_string(rows) + " tokens, got " +
                       std::to_string(input.tokens.size()));
    }
    h = ad::gather_rows(tok_embed_, input.tokens);
  } else {
    if (input.latents.rank() != 2 || input.latents.rows() != rows ||
        input.latents.cols() != static_cast<std::size_t>(cfg_.latent_dim)) {
      throw ShapeError("embed: latents " + shape_str(input.latents.shape()) + " expected [" +
                       std::to_string(rows) + "x" + std::to_string(cfg_.latent_dim) + "]");
    }
    h = ad::add_bias(ad::matmul(Var::constant(input.latents), in_w_), in_b_);
  }
  std::vector<std::size_t> pos_index(rows);
  for (std::size_t r = 0; r < rows; ++r) pos_index[r] = r % s;
  return ad::add(h, ad::gather_rows(pos_, pos_index));
}

ConditioningContext LoopedModel::condition(const ModelInput& input) const {
  if (input.classes.size() != input.batch) {
    throw ShapeError("condition: " + std::to_string(input.classes.size()) + " class ids for batch " +
                     std::to_string(input.batch));
  }
  std::vector<std::size_t> class_rows(input.batch);
  for (std::size_t b = 0; b < input.batch; ++b) {
    const int c = input.classes[b];
    if (c == kNullClass) {
      class_rows[b] = static_cast<std::size_t>(cfg_.n_classes);
    } else if (c >= 0 && c < cfg_.n_classes) {
      class_rows[b] = static_cast<std::size_t>(c);
    } else {
      throw ConfigError("class id " + std::to_string(c) + " out of range [0, " +
                        std::to_string(cfg_.n_classes) + ")");
    }
  }
  ConditioningContext ctx;
  ctx.batch = input.batch;
  ctx.per_example = ad::gather_rows(class_table_, class_rows);
  if (cfg_.mode == Mode::kDiffusion) {
    if (input.times.size() != input.batch) {
      throw ShapeError("condition: diffusion mode needs one time per example");
    }
    Var temb = Var::constant(time_embedding(input.times, cfg_.d_model));
    ctx.per_example = ad::add(ctx.per_example, ad::add_bias(ad::matmul(temb, time_w_), time_b_));
  }
  const std::size_t s = cfg_.seq_len;
  std::vector<std::size_t> example_of_row(input.batch * s);
  for (std::size_t r = 0; r < example_of_row.size(); ++r) example_of_row[r] = r / s;
  if (cfg_.conditioning == Conditioning::kAdditive) {
    ctx.rows = ad::gather_rows(ctx.per_example, example_of_row);
  } else {
    const std::size_t d = cfg_.d_model;
    for (const auto& w : layers_) {
      Var mod = ad::gather_rows(ad::add_bias(ad::matmul(ctx.per_example, w.mod_w), w.mod_b),
                                example_of_row);
      ctx.modulation.push_back({ad::slice_cols(mod, 0, d), ad::slice_cols(mod, d, d),
                                ad::slice_cols(mod, 2 * d, d), ad::slice_cols(mod, 3 * d, d)});
    }
  }
  return ctx;
}

ad::Var LoopedModel::apply_layer(std::size_t layer, const Var& x,
                                 const ConditioningContext& ctx) const {
  const LayerWeights& w = layers_[layer];
  const bool modulated = cfg_.conditioning == Conditioning::kModulated;
  auto modulate = [&](Var h, std::size_t shift, std::size_t scale) {
    if (!modulated) return h;
    const auto& m = ctx.modulation.at(layer);
    return ad::add(ad::add(h, ad::mul(h, m[scale])), m[shift]);
  };
  Var a = modulate(ad::layer_norm(x, w.ln1_g, w.ln1_b), 0, 1);
  Var q = ad::add_bias(ad::matmul(a, w.wq), w.bq);
  Var k = ad::add_bias(ad::matmul(a, w.wk), w.bk);
  Var v = ad::add_bias(ad::matmul(a, w.wv), w.bv);
  Var att = ad::attention(q, k, v, ctx.batch, cfg_.seq_len, cfg_.n_heads);
  Var h = ad::add(x, ad::add_bias(ad::matmul(att, w.wo), w.bo));
  Var m = modulate(ad::layer_norm(h, w.ln2_g, w.ln2_b), 2, 3);
  Var hidden = ad::gelu(ad::add_bias(ad::matmul(m, w.w1), w.b1));
  return ad::add(h, ad::add_bias(ad::matmul(hidden, w.w2), w.b2));
}

ad::Var LoopedModel::apply_block(const Var& x, const ConditioningContext& ctx) {
  const std::size_t rows = ctx.batch * static_cast<std::size_t>(cfg_.seq_len);
  if (x.value().rank() != 2 || x.value().rows() != rows ||
      x.value().cols() != static_cast<std::size_t>(cfg_.d_model)) {
    throw ShapeError("apply_block: hidden state " + shape_str(x.shape()) + " expected [" +
                     std::to_string(rows) + "x" + std::to_string(cfg_.d_model) + "]");
  }
  Var h = x;
  if (cfg_.conditioning == Conditioning::kAdditive) h = ad::add(h, ctx.rows);
  for (std::size_t i = 0; i < layers_.size(); ++i) h = apply_layer(i, h, ctx);
  ++block_applications_;
  return h;
}

ad::Var LoopedModel::loop_forward(Var x, const ConditioningContext& ctx, int loops) {
  if (loops < 1) throw ConfigError("loop_forward: loop count must be >= 1, got " + std::to_string(loops));
  for (int i = 0; i < loops; ++i) {
    if (observer_) observer_(i, ctx);
    x = apply_block(x, ctx);
  }
  return x;
}

LoopCapture LoopedModel::loop_forward_capture(Var x, const ConditioningContext& ctx, int loop_max,
                                              int loop_int) {
  if (loop_int < 1 || loop_int >= loop_max) {
    throw ConfigError("loop_forward_capture: need 1 <= loop_int < loop_max, got loop_int=" +
                      std::to_string(loop_int) + " loop_max=" + std::to_string(loop_max));
  }
  LoopCapture cap;
  for (int i = 0; i < loop_max; ++i) {
    if (observer_) observer_(i, ctx);
    x = apply_block(x, ctx);
    if (i == loop_int - 1) cap.intermediate = x;
  }
  cap.final = x;
  return cap;
}

ad::Var LoopedModel::predict_head(const Var& features) const {
  if (features.value().rank() != 2 ||
      features.value().cols() != static_cast<std::size_t>(cfg_.d_model)) {
    throw ShapeError("predict_head: features " + shape_str(features.shape()) +
                     " do not have d_model=" + std::to_string(cfg_.d_model) + " columns");
  }
  Var h = ad::layer_norm(features, head_.ln_g, head_.ln_b);
  return ad::add_bias(ad::matmul(h, head_.w), head_.b);
}

ad::Var LoopedModel::forward(const ModelInput& input, int loops) {
  Var h = embed(input);
  ConditioningContext ctx = condition(input);
  return predict_head(loop_forward(h, ctx, loops));
}

std::vector<Tensor> LoopedModel::gradients() const {
  std::vector<Tensor> grads;
  grads.reserve(vars_.size());
  for (const auto& v : vars_) grads.push_back(v.grad());
  return grads;
}

}  // namespace elt
