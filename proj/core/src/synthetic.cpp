#include "elt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "elt/error.hpp"

namespace elt {
namespace {

constexpr std::size_t kMaxEnumerable = 1'000'000;
constexpr double kLogFloor = -1e4;

std::size_t draw_categorical(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  std::size_t last = probs.size() - 1;
  while (probs[last] == 0.0 && last > 0) --last;
  return last;
}

void check_distribution(std::span<const double> p, const std::string& what) {
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(what + ": negative or non-finite probability");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError(what + ": probabilities must sum to 1");
}

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown " + what + " key '" + key + "'");
  }
}

}  // namespace

MarkovGridSource::MarkovGridSource(std::vector<std::size_t> shape, int vocab_size,
                                   std::vector<std::vector<double>> initial,
                                   std::vector<std::vector<std::vector<double>>> transition)
    : shape_(std::move(shape)),
      vocab_(vocab_size),
      initial_(std::move(initial)),
      transition_(std::move(transition)) {
  if (vocab_ < 1) throw ConfigError("markov source: vocab_size must be positive");
  if (shape_.empty()) throw ConfigError("markov source: empty grid shape");
  n_ = 1;
  for (auto d : shape_) {
    if (d == 0) throw ConfigError("markov source: zero-sized grid dimension");
    n_ *= d;
  }
  if (initial_.empty() || initial_.size() != transition_.size()) {
    throw ConfigError("markov source: need one initial distribution and transition table per class");
  }
  const auto V = static_cast<std::size_t>(vocab_);
  for (std::size_t c = 0; c < initial_.size(); ++c) {
    if (initial_[c].size() != V || transition_[c].size() != V) {
      throw ConfigError("markov source: tables must be sized by the vocabulary");
    }
    check_distribution(initial_[c], "markov source initial distribution");
    for (const auto& row : transition_[c]) {
      if (row.size() != V) throw ConfigError("markov source: transition rows must be sized by the vocabulary");
      check_distribution(row, "markov source transition row");
    }
  }
  // Saturate instead of overflowing; only compared against kMaxEnumerable.
  support_ = 1;
  for (std::size_t i = 0; i < n_; ++i) {
    if (support_ > kMaxEnumerable) break;
    support_ *= V;
  }
}

MarkovGridSource MarkovGridSource::cyclic(std::vector<std::size_t> shape, int vocab_size,
                                          int n_classes, double peak, double start_peak) {
  if (vocab_size < 2) throw ConfigError("markov source: cyclic source needs vocab_size >= 2");
  if (n_classes < 1) throw ConfigError("markov source: need at least one class");
  if (!(peak > 0.0 && peak <= 1.0)) throw ConfigError("markov source: peak must be in (0, 1]");
  if (!(start_peak > 0.0 && start_peak <= 1.0)) {
    throw ConfigError("markov source: start_peak must be in (0, 1]");
  }
  const auto V = static_cast<std::size_t>(vocab_size);
  const double rest = (1.0 - peak) / static_cast<double>(V - 1);
  const double start_rest = (1.0 - start_peak) / static_cast<double>(V - 1);
  std::vector<std::vector<double>> initial(n_classes, std::vector<double>(V, start_rest));
  for (int c = 0; c < n_classes; ++c) initial[c][static_cast<std::size_t>(c) % V] = start_peak;
  std::vector<std::vector<std::vector<double>>> trans(n_classes);
  for (int c = 0; c < n_classes; ++c) {
    trans[c].assign(V, std::vector<double>(V, rest));
    for (std::size_t a = 0; a < V; ++a) trans[c][a][(a + 1 + c) % V] = peak;
  }
  return MarkovGridSource(std::move(shape), vocab_size, std::move(initial), std::move(trans));
}

void MarkovGridSource::require_enumerable() const {
  if (support_ > kMaxEnumerable) {
    throw ConfigError("markov source: support too large to enumerate (limit 1e6 outcomes)");
  }
}

double MarkovGridSource::class_probability(std::span<const int> tokens, std::size_t c) const {
  double p = initial_[c][tokens[0]];
  for (std::size_t i = 1; i < n_ && p > 0.0; ++i) p *= transition_[c][tokens[i - 1]][tokens[i]];
  return p;
}

double MarkovGridSource::probability(std::span<const int> tokens, int class_id) const {
  if (tokens.size() != n_) throw ShapeError("markov source: wrong number of tokens");
  for (int t : tokens) {
    if (t < 0 || t >= vocab_) throw ConfigError("markov source: token outside the vocabulary");
  }
  if (class_id == kNullClass) {
    double p = 0.0;
    for (std::size_t c = 0; c < initial_.size(); ++c) p += class_probability(tokens, c);
    return p / static_cast<double>(initial_.size());
  }
  if (class_id < 0 || class_id >= n_classes()) throw ConfigError("markov source: unknown class");
  return class_probability(tokens, static_cast<std::size_t>(class_id));
}

std::size_t MarkovGridSource::outcome_index(std::span<const int> tokens) const {
  if (tokens.size() != n_) throw ShapeError("markov source: wrong number of tokens");
  std::size_t idx = 0;
  for (int t : tokens) {
    if (t < 0 || t >= vocab_) throw ConfigError("markov source: token outside the vocabulary");
    idx = idx * static_cast<std::size_t>(vocab_) + static_cast<std::size_t>(t);
  }
  return idx;
}

std::vector<int> MarkovGridSource::outcome_tokens(std::size_t index) const {
  std::vector<int> out(n_);
  for (std::size_t i = n_; i-- > 0;) {
    out[i] = static_cast<int>(index % static_cast<std::size_t>(vocab_));
    index /= static_cast<std::size_t>(vocab_);
  }
  return out;
}

std::vector<double> MarkovGridSource::distribution(int class_id) const {
  require_enumerable();
  std::vector<double> p(support_);
  for (std::size_t i = 0; i < support_; ++i) p[i] = probability(outcome_tokens(i), class_id);
  return p;
}

std::vector<int> MarkovGridSource::sample(int class_id, Rng& rng) const {
  std::size_t c;
  if (class_id == kNullClass) {
    c = static_cast<std::size_t>(uniform_int(rng, 0, n_classes() - 1));
  } else {
    if (class_id < 0 || class_id >= n_classes()) throw ConfigError("markov source: unknown class");
    c = static_cast<std::size_t>(class_id);
  }
  std::vector<int> out(n_);
  out[0] = static_cast<int>(draw_categorical(initial_[c], rng));
  for (std::size_t i = 1; i < n_; ++i) {
    out[i] = static_cast<int>(draw_categorical(transition_[c][out[i - 1]], rng));
  }
  return out;
}

Tensor MarkovGridSource::conditional_logits(const TokenGrid& grid, int class_id) const {
  require_enumerable();
  if (grid.size() != n_ || grid.vocab_size() != vocab_) {
    throw ShapeError("markov source: grid does not match the source");
  }
  const auto V = static_cast<std::size_t>(vocab_);
  const auto masked = grid.masked_positions();
  std::vector<int> tokens(grid.tokens());
  std::vector<double> marg(n_ * V, 0.0);
  // Enumerate only the masked positions; revealed ones stay fixed.
  std::size_t combos = 1;
  for (std::size_t i = 0; i < masked.size(); ++i) combos *= V;
  double total = 0.0;
  for (std::size_t m = 0; m < combos; ++m) {
    std::size_t rem = m;
    for (std::size_t pos : masked) {
      tokens[pos] = static_cast<int>(rem % V);
      rem /= V;
    }
    const double p = probability(tokens, class_id);
    if (p == 0.0) continue;
    total += p;
    for (std::size_t pos : masked) marg[pos * V + static_cast<std::size_t>(tokens[pos])] += p;
  }
  if (!(total > 0.0)) throw NumericalError("markov source: revealed tokens have zero probability");
  Tensor out({n_, V}, kLogFloor);
  for (std::size_t pos = 0; pos < n_; ++pos) {
    if (!grid.is_masked(pos)) {
      out.at(pos, static_cast<std::size_t>(grid.at(pos))) = 0.0;
      continue;
    }
    for (std::size_t v = 0; v < V; ++v) {
      const double q = marg[pos * V + v] / total;
      out.at(pos, v) = q > 0.0 ? std::max(std::log(q), kLogFloor) : kLogFloor;
    }
  }
  return out;
}

Tensor EnumerationOracle::logits(const TokenGrid& grid, int class_id, int) {
  return source_.conditional_logits(grid, class_id);
}

GaussianMixtureSource::GaussianMixtureSource(GaussianMixture mixture, std::size_t seq_len,
                                             std::size_t latent_dim)
    : mixture_(std::move(mixture)), seq_len_(seq_len), latent_dim_(latent_dim) {
  mixture_.validate();
  if (mixture_.dim() != seq_len * latent_dim) {
    throw ConfigError("mixture source: component dim " + std::to_string(mixture_.dim()) +
                      " != seq_len*latent_dim " + std::to_string(seq_len * latent_dim));
  }
}

Tensor GaussianMixtureSource::sample(int class_id, Rng& rng) const {
  std::size_t k;
  if (class_id == kNullClass) {
    k = draw_categorical(mixture_.weights, rng);
  } else {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= mixture_.weights.size()) {
      throw ConfigError("mixture source: class " + std::to_string(class_id) + " has no component");
    }
    k = static_cast<std::size_t>(class_id);
  }
  Tensor x({seq_len_, latent_dim_}, 0.0);
  for (std::size_t d = 0; d < x.numel(); ++d) {
    x[d] = mixture_.means[k][d] + std::sqrt(mixture_.vars[k][d]) * standard_normal(rng);
  }
  return x;
}

std::size_t GaussianMixtureSource::assign_component(std::span<const double> x) const {
  if (x.size() != mixture_.dim()) throw ShapeError("mixture source: wrong point dimension");
  std::size_t best = 0;
  double best_lw = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < mixture_.weights.size(); ++k) {
    double lw = std::log(mixture_.weights[k]);
    for (std::size_t d = 0; d < x.size(); ++d) {
      const double v = mixture_.vars[k][d], diff = x[d] - mixture_.means[k][d];
      lw -= 0.5 * (std::log(v) + diff * diff / v);
    }
    if (lw > best_lw) {
      best_lw = lw;
      best = k;
    }
  }
  return best;
}

GaussianMixtureOracle GaussianMixtureSource::oracle() const {
  return GaussianMixtureOracle(mixture_, seq_len_, latent_dim_, true);
}

nlohmann::json to_json(const DataSpec& spec) {
  return nlohmann::json{{"kind", spec.kind},
                        {"grid", spec.grid},
                        {"peak", spec.peak},
                        {"start_peak", spec.start_peak},
                        {"mixture",
                         {{"weights", spec.mixture.weights},
                          {"means", spec.mixture.means},
                          {"vars", spec.mixture.vars}}},
                        {"label_drop", spec.label_drop},
                        {"eval_examples", spec.eval_examples}};
}

DataSpec data_spec_from_json(const nlohmann::json& j) {
  check_keys(j, {"kind", "grid", "peak", "start_peak", "mixture", "label_drop", "eval_examples"}, "data");
  DataSpec spec;
  try {
    if (j.contains("kind")) spec.kind = j.at("kind").get<std::string>();
    if (j.contains("grid")) spec.grid = j.at("grid").get<std::vector<std::size_t>>();
    if (j.contains("peak")) spec.peak = j.at("peak").get<double>();
    if (j.contains("start_peak")) spec.start_peak = j.at("start_peak").get<double>();
    if (j.contains("mixture")) {
      const auto& m = j.at("mixture");
      check_keys(m, {"weights", "means", "vars"}, "data.mixture");
      spec.mixture.weights = m.at("weights").get<std::vector<double>>();
      spec.mixture.means = m.at("means").get<std::vector<std::vector<double>>>();
      spec.mixture.vars = m.at("vars").get<std::vector<std::vector<double>>>();
    }
    if (j.contains("label_drop")) spec.label_drop = j.at("label_drop").get<double>();
    if (j.contains("eval_examples")) spec.eval_examples = j.at("eval_examples").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data config: ") + e.what());
  }
  if (spec.kind != "markov-grid" && spec.kind != "gaussian-mixture") {
    throw ConfigError("unknown data kind '" + spec.kind + "' (expected markov-grid|gaussian-mixture)");
  }
  if (!(spec.label_drop >= 0.0 && spec.label_drop < 1.0)) {
    throw ConfigError("data.label_drop must be in [0, 1)");
  }
  if (spec.eval_examples == 0) throw ConfigError("data.eval_examples must be positive");
  return spec;
}

nlohmann::json to_json(const DiffusionSpec& spec) {
  return nlohmann::json{
      {"steps", spec.steps}, {"shift", spec.shift}, {"weight_offset", spec.weight_offset}};
}

DiffusionSpec diffusion_spec_from_json(const nlohmann::json& j) {
  check_keys(j, {"steps", "shift", "weight_offset"}, "diffusion");
  DiffusionSpec spec;
  try {
    if (j.contains("steps")) spec.steps = j.at("steps").get<int>();
    if (j.contains("shift")) spec.shift = j.at("shift").get<double>();
    if (j.contains("weight_offset")) spec.weight_offset = j.at("weight_offset").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("diffusion config: ") + e.what());
  }
  (void)spec.schedule();  // validates
  return spec;
}

void check_compatible(const DataSpec& spec, const LoopConfig& cfg) {
  if (spec.kind == "markov-grid") {
    if (cfg.mode != Mode::kMasked) throw ConfigError("markov-grid data needs mode=masked");
    std::size_t n = 1;
    for (auto d : spec.grid) n *= d;
    if (spec.grid.empty() || n != static_cast<std::size_t>(cfg.seq_len)) {
      throw ConfigError("data.grid has " + std::to_string(n) + " cells but model.seq_len is " +
                        std::to_string(cfg.seq_len));
    }
  } else {
    if (cfg.mode != Mode::kDiffusion) throw ConfigError("gaussian-mixture data needs mode=diffusion");
    spec.mixture.validate();
    if (spec.mixture.dim() != static_cast<std::size_t>(cfg.seq_len * cfg.latent_dim)) {
      throw ConfigError("data.mixture dim must equal seq_len*latent_dim");
    }
    if (spec.mixture.weights.size() != static_cast<std::size_t>(cfg.n_classes)) {
      throw ConfigError("data.mixture needs one component per class");
    }
  }
}

MarkovGridSource make_markov_source(const DataSpec& spec, const LoopConfig& cfg) {
  check_compatible(spec, cfg);
  if (spec.kind != "markov-grid") throw ConfigError("data kind is not markov-grid");
  return MarkovGridSource::cyclic(spec.grid, cfg.vocab_size, cfg.n_classes, spec.peak,
                                   spec.start_peak);
}

GaussianMixtureSource make_mixture_source(const DataSpec& spec, const LoopConfig& cfg) {
  check_compatible(spec, cfg);
  if (spec.kind != "gaussian-mixture") throw ConfigError("data kind is not gaussian-mixture");
  return GaussianMixtureSource(spec.mixture, static_cast<std::size_t>(cfg.seq_len),
                               static_cast<std::size_t>(cfg.latent_dim));
}

namespace {

TrainBatch build_batch(const DataSpec& spec, const LoopConfig& cfg, const DiffusionSpec& diffusion,
                       std::size_t batch, double label_drop, Rng& rng) {
  if (batch == 0) throw ConfigError("batch size must be positive");
  TrainBatch out;
  out.input.batch = batch;
  out.input.classes.resize(batch);
  const auto S = static_cast<std::size_t>(cfg.seq_len);
  auto draw_class = [&](std::size_t b) {
    const int c = uniform_int(rng, 0, cfg.n_classes - 1);
    const bool drop = label_drop > 0.0 && uniform01(rng) < label_drop;
    out.input.classes[b] = drop ? kNullClass : c;
    return c;
  };
  if (spec.kind == "markov-grid") {
    const auto source = make_markov_source(spec, cfg);
    for (std::size_t b = 0; b < batch; ++b) {
      const int c = draw_class(b);
      const TokenGrid clean(spec.grid, source.sample(c, rng), cfg.vocab_size);
      const auto corrupted = corrupt_for_training(clean, rng);
      for (int t : corrupted.grid.tokens()) out.input.tokens.push_back(static_cast<std::size_t>(t));
      out.targets.insert(out.targets.end(), corrupted.targets.begin(), corrupted.targets.end());
      out.mask.insert(out.mask.end(), corrupted.mask.begin(), corrupted.mask.end());
    }
  } else {
    const auto source = make_mixture_source(spec, cfg);
    const auto schedule = diffusion.schedule();
    const auto D = static_cast<std::size_t>(cfg.latent_dim);
    out.input.latents = Tensor({batch * S, D}, 0.0);
    out.x0 = Tensor({batch * S, D}, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      const int c = draw_class(b);
      const Tensor x0 = source.sample(c, rng);
      const auto noised = corrupt_for_training_diffusion(x0, schedule, rng);
      std::copy(x0.values().begin(), x0.values().end(), out.x0.data() + b * S * D);
      std::copy(noised.x_t.values().begin(), noised.x_t.values().end(),
                out.input.latents.data() + b * S * D);
      out.input.times.push_back(schedule.time_fraction(noised.t));
      out.weights.push_back(noised.weight);
    }
  }
  return out;
}

}  // namespace

TrainBatch make_train_batch(const DataSpec& spec, const LoopConfig& cfg,
                            const DiffusionSpec& diffusion, std::size_t batch, Rng& rng) {
  return build_batch(spec, cfg, diffusion, batch, spec.label_drop, rng);
}

TrainBatch make_eval_set(const DataSpec& spec, const LoopConfig& cfg,
                         const DiffusionSpec& diffusion, std::uint64_t seed) {
  Rng rng = derive_rng(seed, 0x6576616cULL);
  return build_batch(spec, cfg, diffusion, spec.eval_examples, 0.0, rng);
}

}  // namespace elt
