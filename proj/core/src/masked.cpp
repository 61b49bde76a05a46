#include "elt/masked.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "elt/error.hpp"

namespace elt {

TokenGrid::TokenGrid(std::vector<std::size_t> shape, std::vector<int> tokens, int vocab_size)
    : shape_(std::move(shape)), tokens_(std::move(tokens)), vocab_size_(vocab_size) {
  if (vocab_size_ < 1) throw ConfigError("token grid: vocab_size must be positive");
  std::size_t n = 1;
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("token grid: zero-sized dimension");
    n *= d;
  }
  if (shape_.empty() || n != tokens_.size()) {
    throw ShapeError("token grid: shape does not match " + std::to_string(tokens_.size()) + " tokens");
  }
  for (int t : tokens_) {
    if (t < 0 || t > vocab_size_) {
      throw ConfigError("token grid: token " + std::to_string(t) + " outside [0, " +
                        std::to_string(vocab_size_) + "]");
    }
  }
}

TokenGrid TokenGrid::fully_masked(std::vector<std::size_t> shape, int vocab_size) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return TokenGrid(std::move(shape), std::vector<int>(n, vocab_size), vocab_size);
}

void TokenGrid::set(std::size_t flat, int token) {
  if (token < 0 || token > vocab_size_) throw ConfigError("token grid: invalid token");
  tokens_.at(flat) = token;
}

std::size_t TokenGrid::masked_count() const {
  return static_cast<std::size_t>(std::count(tokens_.begin(), tokens_.end(), mask_id()));
}

std::vector<std::size_t> TokenGrid::masked_positions() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i] == mask_id()) out.push_back(i);
  }
  return out;
}

std::size_t TokenGrid::flatten(const std::vector<std::size_t>& index) const {
  if (index.size() != shape_.size()) throw ShapeError("token grid: index rank mismatch");
  std::size_t flat = 0;
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (index[i] >= shape_[i]) throw ShapeError("token grid: index out of range");
    flat = flat * shape_[i] + index[i];
  }
  return flat;
}

std::vector<std::size_t> TokenGrid::unflatten(std::size_t flat) const {
  if (flat >= tokens_.size()) throw ShapeError("token grid: flat index out of range");
  std::vector<std::size_t> index(shape_.size());
  for (std::size_t i = shape_.size(); i-- > 0;) {
    index[i] = flat % shape_[i];
    flat /= shape_[i];
  }
  return index;
}

int cosine_mask_count(int k, int total_steps, int n_tokens) {
  if (total_steps < 1 || k < 0 || k >= total_steps) {
    throw ConfigError("cosine_mask_count: step " + std::to_string(k) + " outside [0, " +
                      std::to_string(total_steps) + ")");
  }
  if (k == total_steps - 1) return 0;
  const double r = static_cast<double>(k + 1) / static_cast<double>(total_steps);
  const double frac = std::cos(std::numbers::pi / 2.0 * r);
  return static_cast<int>(std::floor(frac * static_cast<double>(n_tokens)));
}

double sampling_temperature(int k, int total_steps, double bias, double scale) {
  return bias + scale * (1.0 - static_cast<double>(k + 1) / static_cast<double>(total_steps));
}

Tensor cfg_logits(const Tensor& cond, const Tensor& uncond, double guidance_scale) {
  if (cond.shape() != uncond.shape()) {
    throw ShapeError("cfg_logits: " + shape_str(cond.shape()) + " vs " + shape_str(uncond.shape()));
  }
  Tensor out = uncond;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = uncond[i] + guidance_scale * (cond[i] - uncond[i]);
  }
  return out;
}

TokenGrid sample_and_mask(const Tensor& logits, const TokenGrid& grid, int k,
                          const DecodeOptions& opts, Rng& rng) {
  const int steps = opts.steps;
  if (k < 0 || k >= steps) throw ConfigError("sample_and_mask: step out of range");
  const auto masked = grid.masked_positions();
  if (masked.empty()) {
    if (k == steps - 1) return grid;
    throw ConfigError("sample_and_mask: no masked positions left at step " + std::to_string(k));
  }
  const std::size_t vocab = static_cast<std::size_t>(grid.vocab_size());
  if (logits.rank() != 2 || logits.rows() != grid.size() || logits.cols() != vocab) {
    throw ShapeError("sample_and_mask: logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(grid.size()) + " tokens and vocab " + std::to_string(vocab));
  }
  if (!logits.all_finite()) throw NumericalError("sample_and_mask: non-finite logits");
  const double temp = sampling_temperature(k, steps, opts.temp_bias, opts.temp_scale);
  if (!(temp > 0.0)) throw ConfigError("sample_and_mask: sampling temperature must be positive");

  struct Candidate {
    std::size_t pos;
    int token;
    double confidence;
  };
  std::vector<Candidate> cands;
  cands.reserve(masked.size());
  std::vector<double> probs(vocab);
  for (std::size_t pos : masked) {
    const double* row = logits.data() + pos * vocab;
    double mx = row[0] / temp;
    for (std::size_t v = 1; v < vocab; ++v) mx = std::max(mx, row[v] / temp);
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
      probs[v] = std::exp(row[v] / temp - mx);
      z += probs[v];
    }
    const double u = uniform01(rng) * z;
    double acc = 0.0;
    std::size_t pick = vocab - 1;
    for (std::size_t v = 0; v < vocab; ++v) {
      acc += probs[v];
      if (u < acc) {
        pick = v;
        break;
      }
    }
    // Never land on a zero-probability token through rounding at the tail.
    while (probs[pick] == 0.0 && pick > 0) --pick;
    const double conf =
        opts.order == RevealOrder::kConfidence ? probs[pick] / z : uniform01(rng);
    cands.push_back({pos, static_cast<int>(pick), conf});
  }

  std::size_t reveal = cands.size();
  if (k != steps - 1) {
    const auto keep_masked =
        static_cast<std::size_t>(cosine_mask_count(k, steps, static_cast<int>(grid.size())));
    reveal = keep_masked >= cands.size() ? 0 : cands.size() - keep_masked;
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    return a.confidence > b.confidence;
  });
  TokenGrid out = grid;
  for (std::size_t i = 0; i < reveal; ++i) out.set(cands[i].pos, cands[i].token);
  return out;
}

LoopedMaskedPredictor::LoopedMaskedPredictor(const BlockParams& params)
    : model_(params, LoopedModel::Binding::kFrozen) {
  if (params.config().mode != Mode::kMasked) {
    throw ConfigError("masked predictor needs a masked-mode model");
  }
}

Tensor LoopedMaskedPredictor::logits(const TokenGrid& grid, int class_id, int loops) {
  const LoopConfig& cfg = model_.config();
  if (grid.size() != static_cast<std::size_t>(cfg.seq_len) || grid.vocab_size() != cfg.vocab_size) {
    throw ShapeError("masked predictor: grid of " + std::to_string(grid.size()) +
                     " tokens / vocab " + std::to_string(grid.vocab_size()) +
                     " does not match model seq_len " + std::to_string(cfg.seq_len) + " / vocab " +
                     std::to_string(cfg.vocab_size));
  }
  ModelInput in;
  in.batch = 1;
  in.tokens.assign(grid.tokens().begin(), grid.tokens().end());
  in.classes = {class_id};
  return model_.forward(in, loops).value();
}

GenerateResult generate(MaskedPredictor& model, const std::vector<std::size_t>& shape,
                        int vocab_size, int class_id, int loops, const DecodeOptions& opts,
                        Rng& rng) {
  if (opts.steps < 1) throw ConfigError("generate: need at least one sampling step");
  if (loops < 1) throw ConfigError("generate: loop budget must be >= 1");
  TokenGrid grid = TokenGrid::fully_masked(shape, vocab_size);
  const int n = static_cast<int>(grid.size());
  if (opts.steps >= 3 && cosine_mask_count(opts.steps - 3, opts.steps, n) < 1) {
    throw ConfigError("generate: " + std::to_string(opts.steps) + " steps is too many for " +
                      std::to_string(n) + " tokens under the cosine schedule");
  }
  const bool guided = opts.cfg_scale != 1.0;
  const std::size_t apps_before = model.block_applications();
  GenerateResult result{grid, 0, 0};
  for (int k = 0; k < opts.steps; ++k) {
    Tensor logits = model.logits(grid, class_id, loops);
    ++result.model_calls;
    if (guided) {
      Tensor uncond = model.logits(grid, kNullClass, loops);
      ++result.model_calls;
      logits = cfg_logits(logits, uncond, opts.cfg_scale);
    }
    grid = sample_and_mask(logits, grid, k, opts, rng);
  }
  result.grid = std::move(grid);
  result.block_applications = model.block_applications() - apps_before;
  return result;
}

std::size_t masked_positions_for(double u, std::size_t n_tokens) {
  const double r = std::cos(std::numbers::pi / 2.0 * u);
  const auto count = static_cast<std::size_t>(std::ceil(r * static_cast<double>(n_tokens) - 1e-12));
  return std::clamp<std::size_t>(count, 1, n_tokens);
}

CorruptedGrid corrupt_for_training(const TokenGrid& clean, Rng& rng) {
  if (clean.masked_count() != 0) throw ConfigError("corrupt_for_training: grid already has MASK tokens");
  const double u = uniform01(rng);
  const std::size_t n = clean.size();
  const std::size_t count = masked_positions_for(u, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  CorruptedGrid out{clean, {}, std::vector<std::uint8_t>(n, 0),
                    std::cos(std::numbers::pi / 2.0 * u)};
  out.targets.assign(clean.tokens().begin(), clean.tokens().end());
  for (std::size_t i = 0; i < count; ++i) {
    out.mask[order[i]] = 1;
    out.grid.set(order[i], clean.mask_id());
  }
  return out;
}

}  // namespace elt
