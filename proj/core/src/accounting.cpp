#include "elt/accounting.hpp"

#include "elt/error.hpp"

namespace elt {

ParamCount count_params(const LoopConfig& cfg) {
  cfg.validate();
  const std::uint64_t d = cfg.d_model, m = cfg.mlp_dim, s = cfg.seq_len;
  const std::uint64_t out = cfg.output_dim();
  const std::uint64_t classes = static_cast<std::uint64_t>(cfg.n_classes) + 1;

  std::uint64_t per_layer = 4 * d            // two layer norms
                            + 4 * d * d + 4 * d  // q, k, v, o projections
                            + d * m + m + m * d + d;  // MLP
  if (cfg.conditioning == Conditioning::kModulated) per_layer += d * 4 * d + 4 * d;

  ParamCount c;
  c.block = per_layer * static_cast<std::uint64_t>(cfg.n_layers);
  if (cfg.mode == Mode::kMasked) {
    c.embedding = (static_cast<std::uint64_t>(cfg.vocab_size) + 1) * d;
  } else {
    c.embedding = static_cast<std::uint64_t>(cfg.latent_dim) * d + d + d * d + d;
  }
  c.embedding += s * d + classes * d;
  c.head = 2 * d + d * out + out;
  return c;
}

std::uint64_t block_flops_per_application(const LoopConfig& cfg, int seq_len) {
  if (seq_len < 1) throw ConfigError("seq_len must be positive");
  const std::uint64_t d = cfg.d_model, m = cfg.mlp_dim, s = seq_len;
  const std::uint64_t per_layer = 2 * s * d * 3 * d  // q, k, v
                                  + 2 * s * s * d    // scores
                                  + 2 * s * s * d    // probs @ v
                                  + 2 * s * d * d    // output projection
                                  + 2 * s * d * m * 2;  // MLP
  return per_layer * static_cast<std::uint64_t>(cfg.n_layers);
}

FlopCount count_flops(const LoopConfig& cfg, int loops, int seq_len) {
  cfg.validate();
  if (loops < 1) throw ConfigError("loop count must be >= 1");
  const std::uint64_t d = cfg.d_model, s = seq_len;
  FlopCount f;
  f.block = block_flops_per_application(cfg, seq_len) * static_cast<std::uint64_t>(loops);
  if (cfg.mode == Mode::kDiffusion) {
    f.embedding = 2 * s * static_cast<std::uint64_t>(cfg.latent_dim) * d + 2 * d * d;
  }
  if (cfg.conditioning == Conditioning::kModulated) {
    f.embedding += 2 * d * 4 * d * static_cast<std::uint64_t>(cfg.n_layers);
  }
  f.head = 2 * s * d * static_cast<std::uint64_t>(cfg.output_dim());
  return f;
}

std::uint64_t generation_flops(const LoopConfig& cfg, int loops, int seq_len, int steps,
                               bool cfg_on) {
  if (steps < 1) throw ConfigError("sampling steps must be >= 1");
  const std::uint64_t per_call = count_flops(cfg, loops, seq_len).total();
  return per_call * static_cast<std::uint64_t>(steps) * (cfg_on ? 2u : 1u);
}

}  // namespace elt
