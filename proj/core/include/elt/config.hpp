#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

namespace elt {

enum class Mode { kMasked, kDiffusion };

// How class/time conditioning enters the looped block.
//  kAdditive:  the conditioning vector is added to the hidden state at the
//              start of every loop.
//  kModulated: each layer maps the conditioning vector to a shift and scale
//              for both of its layer norms (adaLN without gates).
enum class Conditioning { kAdditive, kModulated };

std::string to_string(Mode m);
std::string to_string(Conditioning c);
Mode mode_from_string(const std::string& s);
Conditioning conditioning_from_string(const std::string& s);

// Architecture and loop hyperparameters of an elastic looped transformer.
struct LoopConfig {
  Mode mode = Mode::kMasked;
  int n_layers = 2;  // unique layers N in the shared block
  int d_model = 32;
  int n_heads = 2;
  int mlp_dim = 64;
  int loop_min = 1;
  int loop_max = 4;
  int seq_len = 4;
  int vocab_size = 4;  // masked mode; MASK id == vocab_size
  int latent_dim = 2;  // diffusion mode
  int n_classes = 2;   // class table gets one extra row for the null label
  Conditioning conditioning = Conditioning::kAdditive;

  // Throws ConfigError on any violated invariant.
  void validate() const;
  int mask_id() const { return vocab_size; }
  // Width of the head output: vocab_size (masked) or latent_dim (diffusion).
  int output_dim() const { return mode == Mode::kMasked ? vocab_size : latent_dim; }

  friend bool operator==(const LoopConfig&, const LoopConfig&) = default;
};

nlohmann::json to_json(const LoopConfig& cfg);
// Strict: unknown keys and missing keys are ConfigErrors.
LoopConfig loop_config_from_json(const nlohmann::json& j);

}  // namespace elt
